#include "monohom/field.hpp"

#include <cmath>
#include <cstring>
#include <vector>

#include "doctest.h"
#include "monohom/errors.hpp"
#include "monohom/grid.hpp"
#include "monohom/operator.hpp"

using namespace monohom;

namespace {

std::size_t flat_index(const Grid& g, int j0, int j1, int j2) {
  const auto dm = g.dims();
  j0 = ((j0 % g.N) + g.N) % g.N;
  j1 = dm[1] > 1 ? ((j1 % g.N) + g.N) % g.N : 0;
  j2 = dm[2] > 1 ? ((j2 % g.N) + g.N) % g.N : 0;
  return (static_cast<std::size_t>(j0) * dm[1] + j1) * dm[2] + j2;
}

bool bitwise_equal(const ScalarField& a, const ScalarField& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

TEST_SUITE("field") {

TEST_CASE("short-range covariance periodizes to the whole-space value") {
  const Grid g = make_grid(2, 10.0, 40);
  CovarianceSpec cov{"gaussian", g.L / 100.0};
  const ScalarField c = periodized_covariance(cov, g);

  // Independent oracle at lag 0: direct lattice sum over many more periods
  // than the implementation ever visits.
  double oracle = 0.0;
  for (int k0 = -8; k0 <= 8; ++k0)
    for (int k1 = -8; k1 <= 8; ++k1)
      oracle += covariance_value(
          cov, (g.L * k0) * (g.L * k0) + (g.L * k1) * (g.L * k1));
  CHECK(std::abs(c[0] - oracle) <= 1e-12);
  CHECK(std::abs(c[0] - covariance_value(cov, 0.0)) <= 1e-12);
}

TEST_CASE("zero covariance gives the zero field and zero samples") {
  const Grid g = make_grid(2, 4.0, 16);
  CovarianceSpec cov{"zero", 1.0};
  const ScalarField c = periodized_covariance(cov, g);
  for (std::size_t i = 0; i < c.size(); ++i) CHECK(c[i] == 0.0);

  const GaussianSample s = sample_gaussian(c, {7, 0});
  for (std::size_t i = 0; i < s.field.size(); ++i) CHECK(s.field[i] == 0.0);
  CHECK(s.clipped_mass == 0.0);
  CHECK_FALSE(s.warned);
}

TEST_CASE("periodized covariance is bitwise even under lag negation") {
  const Grid g = make_grid(3, 6.0, 12);
  CovarianceSpec cov{"gaussian", 1.0};
  const ScalarField c = periodized_covariance(cov, g);
  for (int j0 = 0; j0 < g.N; ++j0)
    for (int j1 = 0; j1 < g.N; ++j1)
      for (int j2 = 0; j2 < g.N; ++j2)
        CHECK(c[flat_index(g, j0, j1, j2)] ==
              c[flat_index(g, -j0, -j1, -j2)]);
}

TEST_CASE("periodization preconditions and convergence failures") {
  const Grid g = make_grid(1, 4.0, 64);
  CHECK_THROWS_AS(periodized_covariance({"gaussian", 1.5}, g), ConfigError);
  // Exponential tails at L = 4 ell_c stay above the shell cutoff for more
  // than 5 periods.
  CHECK_THROWS_AS(periodized_covariance({"exponential", 1.0}, g), ConfigError);
  CHECK_THROWS_AS(periodized_covariance({"lorentz", 1.0}, g), ConfigError);
  CHECK_THROWS_AS(covariance_value({"gaussian", -1.0}, 0.0), ConfigError);
}

TEST_CASE("periodization error decreases strictly as the torus grows") {
  const double ell = 1.0, h = 0.25;
  double prev = 1e300;
  std::vector<double> errs;
  for (int mult : {8, 16, 32}) {
    const double L = mult * ell;
    const Grid g = make_grid(2, L, static_cast<int>(L / h));
    const ScalarField c = periodized_covariance({"gaussian", ell}, g);
    // Whole-space value at the same lattice lags, on the common window
    // |lag| <= 4 ell per axis.
    double mx = 0.0;
    const int w = static_cast<int>(4.0 * ell / h);
    for (int j0 = -w; j0 < w; ++j0)
      for (int j1 = -w; j1 < w; ++j1) {
        const double y0 = h * std::abs(j0), y1 = h * std::abs(j1);
        const double cw = covariance_value({"gaussian", ell}, y0 * y0 + y1 * y1);
        mx = std::max(mx, std::abs(c[flat_index(g, j0, j1, 0)] - cw));
      }
    errs.push_back(mx);
    // Non-strict per step: beyond L = 8 ell_c the tail terms sit below one
    // ulp of c and the computed error collapses to exactly zero.
    CHECK(mx <= prev);
    prev = mx;
  }
  CHECK(errs.front() > 1e-9);   // starts genuinely nonzero
  CHECK(errs.back() < errs.front());  // strictly smaller overall
}

TEST_CASE("gaussian sampling reproduces the covariance at two lags") {
  const Grid g = make_grid(2, 8.0, 32);
  CovarianceSpec cov{"gaussian", 1.0};
  const ScalarField c = periodized_covariance(cov, g);
  Spectral ws(g);

  const int n_samples = 2000;
  const int lag = g.N / 8;  // physical offset L/8 along axis 1
  std::vector<double> x0(n_samples), x1(n_samples);
  for (int s = 0; s < n_samples; ++s) {
    const GaussianSample gs = sample_gaussian(c, {42, (std::uint64_t)s}, ws);
    double a0 = 0.0, a1 = 0.0;
    for (int j0 = 0; j0 < g.N; ++j0)
      for (int j1 = 0; j1 < g.N; ++j1) {
        const double v = gs.field[flat_index(g, j0, j1, 0)];
        a0 += v * v;
        a1 += v * gs.field[flat_index(g, j0 + lag, j1, 0)];
      }
    x0[s] = a0 / g.size();
    x1[s] = a1 / g.size();
  }
  auto mean_se = [&](const std::vector<double>& x) {
    double m = 0.0;
    for (double v : x) m += v;
    m /= x.size();
    double var = 0.0;
    for (double v : x) var += (v - m) * (v - m);
    var /= (x.size() - 1.0);
    return std::array<double, 2>{m, std::sqrt(var / x.size())};
  };
  const auto s0 = mean_se(x0), s1 = mean_se(x1);
  CHECK(std::abs(s0[0] - c[0]) <= 4.0 * s0[1]);
  CHECK(std::abs(s1[0] - c[flat_index(g, lag, 0, 0)]) <= 4.0 * s1[1]);
  CHECK(s0[1] > 0.0);
}

TEST_CASE("sampling is bitwise deterministic and seed-sensitive") {
  const Grid g = make_grid(3, 4.0, 8);
  const ScalarField c = periodized_covariance({"gaussian", 1.0}, g);
  const GaussianSample a = sample_gaussian(c, {3, 5});
  const GaussianSample b = sample_gaussian(c, {3, 5});
  CHECK(bitwise_equal(a.field, b.field));
  const GaussianSample d = sample_gaussian(c, {3, 6});
  CHECK_FALSE(bitwise_equal(a.field, d.field));
}

TEST_CASE("non-even covariance input is rejected") {
  const Grid g = make_grid(2, 8.0, 16);
  ScalarField c = periodized_covariance({"gaussian", 1.0}, g);
  c[flat_index(g, 1, 0, 0)] += 0.5;
  CHECK_THROWS_AS(sample_gaussian(c, {0, 0}), ConfigError);
}

TEST_CASE("clipped spectral mass is tracked and warned about") {
  const Grid g = make_grid(2, 8.0, 32);
  ScalarField c = periodized_covariance({"gaussian", 1.0}, g);
  const GaussianSample clean = sample_gaussian(c, {1, 1});
  CHECK(clean.clipped_mass < 1e-10);
  CHECK_FALSE(clean.warned);

  // Deflating the lag-0 value shifts the whole spectrum down and makes the
  // tail negative; sampling must clip, report the mass, and still return a
  // finite field.
  c[0] -= 0.1;
  const GaussianSample dirty = sample_gaussian(c, {1, 1});
  CHECK(dirty.clipped_mass > 1e-8);
  CHECK(dirty.warned);
  for (std::size_t i = 0; i < dirty.field.size(); ++i)
    CHECK(std::isfinite(dirty.field[i]));
}

TEST_CASE("coupled pair: identical grids give bitwise identical fields") {
  const Grid g = make_grid(2, 8.0, 32);
  const auto [s1, s2] = coupled_pair({"gaussian", 1.0}, g, g, {11, 0});
  CHECK(bitwise_equal(s1.field, s2.field));
}

TEST_CASE("coupled pair: zero covariance gives two zero fields") {
  const Grid g1 = make_grid(2, 4.0, 16);
  const Grid g2 = make_grid(2, 8.0, 32);
  const auto [s1, s2] = coupled_pair({"zero", 1.0}, g1, g2, {11, 0});
  for (std::size_t i = 0; i < s1.field.size(); ++i) CHECK(s1.field[i] == 0.0);
  for (std::size_t i = 0; i < s2.field.size(); ++i) CHECK(s2.field[i] == 0.0);
}

TEST_CASE("coupled pair rejects mismatched lattices") {
  const Grid g1 = make_grid(2, 4.0, 16);
  CHECK_THROWS_AS(coupled_pair({"gaussian", 1.0}, g1, make_grid(2, 8.0, 16),
                               {0, 0}),
                  ConfigError);  // different spacing
  CHECK_THROWS_AS(coupled_pair({"gaussian", 1.0}, g1, make_grid(3, 8.0, 32),
                               {0, 0}),
                  ConfigError);  // different dimension
  CHECK_THROWS_AS(coupled_pair({"gaussian", 1.0}, make_grid(2, 8.0, 32), g1,
                               {0, 0}),
                  ConfigError);  // shrinking torus
}

TEST_CASE("coupling discrepancy on a fixed window shrinks as tori grow") {
  // Pairs (L1, 2 L1) at L1 = 4 ell_c and L1 = 16 ell_c, equal spacing.
  // The sup discrepancy over the fixed window Q_{4 ell_c} is O(1) when the
  // window touches the small torus seam and near zero once both tori are
  // comfortably larger than the window.
  const double ell = 1.0, h = 0.25;
  auto mean_sup = [&](double L1) {
    const Grid g1 = make_grid(2, L1, static_cast<int>(L1 / h));
    const Grid g2 = make_grid(2, 2 * L1, static_cast<int>(2 * L1 / h));
    const int w1 = static_cast<int>(2.0 * ell / h);  // window [-2 ell, 2 ell)
    double acc = 0.0;
    const int n_seeds = 50;
    for (int s = 0; s < n_seeds; ++s) {
      const auto [a, b] =
          coupled_pair({"gaussian", ell}, g1, g2, {99, (std::uint64_t)s});
      double sup = 0.0;
      for (int j0 = -w1; j0 < w1; ++j0)
        for (int j1 = -w1; j1 < w1; ++j1) {
          const double va = a.field[flat_index(g1, g1.N / 2 + j0,
                                               g1.N / 2 + j1, 0)];
          const double vb = b.field[flat_index(g2, g2.N / 2 + j0,
                                               g2.N / 2 + j1, 0)];
          sup = std::max(sup, std::abs(va - vb));
        }
      acc += sup;
    }
    return acc / n_seeds;
  };
  const double small_pair = mean_sup(4.0 * ell);
  const double large_pair = mean_sup(16.0 * ell);
  CHECK(large_pair < small_pair);
  CHECK(large_pair < 0.1 * small_pair);
}

TEST_CASE("convolution kernel is normalized with compact support") {
  const Grid g = make_grid(2, 8.0, 32);
  const ScalarField chi = make_kernel(g, 2);
  double sum = 0.0;
  int nz = 0;
  for (std::size_t i = 0; i < chi.size(); ++i) {
    CHECK(chi[i] >= 0.0);
    sum += chi[i];
    if (chi[i] != 0.0) ++nz;
  }
  CHECK(std::abs(sum - 1.0) <= 1e-14);
  CHECK(nz == 9);  // offsets with |o| < 2 cells in d = 2
  CHECK_THROWS_AS(make_kernel(g, 0), ConfigError);
  CHECK_THROWS_AS(make_kernel(g, g.N), ConfigError);
}

TEST_CASE("constant B preset yields a constant coefficient field") {
  const Grid g = make_grid(2, 8.0, 32);
  CoefficientRecipe r;
  r.lambda = 0.3;
  r.B = "const";
  const GaussianSample gs =
      sample_gaussian(periodized_covariance({"gaussian", 1.0}, g), {5, 0});
  const MatrixField A = make_coefficient(gs.field, r);
  const double want = 0.5 * (1.0 + r.lambda);
  for (std::size_t n = 0; n < g.size(); ++n)
    for (int i = 0; i < g.d; ++i)
      for (int j = 0; j < g.d; ++j)
        CHECK(std::abs(A.comp(i, j)[n] - (i == j ? want : 0.0)) <= 1e-13);
}

TEST_CASE("tanh preset stays inside the ellipticity sandwich") {
  const Grid g = make_grid(2, 8.0, 32);
  CoefficientRecipe r;
  r.lambda = 0.2;
  r.B = "tanh";
  const GaussianSample gs =
      sample_gaussian(periodized_covariance({"gaussian", 1.0}, g), {17, 3});
  const MatrixField A = make_coefficient(gs.field, r);
  double lo = 1e300, hi = -1e300;
  for (std::size_t n = 0; n < g.size(); ++n) {
    const double v = A.comp(0, 0)[n];
    CHECK(A.comp(0, 1)[n] == 0.0);
    CHECK(A.comp(1, 0)[n] == 0.0);
    CHECK(std::abs(A.comp(1, 1)[n] - v) <= 1e-15);
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  CHECK(lo >= r.lambda - 1e-10);
  CHECK(hi <= 1.0 + 1e-10);
  CHECK(hi - lo > 0.1);  // genuinely heterogeneous at this contrast
}

TEST_CASE("isotropic recipes commute with quarter-turn lattice rotation") {
  const Grid g = make_grid(2, 8.0, 32);
  CoefficientRecipe r;
  r.lambda = 0.25;
  r.B = "tanh";
  const ScalarField c = periodized_covariance({"gaussian", 1.0}, g);
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const GaussianSample gs = sample_gaussian(c, {123, seed});
    ScalarField grot(g);
    for (int j0 = 0; j0 < g.N; ++j0)
      for (int j1 = 0; j1 < g.N; ++j1)
        grot[flat_index(g, -j1, j0, 0)] = gs.field[flat_index(g, j0, j1, 0)];
    const MatrixField A = make_coefficient(gs.field, r);
    const MatrixField Arot = make_coefficient(grot, r);
    double mx = 0.0;
    for (int j0 = 0; j0 < g.N; ++j0)
      for (int j1 = 0; j1 < g.N; ++j1)
        mx = std::max(mx,
                      std::abs(Arot.comp(0, 0)[flat_index(g, -j1, j0, 0)] -
                               A.comp(0, 0)[flat_index(g, j0, j1, 0)]));
    CHECK(mx <= 1e-12);
  }
}

TEST_CASE("skew preset is honestly nonsymmetric yet non-expansive") {
  const Grid g = make_grid(2, 8.0, 32);
  CoefficientRecipe r;
  r.lambda = 0.25;
  r.B = "tanh-skew";
  const GaussianSample gs =
      sample_gaussian(periodized_covariance({"gaussian", 1.0}, g), {31, 2});
  const MatrixField A = make_coefficient(gs.field, r);
  double skew = 0.0;
  for (std::size_t n = 0; n < g.size(); ++n)
    skew = std::max(skew, std::abs(A.comp(0, 1)[n] - A.comp(1, 0)[n]));
  CHECK(skew > 1e-3);

  std::uint64_t st = 7;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n =
        rng::mix64(st += 0x9e3779b97f4a7c15ull) % g.size();
    Vec xi = Vec::zero(g.d);
    for (int i = 0; i < g.d; ++i)
      xi.v[i] = 2.0 * rng::uniform(rng::mix64(st += 13 + i)) - 1.0;
    Mat M = Mat::scaled_identity(g.d, 0.0);
    for (int i = 0; i < g.d; ++i)
      for (int j = 0; j < g.d; ++j) M(i, j) = A.comp(i, j)[n];
    const Vec Axi = M * xi;
    const double q = dot(xi, Axi);
    CHECK(q >= r.lambda * dot(xi, xi) - 1e-12);
    CHECK(Axi.norm() <= xi.norm() + 1e-12);
  }
}

TEST_CASE("table preset interpolates and validates") {
  CoefficientRecipe r;
  r.lambda = 0.25;
  r.B = "table";
  r.table = {{-1.0, 0.25}, {0.0, 0.5}, {1.0, 1.0}};
  CHECK(recipe_B(r, 1, -5.0)(0, 0) == 0.25);
  CHECK(recipe_B(r, 1, 5.0)(0, 0) == 1.0);
  CHECK(std::abs(recipe_B(r, 1, 0.5)(0, 0) - 0.75) <= 1e-15);

  CoefficientRecipe bad = r;
  bad.table = {{0.0, 0.1}};  // below lambda
  CHECK_THROWS_AS(recipe_B(bad, 1, 0.0), ConfigError);
  bad.table = {{1.0, 0.5}, {0.0, 0.5}};  // not increasing
  CHECK_THROWS_AS(recipe_B(bad, 1, 0.0), ConfigError);
  bad.table = {};
  CHECK_THROWS_AS(recipe_B(bad, 1, 0.0), ConfigError);
  bad = r;
  bad.B = "mystery";
  CHECK_THROWS_AS(recipe_B(bad, 1, 0.0), ConfigError);
  bad = r;
  bad.lambda = 1.5;
  CHECK_THROWS_AS(recipe_B(bad, 1, 0.0), ConfigError);
}

TEST_CASE("admissibility holds on random vectors across presets") {
  for (const char* preset : {"tanh", "diag", "tanh-skew"}) {
    const Grid g = make_grid(3, 4.0, 8);
    CoefficientRecipe r;
    r.lambda = 0.25;
    r.B = preset;
    const GaussianSample gs =
        sample_gaussian(periodized_covariance({"gaussian", 1.0}, g), {77, 8});
    const MatrixField A = make_coefficient(gs.field, r);
    std::uint64_t st = 1234;
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t n = rng::mix64(st += 0x9e3779b97f4a7c15ull) % g.size();
      Vec xi = Vec::zero(g.d);
      for (int i = 0; i < g.d; ++i)
        xi.v[i] = 2.0 * rng::uniform(rng::mix64(st += 17 + i)) - 1.0;
      Mat M = Mat::scaled_identity(g.d, 0.0);
      for (int i = 0; i < g.d; ++i)
        for (int j = 0; j < g.d; ++j) M(i, j) = A.comp(i, j)[n];
      const Vec Axi = M * xi;
      CHECK(dot(xi, Axi) >= r.lambda * dot(xi, xi) - 1e-12);
      CHECK(dot(xi, Axi) <= dot(xi, xi) + 1e-12);
      CHECK(Axi.norm() <= xi.norm() + 1e-12);
    }
  }
}

TEST_CASE("gaussian layer is stationary: mean zero, covariance lag-only") {
  const Grid g = make_grid(2, 8.0, 32);
  const ScalarField c = periodized_covariance({"gaussian", 1.0}, g);
  Spectral ws(g);
  const int n_samples = 500;
  const int lags[3][2] = {{0, 0}, {g.N / 4, 0}, {g.N / 8, g.N / 8}};
  std::vector<double> gm(n_samples);
  std::vector<std::array<double, 2>> half_prod[3];
  for (auto& v : half_prod) v.assign(n_samples, {0.0, 0.0});

  for (int s = 0; s < n_samples; ++s) {
    const GaussianSample gs = sample_gaussian(c, {2024, (std::uint64_t)s}, ws);
    double m = 0.0;
    for (std::size_t i = 0; i < gs.field.size(); ++i) m += gs.field[i];
    gm[s] = m / g.size();
    for (int l = 0; l < 3; ++l) {
      double left = 0.0, right = 0.0;
      for (int j0 = 0; j0 < g.N; ++j0)
        for (int j1 = 0; j1 < g.N; ++j1) {
          const double v = gs.field[flat_index(g, j0, j1, 0)] *
                           gs.field[flat_index(g, j0 + lags[l][0],
                                               j1 + lags[l][1], 0)];
          (j0 < g.N / 2 ? left : right) += v;
        }
      half_prod[l][s] = {left / (g.size() / 2), right / (g.size() / 2)};
    }
  }
  auto mean_se = [&](auto get) {
    double m = 0.0;
    for (int s = 0; s < n_samples; ++s) m += get(s);
    m /= n_samples;
    double var = 0.0;
    for (int s = 0; s < n_samples; ++s)
      var += (get(s) - m) * (get(s) - m);
    var /= (n_samples - 1.0);
    return std::array<double, 2>{m, std::sqrt(var / n_samples)};
  };
  const auto ms = mean_se([&](int s) { return gm[s]; });
  CHECK(std::abs(ms[0]) <= 4.0 * ms[1]);
  for (int l = 0; l < 3; ++l) {
    const auto a = mean_se([&](int s) { return half_prod[l][s][0]; });
    const auto b = mean_se([&](int s) { return half_prod[l][s][1]; });
    CHECK(std::abs(a[0] - b[0]) <=
          4.0 * std::sqrt(a[1] * a[1] + b[1] * b[1]));
  }
}

TEST_CASE("sampler fast path matches the one-shot construction bitwise") {
  const Grid g = make_grid(2, 8.0, 32);
  CoefficientRecipe r;
  r.lambda = 0.25;
  r.B = "tanh";
  r.covariance = {"gaussian", 1.0};
  CoefficientSampler sampler(g, r);
  CHECK(sampler.clipped_mass() < 1e-10);

  const rng::Key key{55, 9};
  const MatrixField fast = sampler.sample(key);
  const GaussianSample gs =
      sample_gaussian(periodized_covariance(r.covariance, g), key);
  CHECK(bitwise_equal(sampler.sample_gaussian_layer(key).field, gs.field));
  const MatrixField slow = make_coefficient(gs.field, r);
  for (int i = 0; i < g.d; ++i)
    for (int j = 0; j < g.d; ++j)
      CHECK(std::memcmp(fast.comp(i, j).data(), slow.comp(i, j).data(),
                        g.size() * sizeof(double)) == 0);
}

}  // TEST_SUITE
