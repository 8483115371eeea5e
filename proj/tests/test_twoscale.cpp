#include "monohom/twoscale.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "monohom/corrector.hpp"
#include "monohom/errors.hpp"
#include "monohom/rng.hpp"

using namespace monohom;

namespace {

MatrixField constant_A(const Grid& g, double b) {
  MatrixField A(g);
  for (int a = 0; a < g.d; ++a)
    std::fill(A.comp(a, a).begin(), A.comp(a, a).end(), b);
  return A;
}

OperatorSpec sampled_spec(const Grid& g, double p, rng::Key key,
                          double lambda = 0.25, double ell_c = 0.125) {
  CoefficientRecipe r;
  r.lambda = lambda;
  r.covariance = {"gaussian", ell_c};
  OperatorSpec s;
  s.p = p;
  s.lambda = lambda;
  s.A = CoefficientSampler(g, r).sample(key);
  return s;
}

double rel_l2(const ScalarField& a, const ScalarField& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t x = 0; x < a.size(); ++x) {
    const double d = a[x] - b[x];
    num += d * d;
    den += b[x] * b[x];
  }
  return std::sqrt(num / std::max(den, 1e-300));
}

double max_diff(const VectorField& a, const VectorField& b) {
  double m = 0.0;
  for (int i = 0; i < a.grid().d; ++i)
    for (std::size_t x = 0; x < a.size(); ++x)
      m = std::max(m, std::abs(a.comp(i)[x] - b.comp(i)[x]));
  return m;
}

double rms_diff(const VectorField& a, const VectorField& b) {
  double s = 0.0;
  for (int i = 0; i < a.grid().d; ++i)
    for (std::size_t x = 0; x < a.size(); ++x) {
      const double d = a.comp(i)[x] - b.comp(i)[x];
      s += d * d;
    }
  return std::sqrt(s / static_cast<double>(a.size()));
}

ScalarField smooth_scalar(const Grid& g, double amp) {
  ScalarField u(g);
  const double om = 2.0 * M_PI / g.L;
  const auto dims = g.dims();
  const std::size_t s1 = static_cast<std::size_t>(dims[1]) * dims[2];
  for (int j0 = 0; j0 < dims[0]; ++j0)
    for (int j1 = 0; j1 < dims[1]; ++j1)
      for (int j2 = 0; j2 < dims[2]; ++j2) {
        double v = amp * std::sin(om * g.coord(j0));
        if (g.d > 1) v *= std::cos(om * g.coord(j1));
        u[j0 * s1 + j1 * static_cast<std::size_t>(dims[2]) + j2] = v;
      }
  return u;
}

VectorField constant_gradient(const Grid& g, const Vec& xi) {
  VectorField G(g);
  for (int a = 0; a < g.d; ++a)
    std::fill(G.comp(a).begin(), G.comp(a).end(), xi[a]);
  return G;
}

ScalarField affine_field(const Grid& g, const Vec& xi) {
  ScalarField u(g);
  const auto dims = g.dims();
  const std::size_t s1 = static_cast<std::size_t>(dims[1]) * dims[2];
  for (int j0 = 0; j0 < dims[0]; ++j0)
    for (int j1 = 0; j1 < dims[1]; ++j1)
      for (int j2 = 0; j2 < dims[2]; ++j2) {
        double v = xi[0] * g.coord(j0);
        if (g.d > 1) v += xi[1] * g.coord(j1);
        if (g.d > 2) v += xi[2] * g.coord(j2);
        u[j0 * s1 + j1 * static_cast<std::size_t>(dims[2]) + j2] = v;
      }
  return u;
}

}  // namespace

TEST_SUITE("twoscale") {

TEST_CASE("partition: exact sum, range, plateau and support in 1, 2, 3 d") {
  for (int d : {1, 2, 3}) {
    const int N = d == 3 ? 32 : 64;
    const Grid g = make_grid(d, 1.0, N);
    const double delta = 0.25;
    const PartitionOfUnity pou = build_partition(g, delta);
    const int cells = static_cast<int>(std::llround(delta / g.h));
    CHECK(pou.per_axis == g.N / cells);
    CHECK(pou.c_low == 1.0);
    CHECK(pou.c_grad > 0.0);
    CHECK(pou.c_grad <= 4.0 * d);
    CHECK(pou.plateau == (d == 1 ? 0.25 * delta : delta / (2.0 * d)));

    const auto dims = g.dims();
    const std::size_t s1 = static_cast<std::size_t>(dims[1]) * dims[2];
    // Sum over centers at a spread of nodes, plus derivative cancellation.
    for (int t = 0; t < 100; ++t) {
      const int j0 = (t * 13) % dims[0];
      const int j1 = (t * 29) % dims[1];
      const int j2 = (t * 7) % dims[2];
      double sum = 0.0;
      for (int k = 0; k < pou.center_count(); ++k)
        sum += pou.eta(k, j0, j1, j2);
      CHECK(std::abs(sum - 1.0) <= 1e-12);
    }

    // At its own center every eta is exactly 1 and every other center's
    // eta is exactly 0 (centers are delta-separated, past the support).
    const auto c0 = pou.center_index(0);
    CHECK(pou.eta(0, c0[0] * cells, c0[1] * cells, c0[2] * cells) == 1.0);
    for (int k = 1; k < pou.center_count(); ++k) {
      const auto ck = pou.center_index(k);
      CHECK(pou.eta(0, ck[0] * cells, ck[1] * cells, ck[2] * cells) == 0.0);
    }

    // Support: zero as soon as one axis distance reaches delta.
    const ScalarField e0 = pou.eta_field(0);
    const auto p0 = pou.center_position(0);
    for (int j0 = 0; j0 < dims[0]; ++j0)
      for (int j1 = 0; j1 < dims[1]; ++j1)
        for (int j2 = 0; j2 < dims[2]; ++j2) {
          const double v = e0[j0 * s1 + j1 * static_cast<std::size_t>(dims[2]) + j2];
          CHECK(v >= 0.0);
          CHECK(v <= 1.0);
          double dist = std::abs(g.min_image(g.coord(j0) - p0[0]));
          if (d > 1)
            dist = std::max(dist, std::abs(g.min_image(g.coord(j1) - p0[1])));
          if (d > 2)
            dist = std::max(dist, std::abs(g.min_image(g.coord(j2) - p0[2])));
          if (dist >= delta) CHECK(v == 0.0);
          if (dist <= pou.plateau * (1.0 + 1e-12)) CHECK(v == 1.0);
        }

    // Gradients of all members cancel node by node.
    VectorField gsum(g);
    for (int k = 0; k < pou.center_count(); ++k) {
      const VectorField gk = pou.grad_eta_field(k);
      for (int a = 0; a < d; ++a)
        for (std::size_t x = 0; x < g.size(); ++x)
          gsum.comp(a)[x] += gk.comp(a)[x];
    }
    for (int a = 0; a < d; ++a)
      for (std::size_t x = 0; x < g.size(); ++x)
        CHECK(std::abs(gsum.comp(a)[x]) * delta <= 1e-11);
  }
}

TEST_CASE("partition: rejects unusable delta") {
  const Grid g = make_grid(1, 1.0, 64);
  CHECK_THROWS_AS(build_partition(g, 10.49 * g.h), ConfigError);
  CHECK_THROWS_AS(build_partition(g, 4.0 * g.h), ConfigError);
  CHECK_THROWS_AS(build_partition(g, 32.0 * g.h), ConfigError);
  CHECK_THROWS_AS(build_partition(g, 12.0 * g.h), ConfigError);
  CHECK_THROWS_AS(build_partition(g, 0.0), ConfigError);
  CHECK_THROWS_AS(build_partition(g, -0.25), ConfigError);
}

TEST_CASE("heterogeneous solve: zero datum returns the zero field") {
  const Grid g = make_grid(2, 1.0, 32);
  OperatorSpec spec = sampled_spec(g, 3.0, {11, 0});
  const ScalarField u = solve_heterogeneous(spec, VectorField(g));
  for (std::size_t x = 0; x < u.size(); ++x) CHECK(u[x] == 0.0);
}

TEST_CASE("heterogeneous solve at p = 2 matches the linear solver on 2A") {
  const Grid g = make_grid(2, 1.0, 64);
  OperatorSpec spec = sampled_spec(g, 2.0, {12, 0});
  const VectorField f = smooth_rhs(g, 1.0);
  SolveStats st;
  const ScalarField u = solve_heterogeneous(spec, f, {}, &st);
  CHECK(st.rel_residual <= 1e-10);

  MatrixField K(g);
  for (int i = 0; i < g.d; ++i)
    for (int j = 0; j < g.d; ++j)
      for (std::size_t x = 0; x < g.size(); ++x)
        K.comp(i, j)[x] = 2.0 * spec.A.comp(i, j)[x];
  const auto [ul, stl] = solve_linear(K, f);
  CHECK(rel_l2(u, ul) <= 1e-8);
}

TEST_CASE("1-d p = 2: flux-constant closed form to 1e-8 at N = 2048") {
  const Grid g = make_grid(1, 1.0, 2048);
  OperatorSpec spec;
  spec.p = 2.0;
  spec.lambda = 1.0 / 3.0;
  spec.A = MatrixField(g);
  for (int j = 0; j < g.N; ++j)
    spec.A.comp(0, 0)[j] = (2.0 + std::cos(2.0 * M_PI * g.coord(j) / g.L)) / 3.0;
  const VectorField f = smooth_rhs(g, 1.0);

  // a(D+ u) + f = c on the discrete torus, so D+ u = (c - f) / (2A) with c
  // fixed by periodicity of u.
  double num = 0.0, den = 0.0;
  for (int j = 0; j < g.N; ++j) {
    num += f.comp(0)[j] / (2.0 * spec.A.comp(0, 0)[j]);
    den += 1.0 / (2.0 * spec.A.comp(0, 0)[j]);
  }
  const double c = num / den;
  ScalarField uo(g);
  double acc = 0.0;
  for (int j = 0; j < g.N; ++j) {
    uo[j] = acc;
    acc += g.h * (c - f.comp(0)[j]) / (2.0 * spec.A.comp(0, 0)[j]);
  }
  remove_mean(uo);

  const ScalarField u = solve_heterogeneous(spec, f);
  CHECK(rel_l2(u, uo) <= 1e-8);
}

TEST_CASE("radial table: interpolation exactness, clamps, tangent") {
  // Constant and linear profiles reproduce exactly between nodes.
  const RadialTable tc = make_radial_table({0.0, 1.0, 2.0}, {3.0, 3.0, 3.0});
  CHECK(tc.eval(0.5) == doctest::Approx(3.0).epsilon(1e-15));
  CHECK(tc.deriv(0.7) == doctest::Approx(0.0).epsilon(1e-15));

  const RadialTable tl =
      make_radial_table({0.0, 0.5, 2.0}, {1.0, 2.0, 5.0});
  CHECK(tl.eval(1.3) == doctest::Approx(1.0 + 2.0 * 1.3).epsilon(1e-14));
  CHECK(tl.deriv(0.3) == doctest::Approx(2.0).epsilon(1e-12));

  // Quadratic rho is exact under three-point slopes on uneven spacing,
  // which covers the constant-coefficient maps for p in {2, 3, 4}.
  auto q = [](double t) { return 1.0 + t + t * t; };
  const RadialTable tq =
      make_radial_table({0.0, 0.4, 1.1, 2.0}, {q(0.0), q(0.4), q(1.1), q(2.0)});
  CHECK(tq.eval(0.9) == doctest::Approx(q(0.9)).epsilon(1e-13));
  CHECK(tq.deriv(1.5) == doctest::Approx(1.0 + 3.0).epsilon(1e-12));

  // Clamped constant extension on both sides.
  CHECK(tq.eval(5.0) == q(2.0));
  CHECK(tq.deriv(5.0) == 0.0);
  CHECK(tq.tmax() == 2.0);

  // abar and tangent agree with a finite difference of abar.
  Vec xi = Vec::zero(2);
  xi[0] = 0.6;
  xi[1] = -0.3;
  const Vec axi = tq.abar(xi);
  CHECK(axi[0] == doctest::Approx(tq.eval(xi.norm()) * 0.6).epsilon(1e-14));
  const Mat K = tq.tangent(xi);
  const double fd = 1e-6;
  for (int dir = 0; dir < 2; ++dir) {
    Vec xp = xi, xm = xi;
    xp[dir] += fd;
    xm[dir] -= fd;
    const Vec da = tq.abar(xp) - tq.abar(xm);
    for (int i = 0; i < 2; ++i)
      CHECK(std::abs(da[i] / (2.0 * fd) - K(i, dir)) <= 1e-7);
  }
  const Mat K0 = tq.tangent(Vec::zero(2));
  CHECK(K0(0, 0) == doctest::Approx(q(0.0)).epsilon(1e-15));
  CHECK(K0(0, 1) == 0.0);

  CHECK_THROWS_AS(make_radial_table({0.0, 1.0}, {1.0}), ConfigError);
  CHECK_THROWS_AS(make_radial_table({0.0}, {1.0}), ConfigError);
  CHECK_THROWS_AS(make_radial_table({0.0, 1.0, 0.5}, {1.0, 1.0, 1.0}),
                  ConfigError);
  CHECK_THROWS_AS(make_radial_table({-0.5, 1.0}, {1.0, 1.0}), ConfigError);
  CHECK_THROWS_AS(make_radial_table({0.0, 1.0}, {1.0, -2.0}), ConfigError);
  CHECK_THROWS_AS(make_radial_table({1.0, 2.0}, {1.0, 0.2}), ConfigError);
}

TEST_CASE("homogenized solve: identity map reduces to the poisson solve") {
  const Grid g = make_grid(2, 1.0, 64);
  const VectorField f = smooth_rhs(g, 1.0);
  const RadialTable id = make_radial_table({0.0, 2.0}, {1.0, 1.0});
  const HomogenizedResult hr = solve_homogenized(id, f);
  const ScalarField up = solve_poisson(divergence(f));
  CHECK(rel_l2(hr.u, up) <= 1e-9);
  CHECK(hr.stats.rel_residual <= 1e-10);
  CHECK(hr.grad_max > 0.0);
  CHECK(hr.grad_max <= 2.0);

  // Zero datum short-circuits.
  const HomogenizedResult hz = solve_homogenized(id, VectorField(g));
  for (std::size_t x = 0; x < hz.u.size(); ++x) CHECK(hz.u[x] == 0.0);

  RadialTable raw;
  raw.t = {0.0, 1.0};
  raw.rho = {1.0, 1.0};
  CHECK_THROWS_AS(solve_homogenized(raw, f), ConfigError);
}

TEST_CASE("homogenized solve agrees with the constant-coefficient operator") {
  const Grid g = make_grid(2, 1.0, 64);
  const double b = 0.7;
  OperatorSpec spec{3.0, 0.7, constant_A(g, b)};
  const VectorField f = smooth_rhs(g, 1.0);
  const ScalarField ue = solve_heterogeneous(spec, f);

  std::vector<double> t(9), rho(9);
  for (int i = 0; i < 9; ++i) {
    t[i] = 2.0 * i / 8.0;
    rho[i] = b * (1.0 + t[i]);
  }
  const HomogenizedResult hr = solve_homogenized(make_radial_table(t, rho), f);
  CHECK(rel_l2(hr.u, ue) <= 1e-8);
}

TEST_CASE("homogenized solve: short table raises, adaptive retry recovers") {
  const Grid g = make_grid(2, 1.0, 32);
  const VectorField f = smooth_rhs(g, 1.0);
  const double b = 0.6;

  const RadialTable shortt =
      make_radial_table({0.0, 1e-3}, {2.0 * b, 2.0 * b});
  double seen = 0.0;
  try {
    solve_homogenized(shortt, f);
    CHECK(false);
  } catch (const TableRangeError& e) {
    seen = e.grad_max;
  }
  CHECK(seen > 1e-3);

  int calls = 0;
  auto tab = [&](double tmax) {
    ++calls;
    return make_radial_table({0.0, tmax}, {2.0 * b, 2.0 * b});
  };
  RadialTable used;
  const HomogenizedResult hr =
      solve_homogenized_adaptive(tab, 1e-3, f, {}, &used);
  CHECK(calls == 2);
  CHECK(used.tmax() >= hr.grad_max);
  CHECK(hr.grad_max == doctest::Approx(seen).epsilon(1e-10));

  // A tabulator that never covers the data fails on the retry as well.
  auto broken = [&](double) {
    return make_radial_table({0.0, 1e-6}, {2.0 * b, 2.0 * b});
  };
  CHECK_THROWS_AS(solve_homogenized_adaptive(broken, 1e-3, f), TableRangeError);
  CHECK_THROWS_AS(solve_homogenized_adaptive(tab, 0.0, f), ConfigError);
}

TEST_CASE("corrector library: quantization, caching, freeze") {
  const Grid g = make_grid(2, 1.0, 32);
  OperatorSpec spec = sampled_spec(g, 3.0, {21, 0});
  CHECK_THROWS_AS(CorrectorLibrary(spec, 0.0), ConfigError);
  CHECK_THROWS_AS(CorrectorLibrary(spec, -1.0), ConfigError);

  CorrectorLibrary lib(spec, 0.25);
  Vec xi = Vec::zero(2);
  xi[0] = 0.3;
  xi[1] = -0.4;
  const Vec qv = lib.quantize(xi);
  CHECK(qv[0] == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(qv[1] == doctest::Approx(-0.5).epsilon(1e-15));

  const CorrectorBundle& b1 = lib.get(xi);
  CHECK(lib.size() == 1);
  CHECK(b1.xi[0] == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(b1.sigma_solved);
  Vec near = Vec::zero(2);
  near[0] = 0.26;
  near[1] = -0.45;
  const CorrectorBundle& b2 = lib.get(near);
  CHECK(lib.size() == 1);
  CHECK(&b1 == &b2);

  lib.freeze();
  Vec far = Vec::zero(2);
  far[0] = 0.8;
  CHECK_THROWS_AS(lib.get(far), ConfigError);
  CHECK_NOTHROW(lib.get(xi));

  // One dimension skips the flux corrector (no off-diagonal pairs).
  const Grid g1 = make_grid(1, 1.0, 64);
  OperatorSpec s1 = sampled_spec(g1, 2.0, {22, 0});
  CorrectorLibrary lib1(s1, 0.25);
  Vec e1 = Vec::zero(1);
  e1[0] = 1.0;
  CHECK_FALSE(lib1.get(e1).sigma_solved);
}

TEST_CASE("expansion on a constant medium is the identity") {
  const Grid g = make_grid(2, 1.0, 64);
  OperatorSpec spec{3.0, 0.8, constant_A(g, 0.8)};
  const PartitionOfUnity pou = build_partition(g, 0.125);
  CorrectorLibrary lib(spec, 0.1);
  const ScalarField ubar = smooth_scalar(g, 0.3);
  const TwoScaleField ts = two_scale_expand(ubar, pou, lib, 0.125);
  CHECK(ts.eps == 0.125);
  CHECK(ts.delta == 0.125);
  for (std::size_t x = 0; x < g.size(); ++x) CHECK(ts.u2s[x] == ubar[x]);
  const VectorField gu = gradient(ubar);
  CHECK(max_diff(ts.grad_u2s, gu) == 0.0);
  CHECK(static_cast<int>(ts.xi_raw.size()) == pou.center_count());
}

TEST_CASE("expansion of an affine profile reproduces the corrector") {
  const Grid g = make_grid(2, 1.0, 64);
  OperatorSpec spec = sampled_spec(g, 3.0, {31, 0});
  const PartitionOfUnity pou = build_partition(g, 0.125);
  // Slope chosen on the quantization lattice and exactly representable.
  Vec xi = Vec::zero(2);
  xi[0] = 0.375;
  xi[1] = -0.25;
  CorrectorLibrary lib(spec, 0.125);
  const ScalarField ubar = affine_field(g, xi);
  const VectorField G = constant_gradient(g, xi);
  const TwoScaleField ts = two_scale_expand(ubar, G, pou, lib, 0.125);

  CHECK(lib.size() == 1);
  CHECK(ts.quantization_error <= 1e-12);
  for (const Vec& raw : ts.xi_raw) {
    CHECK(std::abs(raw[0] - xi[0]) <= 1e-12);
    CHECK(std::abs(raw[1] - xi[1]) <= 1e-12);
  }

  const CorrectorBundle& b = lib.get(xi);
  double worst = 0.0;
  for (std::size_t x = 0; x < g.size(); ++x)
    worst = std::max(worst, std::abs(ts.u2s[x] - ubar[x] - b.phi[x]));
  CHECK(worst <= 1e-12);

  VectorField expect(g);
  for (int a = 0; a < g.d; ++a)
    for (std::size_t x = 0; x < g.size(); ++x)
      expect.comp(a)[x] = xi[a] + b.grad_phi.comp(a)[x];
  CHECK(max_diff(ts.grad_u2s, expect) <= 1e-10);

  CHECK_THROWS_AS(
      two_scale_expand(ubar, G, pou, lib, 0.0), ConfigError);
  const Grid g2 = make_grid(2, 1.0, 32);
  CHECK_THROWS_AS(
      two_scale_expand(smooth_scalar(g2, 1.0), pou, lib, 0.125), ConfigError);
}

TEST_CASE("assembled gradient is consistent with differencing the profile") {
  // The analytic product-rule gradient and the lattice gradient of the
  // composed profile differ at first order in h; halving h should roughly
  // halve the gap on the same physical configuration.
  double err[2];
  int i = 0;
  for (int N : {64, 128}) {
    const Grid g = make_grid(2, 1.0, N);
    OperatorSpec spec{2.0, 0.25, periodic_coefficient(g, 0.125, 0.25)};
    const PartitionOfUnity pou = build_partition(g, 0.125);
    CorrectorLibrary lib(spec, 0.1);
    const ScalarField ubar = smooth_scalar(g, 0.3);
    const TwoScaleField ts = two_scale_expand(ubar, pou, lib, 0.125);
    err[i++] = rms_diff(ts.grad_u2s, gradient(ts.u2s));
  }
  CHECK(err[0] > 0.0);
  CHECK(err[1] <= 0.7 * err[0]);
}

TEST_CASE("expansion error: zero on matched fields, lp = l2 at p = 2") {
  const Grid g = make_grid(2, 1.0, 32);
  const ScalarField u = smooth_scalar(g, 0.5);
  TwoScaleField ts;
  ts.grad_u2s = gradient(u);
  const ExpansionError ee = expansion_error(u, ts, 2.0);
  CHECK(ee.l2 == 0.0);
  CHECK(ee.lp == 0.0);

  const ScalarField v = smooth_scalar(g, 0.25);
  const ExpansionError ed = expansion_error(v, ts, 2.0);
  CHECK(ed.l2 > 0.0);
  CHECK(ed.lp == doctest::Approx(ed.l2).epsilon(1e-13));
  const ExpansionError e3 = expansion_error(v, ts, 3.0);
  CHECK(e3.lp >= 0.0);
  CHECK_THROWS_AS(expansion_error(v, ts, 1.5), ConfigError);
  CHECK_THROWS_AS(
      expansion_error(smooth_scalar(make_grid(2, 1.0, 16), 1.0), ts, 2.0),
      ConfigError);
}

TEST_CASE("remainder vanishes for affine data on a constant medium") {
  const Grid g = make_grid(2, 1.0, 64);
  const double b = 0.6;
  OperatorSpec spec{3.0, 0.6, constant_A(g, b)};
  const PartitionOfUnity pou = build_partition(g, 0.125);
  Vec xi = Vec::zero(2);
  xi[0] = 0.375;
  xi[1] = -0.25;
  CorrectorLibrary lib(spec, 0.125);
  const TwoScaleField ts = two_scale_expand(
      affine_field(g, xi), constant_gradient(g, xi), pou, lib, 0.125);

  std::vector<double> t(5), rho(5);
  for (int i = 0; i < 5; ++i) {
    t[i] = 2.0 * i / 4.0;
    rho[i] = b * (1.0 + t[i]);
  }
  const RemainderReport rem =
      remainder_assembly(ts, pou, lib, make_radial_table(t, rho), spec);
  for (double term : rem.term_l2) CHECK(term <= 1e-12);
  CHECK(rem.norm_l2 <= 1e-12);
}

TEST_CASE("remainder vanishes for affine data on a heterogeneous medium") {
  // All five terms telescope when the local slopes coincide: equal-argument
  // fluxes for the mismatch terms, partition identities for the rest.
  const Grid g = make_grid(2, 1.0, 64);
  OperatorSpec spec = sampled_spec(g, 3.0, {41, 0});
  const PartitionOfUnity pou = build_partition(g, 0.125);
  Vec xi = Vec::zero(2);
  xi[0] = 0.375;
  xi[1] = -0.25;
  CorrectorLibrary lib(spec, 0.125);
  const TwoScaleField ts = two_scale_expand(
      affine_field(g, xi), constant_gradient(g, xi), pou, lib, 0.125);

  const RadialTable model =
      make_radial_table({0.0, 1.0, 2.0},
                        {0.625, 0.625 * 2.0, 0.625 * 3.0});
  const RemainderReport rem = remainder_assembly(ts, pou, lib, model, spec);
  for (double term : rem.term_l2) CHECK(term <= 1e-9);
  CHECK(rem.norm_l2 <= 1e-9);

  const Grid g2 = make_grid(2, 1.0, 32);
  OperatorSpec other = sampled_spec(g2, 3.0, {41, 1});
  CHECK_THROWS_AS(remainder_assembly(ts, pou, lib, model, other), ConfigError);
}

TEST_CASE("sampled medium: tabulated map, expansion and energy estimate") {
  const Grid g = make_grid(2, 1.0, 64);
  const double p = 3.0, lambda = 0.25;
  OperatorSpec spec = sampled_spec(g, p, {51, 0}, lambda);
  const VectorField f = smooth_rhs(g, 0.5);
  const ScalarField ue = solve_heterogeneous(spec, f);

  // Homogenized map tabulated from this sample's own correctors.
  const double tmax = 2.0;
  std::vector<double> t(6), rho(6);
  for (int i = 0; i < 6; ++i) {
    t[i] = tmax * (i + 1) / 6.0;
    Vec te = Vec::zero(2);
    te[0] = t[i];
    rho[i] = solve_corrector(spec, te).abar_sample[0] / t[i];
  }
  const RadialTable table = make_radial_table(t, rho);
  const HomogenizedResult hr = solve_homogenized(table, f);
  CHECK(hr.stats.rel_residual <= 1e-10);
  CHECK(hr.grad_max <= table.tmax());

  const PartitionOfUnity pou = build_partition(g, 0.125);
  CorrectorLibrary lib(spec, std::max(0.05 * hr.grad_max, 1e-12));
  const TwoScaleField ts = two_scale_expand(hr.u, pou, lib, 0.125);
  const ExpansionError ee = expansion_error(ue, ts, p);
  CHECK(ee.l2 > 0.0);
  CHECK(ee.lp >= ee.l2 * 0.5);

  const RemainderReport rem = remainder_assembly(ts, pou, lib, table, spec);
  CHECK(rem.norm_l2 > 0.0);
  for (double term : rem.term_l2) CHECK(std::isfinite(term));

  const EnergyCheck ec = energy_estimate_check(spec, ue, ts, rem);
  CHECK(ec.ok);
  CHECK(ec.ratio <= ec.cap);
  CHECK(ec.cap == doctest::Approx(std::pow(2.0, p) * 16.0 / (lambda * lambda)));
  CHECK(std::isfinite(ec.pairing));
  CHECK(ec.lhs > 0.0);

  const EnergyCheck tight = energy_estimate_check(spec, ue, ts, rem, 1e-12);
  CHECK_FALSE(tight.ok);
}

TEST_CASE("periodic coefficient and smooth datum fields") {
  const Grid g = make_grid(2, 1.0, 64);
  const MatrixField A = periodic_coefficient(g, 0.125, 0.25);
  double lo = 2.0, hi = 0.0;
  for (std::size_t x = 0; x < g.size(); ++x) {
    CHECK(A.comp(0, 0)[x] == A.comp(1, 1)[x]);
    CHECK(A.comp(0, 1)[x] == 0.0);
    lo = std::min(lo, A.comp(0, 0)[x]);
    hi = std::max(hi, A.comp(0, 0)[x]);
  }
  CHECK(lo >= 0.25 - 1e-12);
  CHECK(hi <= 1.0 + 1e-12);
  CHECK(lo < 0.3);
  CHECK(hi > 0.95);
  CHECK_THROWS_AS(periodic_coefficient(g, 0.3, 0.25), ConfigError);
  CHECK_THROWS_AS(periodic_coefficient(g, 4.0 * g.h, 0.25), ConfigError);
  CHECK_THROWS_AS(periodic_coefficient(g, 0.125, 0.0), ConfigError);

  const VectorField f = smooth_rhs(g, 2.0);
  const auto dims = g.dims();
  const int j0 = 16, j1 = 8;
  const std::size_t idx = static_cast<std::size_t>(j0) * dims[1] + j1;
  const double om = 2.0 * M_PI;
  CHECK(f.comp(0)[idx] ==
        doctest::Approx(2.0 * std::sin(om * g.coord(j0)) *
                        std::cos(om * g.coord(j1))));
  CHECK(f.comp(1)[idx] == doctest::Approx(std::sin(om * g.coord(j1))));
  const Grid g3 = make_grid(3, 1.0, 16);
  const VectorField f3 = smooth_rhs(g3, 1.0);
  for (double v : f3.comp(2)) CHECK(v == 0.0);
  CHECK_THROWS_AS(smooth_rhs(g, std::nan("")), ConfigError);
}

TEST_CASE("rate study on a 1-d periodic medium approaches first order") {
  RateStudySpec rs;
  rs.grid = make_grid(1, 1.0, 512);
  rs.p = 2.0;
  rs.lambda = 0.25;
  rs.periodic = true;
  rs.eps_list = {0.25, 0.125, 0.0625, 0.03125};
  rs.seed = 3;
  const RateReport rep = two_scale_rate_study(rs);

  CHECK(rep.points.size() == 4);
  CHECK(rep.eps_levels.size() == 4);
  CHECK(rep.control_err <= 1e-6);
  CHECK(rep.mean_err.back() < rep.mean_err.front());
  CHECK(rep.slope >= 0.8);
  CHECK(rep.points.front().slope_partial == 0.0);
  CHECK(rep.points.back().slope_partial ==
        doctest::Approx(rep.slope).epsilon(1e-12));
  for (const RatePoint& pt : rep.points) {
    CHECK(pt.err_l2 > 0.0);
    CHECK(pt.err_lp > 0.0);
    CHECK(pt.remainder_l2 > 0.0);
    CHECK(pt.energy_ratio > 0.0);
    CHECK(pt.delta == doctest::Approx(pt.eps * rs.grid.L));
  }

  // The remainder norm itself is first order in eps for periodic media.
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (const RatePoint& pt : rep.points) {
    const double x = std::log(pt.eps), y = std::log(pt.remainder_l2);
    sx += x; sy += y; sxx += x * x; sxy += x * y;
  }
  const double n = static_cast<double>(rep.points.size());
  const double rem_slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  CHECK(rem_slope >= 0.8);
}

TEST_CASE("rate study on random 2-d media reports a decaying error") {
  RateStudySpec rs;
  rs.grid = make_grid(2, 1.0, 128);
  rs.p = 2.0;
  rs.lambda = 0.25;
  rs.periodic = false;
  rs.recipe.covariance.kind = "gaussian";
  rs.eps_list = {0.125, 0.0625};
  rs.samples_per_eps = 1;
  rs.seed = 9;
  rs.opts.tol = 1e-8;
  const RateReport rep = two_scale_rate_study(rs);

  CHECK(rep.points.size() == 2);
  CHECK(rep.control_err <= 1e-5);
  CHECK(rep.mean_err[1] < rep.mean_err[0]);
  CHECK(rep.slope > 0.4);
  for (const RatePoint& pt : rep.points) CHECK(pt.quant_err >= 0.0);
}

TEST_CASE("rate study rejects inconsistent resolutions") {
  RateStudySpec rs;
  rs.grid = make_grid(2, 1.0, 64);
  rs.eps_list = {0.3};
  CHECK_THROWS_AS(two_scale_rate_study(rs), ConfigError);
  rs.eps_list = {0.5};
  CHECK_THROWS_AS(two_scale_rate_study(rs), ConfigError);
  rs.eps_list = {0.0625};  // ell_c = 4 h at N = 64
  CHECK_THROWS_AS(two_scale_rate_study(rs), ConfigError);
  rs.eps_list = {};
  CHECK_THROWS_AS(two_scale_rate_study(rs), ConfigError);
  rs.eps_list = {0.25};
  rs.samples_per_eps = 0;
  CHECK_THROWS_AS(two_scale_rate_study(rs), ConfigError);
}

}  // TEST_SUITE
