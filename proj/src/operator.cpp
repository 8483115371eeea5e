#include "monohom/operator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "monohom/errors.hpp"

namespace monohom {

std::array<double, 2> sym_eig_range(const Mat& S) {
  const int d = S.d;
  if (d == 1) return {S(0, 0), S(0, 0)};
  if (d == 2) {
    const double mu = 0.5 * (S(0, 0) + S(1, 1));
    const double r = std::hypot(0.5 * (S(0, 0) - S(1, 1)), S(0, 1));
    return {mu - r, mu + r};
  }
  // Trigonometric closed form for symmetric 3x3.
  const double p1 = S(0, 1) * S(0, 1) + S(0, 2) * S(0, 2) + S(1, 2) * S(1, 2);
  if (p1 == 0.0) {
    const double lo = std::min({S(0, 0), S(1, 1), S(2, 2)});
    const double hi = std::max({S(0, 0), S(1, 1), S(2, 2)});
    return {lo, hi};
  }
  const double q = (S(0, 0) + S(1, 1) + S(2, 2)) / 3.0;
  const double p2 = (S(0, 0) - q) * (S(0, 0) - q) +
                    (S(1, 1) - q) * (S(1, 1) - q) +
                    (S(2, 2) - q) * (S(2, 2) - q) + 2.0 * p1;
  const double p = std::sqrt(p2 / 6.0);
  Mat B = S;
  for (int i = 0; i < 3; ++i) B(i, i) -= q;
  for (int i = 0; i < 9; ++i) B.m[i] /= p;
  const double detB =
      B(0, 0) * (B(1, 1) * B(2, 2) - B(1, 2) * B(2, 1)) -
      B(0, 1) * (B(1, 0) * B(2, 2) - B(1, 2) * B(2, 0)) +
      B(0, 2) * (B(1, 0) * B(2, 1) - B(1, 1) * B(2, 0));
  const double r = std::clamp(0.5 * detB, -1.0, 1.0);
  const double phi = std::acos(r) / 3.0;
  const double hi = q + 2.0 * p * std::cos(phi);
  const double lo = q + 2.0 * p * std::cos(phi + 2.0 * M_PI / 3.0);
  return {lo, hi};
}

Mat eval_Da(const Mat& A, double p, const Vec& xi) {
  const int d = A.d;
  const double t = xi.norm();
  const double f = 1.0 + std::pow(t, p - 2.0);
  Mat M = Mat::scaled_identity(d, f);
  if (t > 0.0 && p > 2.0) {
    const double c = (p - 2.0) * std::pow(t, p - 2.0);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) M(i, j) += c * (xi[i] / t) * (xi[j] / t);
  }
  Mat out = Mat::zero(d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) {
      double s = 0.0;
      for (int k = 0; k < d; ++k) s += A(i, k) * M(k, j);
      out(i, j) = s;
    }
  return out;
}

bool is_scalar_field(const MatrixField& A, double tol) {
  const int d = A.grid().d;
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) {
      if (i == j) continue;
      for (std::size_t x = 0; x < A.size(); ++x)
        if (std::abs(A.comp(i, j)[x]) > tol) return false;
    }
  for (int i = 1; i < d; ++i)
    for (std::size_t x = 0; x < A.size(); ++x)
      if (std::abs(A.comp(i, i)[x] - A.comp(0, 0)[x]) > tol) return false;
  return true;
}

namespace {

inline Vec gather(const VectorField& G, const Vec& offset, std::size_t x) {
  Vec g = offset;
  for (int i = 0; i < g.d; ++i) g.v[i] += G.comp(i)[x];
  return g;
}

inline Mat gather_mat(const MatrixField& A, std::size_t x) {
  Mat a = Mat::zero(A.grid().d);
  for (int i = 0; i < a.d; ++i)
    for (int j = 0; j < a.d; ++j) a(i, j) = A.comp(i, j)[x];
  return a;
}

}  // namespace

void eval_flux(const MatrixField& A, double p, const Vec& offset,
               const VectorField& G, VectorField& flux) {
  const Grid& g = A.grid();
  if (!flux.grid().same_as(g)) flux = VectorField(g);
  const int d = g.d;
  for (std::size_t x = 0; x < g.size(); ++x) {
    const Vec xi = gather(G, offset, x);
    const double t = xi.norm();
    const double f = 1.0 + std::pow(t, p - 2.0);
    for (int i = 0; i < d; ++i) {
      double s = 0.0;
      for (int j = 0; j < d; ++j) s += A.comp(i, j)[x] * xi.v[j];
      flux.comp(i)[x] = f * s;
    }
  }
}

void eval_tangent_field(const MatrixField& A, double p, const Vec& offset,
                        const VectorField& G, MatrixField& K) {
  const Grid& g = A.grid();
  if (!K.grid().same_as(g)) K = MatrixField(g);
  const int d = g.d;
  for (std::size_t x = 0; x < g.size(); ++x) {
    const Vec xi = gather(G, offset, x);
    const Mat Da = eval_Da(gather_mat(A, x), p, xi);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) K.comp(i, j)[x] = Da(i, j);
  }
}

double energy_mean(const MatrixField& A, double p, const Vec& offset,
                   const VectorField& G) {
  if (!is_scalar_field(A))
    throw ConfigError(
        "energy_mean: coefficient is not scalar, no potential is available");
  double s = 0.0;
  for (std::size_t x = 0; x < A.size(); ++x) {
    const Vec xi = gather(G, offset, x);
    s += eval_W(A.comp(0, 0)[x], p, xi);
  }
  return s / static_cast<double>(A.size());
}

namespace {

double halton(std::size_t i, int base) {
  double f = 1.0, r = 0.0;
  for (std::size_t n = i + 1; n > 0; n /= base) {
    f /= base;
    r += f * static_cast<double>(n % base);
  }
  return r;
}

Vec ball_point(int d, double radius, double u0, double u1, double u2) {
  Vec x = Vec::zero(d);
  if (d == 1) {
    x[0] = radius * (2.0 * u0 - 1.0);
  } else if (d == 2) {
    const double r = radius * std::sqrt(u0);
    x[0] = r * std::cos(2.0 * M_PI * u1);
    x[1] = r * std::sin(2.0 * M_PI * u1);
  } else {
    const double r = radius * std::cbrt(u0);
    const double z = 2.0 * u1 - 1.0;
    const double s = std::sqrt(std::max(0.0, 1.0 - z * z));
    x[0] = r * s * std::cos(2.0 * M_PI * u2);
    x[1] = r * s * std::sin(2.0 * M_PI * u2);
    x[2] = r * z;
  }
  return x;
}

std::vector<std::array<Vec, 2>> make_pairs(int d, double radius, int n_pairs) {
  std::vector<std::array<Vec, 2>> pairs;
  pairs.reserve(n_pairs + 16);
  for (int i = 0; i < n_pairs; ++i) {
    const Vec x1 = ball_point(d, radius, halton(i, 2), halton(i, 3),
                              halton(i, 5));
    const Vec x2 = ball_point(d, radius, halton(i, 7), halton(i, 11),
                              halton(i, 13));
    pairs.push_back({x1, x2});
  }
  // Forced degenerate geometries: near zero, antipodal through zero, and
  // nearly collinear pairs at several magnitudes.
  const Vec e0 = Vec::basis(d, 0);
  pairs.push_back({Vec::zero(d), 1e-8 * e0});
  pairs.push_back({(-1e-9) * e0, 1e-9 * e0});
  for (double t : {1.0, 0.5 * radius, radius}) {
    Vec x = t * e0;
    Vec perp = Vec::zero(d);
    if (d > 1) perp[1] = 1e-9 * t;
    pairs.push_back({x, (1.0 + 1e-7) * x + perp});
    pairs.push_back({x, (-1.0) * x});
    pairs.push_back({x, (1.0 - 1e-7) * x});
  }
  return pairs;
}

ClassMReport check_core(
    const std::vector<std::function<Vec(const Vec&)>>& maps, int d, double p,
    double alpha, double beta, int sample_count, double radius) {
  if (sample_count < 1000)
    throw ConfigError("check_class_M: sample_count must be at least 1000");
  const auto pairs = make_pairs(d, radius, sample_count);
  ClassMReport rep;
  rep.p = p;
  rep.alpha = alpha;
  rep.beta = beta;
  rep.C_mono = std::numeric_limits<double>::infinity();
  for (const auto& map : maps) {
    for (const auto& pr : pairs) {
      const Vec& x1 = pr[0];
      const Vec& x2 = pr[1];
      const Vec dx = x1 - x2;
      const double sep = dx.norm();
      if (sep == 0.0) continue;
      const Vec da = map(x1) - map(x2);
      const double base = 1.0 + x1.norm() + x2.norm();
      const double upper =
          da.norm() / (std::pow(base, p - 1.0 - alpha) * std::pow(sep, alpha));
      if (upper > rep.C_upper) {
        rep.C_upper = upper;
        rep.witness_upper = {x1, x2};
      }
      const double mono = dot(da, dx) /
                          (std::pow(base, p - beta) * std::pow(sep, beta));
      if (mono < rep.C_mono) {
        rep.C_mono = mono;
        rep.witness_mono = {x1, x2};
      }
      ++rep.pairs;
    }
  }
  rep.pass = rep.pairs > 0 && rep.C_mono > 1e-10 && std::isfinite(rep.C_upper);
  return rep;
}

}  // namespace

ClassMReport check_class_M(const std::function<Vec(const Vec&)>& map, int d,
                           double p, double alpha, double beta,
                           int sample_count, double radius) {
  return check_core({map}, d, p, alpha, beta, sample_count, radius);
}

ClassMReport check_class_M(const Mat& A, double p, double alpha, double beta,
                           int sample_count, double radius) {
  auto map = [&A, p](const Vec& xi) { return eval_a(A, p, xi); };
  return check_core({map}, A.d, p, alpha, beta, sample_count, radius);
}

ClassMReport check_class_M(const MatrixField& A, double p, double alpha,
                           double beta, int sample_count, double radius) {
  // A deterministic strided subset of lattice points stands in for x.
  const std::size_t max_points = 32;
  const std::size_t stride = std::max<std::size_t>(1, A.size() / max_points);
  std::vector<std::function<Vec(const Vec&)>> maps;
  for (std::size_t x = 0; x < A.size(); x += stride) {
    const Mat Ax = gather_mat(A, x);
    maps.push_back([Ax, p](const Vec& xi) { return eval_a(Ax, p, xi); });
  }
  return check_core(maps, A.grid().d, p, alpha, beta, sample_count, radius);
}

}  // namespace monohom
