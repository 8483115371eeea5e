#pragma once

#include <array>
#include <cmath>
#include <functional>

#include "monohom/grid.hpp"

namespace monohom {

/// Small dense vector with runtime dimension d <= 3.
struct Vec {
  int d = 0;
  std::array<double, 3> v{0.0, 0.0, 0.0};

  static Vec zero(int d) { return Vec{d, {0.0, 0.0, 0.0}}; }
  static Vec basis(int d, int i) {
    Vec e = zero(d);
    e.v[i] = 1.0;
    return e;
  }
  double& operator[](int i) { return v[i]; }
  double operator[](int i) const { return v[i]; }
  double norm2() const {
    double s = 0.0;
    for (int i = 0; i < d; ++i) s += v[i] * v[i];
    return s;
  }
  double norm() const { return std::sqrt(norm2()); }
};

inline Vec operator+(Vec a, const Vec& b) {
  for (int i = 0; i < a.d; ++i) a.v[i] += b.v[i];
  return a;
}
inline Vec operator-(Vec a, const Vec& b) {
  for (int i = 0; i < a.d; ++i) a.v[i] -= b.v[i];
  return a;
}
inline Vec operator*(double s, Vec a) {
  for (int i = 0; i < a.d; ++i) a.v[i] *= s;
  return a;
}
inline double dot(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (int i = 0; i < a.d; ++i) s += a.v[i] * b.v[i];
  return s;
}

/// Small dense matrix with runtime dimension d <= 3, row-major entries with
/// stride d.
struct Mat {
  int d = 0;
  std::array<double, 9> m{};

  static Mat zero(int d) { return Mat{d, {}}; }
  static Mat identity(int d) {
    Mat a = zero(d);
    for (int i = 0; i < d; ++i) a(i, i) = 1.0;
    return a;
  }
  static Mat scaled_identity(int d, double s) {
    Mat a = zero(d);
    for (int i = 0; i < d; ++i) a(i, i) = s;
    return a;
  }
  double& operator()(int i, int j) { return m[i * d + j]; }
  double operator()(int i, int j) const { return m[i * d + j]; }
  Mat transpose() const {
    Mat t = zero(d);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) t(i, j) = (*this)(j, i);
    return t;
  }
  Mat sym() const {
    Mat s = zero(d);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) s(i, j) = 0.5 * ((*this)(i, j) + (*this)(j, i));
    return s;
  }
  double frobenius() const {
    double s = 0.0;
    for (int i = 0; i < d * d; ++i) s += m[i] * m[i];
    return std::sqrt(s);
  }
};

inline Vec operator*(const Mat& A, const Vec& x) {
  Vec y = Vec::zero(A.d);
  for (int i = 0; i < A.d; ++i)
    for (int j = 0; j < A.d; ++j) y.v[i] += A(i, j) * x.v[j];
  return y;
}
inline Mat operator+(Mat a, const Mat& b) {
  for (int i = 0; i < a.d * a.d; ++i) a.m[i] += b.m[i];
  return a;
}
inline Mat operator-(Mat a, const Mat& b) {
  for (int i = 0; i < a.d * a.d; ++i) a.m[i] -= b.m[i];
  return a;
}
inline Mat operator*(double s, Mat a) {
  for (int i = 0; i < a.d * a.d; ++i) a.m[i] *= s;
  return a;
}

/// Smallest and largest eigenvalue of a symmetric matrix, closed form for
/// d <= 3 (trigonometric method in 3-D).
std::array<double, 2> sym_eig_range(const Mat& S);

/// The monotone map a(A, xi) = A (1 + |xi|^{p-2}) xi with p >= 2.
inline Vec eval_a(const Mat& A, double p, const Vec& xi) {
  const double t = xi.norm();
  const double f = 1.0 + std::pow(t, p - 2.0);
  return A * (f * xi);
}

/// Exact Jacobian D_xi a = A [ (1 + |xi|^{p-2}) Id
///                            + (p-2) |xi|^{p-2} xihat (x) xihat ].
/// At xi = 0 the rank-one term vanishes for p > 2 and carries the factor
/// (p-2) = 0 for p = 2, so the limit A Id is returned.
Mat eval_Da(const Mat& A, double p, const Vec& xi);

/// Convex potential for scalar coefficients b Id:
/// W = b (|xi|^2/2 + |xi|^p/p), with grad_xi W = b (1+|xi|^{p-2}) xi.
inline double eval_W(double b, double p, const Vec& xi) {
  const double t = xi.norm();
  return b * (0.5 * t * t + std::pow(t, p) / p);
}

/// True when every matrix of the field is a scalar multiple of the identity
/// (within tol on the off-diagonal / diagonal spread).
bool is_scalar_field(const MatrixField& A, double tol = 1e-12);

/// A concrete monotone operator on a grid: growth exponent, the ellipticity
/// lower bound the coefficients were built with (carried for reporting), and
/// the sampled coefficient field itself.
struct OperatorSpec {
  double p = 2.0;
  double lambda = 0.25;
  MatrixField A;
};

/// Field-level flux evaluation: flux(x) = a(A(x), p, offset + G(x)).
void eval_flux(const MatrixField& A, double p, const Vec& offset,
               const VectorField& G, VectorField& flux);

/// Field-level tangent evaluation: K(x) = Da(A(x), p, offset + G(x)).
void eval_tangent_field(const MatrixField& A, double p, const Vec& offset,
                        const VectorField& G, MatrixField& K);

/// Lattice mean of W(b(x), p, offset + G(x)); requires a scalar coefficient
/// field (ConfigError otherwise): no potential exists for non-scalar A.
double energy_mean(const MatrixField& A, double p, const Vec& offset,
                   const VectorField& G);

/// Measured constants of the defining inequalities of the monotone class,
/// over sampled pairs (xi1, xi2):
///   C_upper = max |a(xi1)-a(xi2)| / ((1+|xi1|+|xi2|)^{p-1-alpha} |xi1-xi2|^alpha)
///   C_mono  = min (a(xi1)-a(xi2)).(xi1-xi2) / ((1+|xi1|+|xi2|)^{p-beta} |xi1-xi2|^beta)
/// `pass` requires C_mono above roundoff scale (1e-10; strict positivity is
/// meaningless when measured in floating point) and finite C_upper.  The
/// witnesses are the pairs achieving each extreme.  A sampled test estimates
/// constants, it cannot certify membership.
struct ClassMReport {
  double p = 0.0, alpha = 0.0, beta = 0.0;
  double C_upper = 0.0;
  double C_mono = 0.0;
  bool pass = false;
  int pairs = 0;
  std::array<Vec, 2> witness_upper{};
  std::array<Vec, 2> witness_mono{};
};

/// Probes deterministic low-discrepancy pairs in the ball of the given
/// radius, augmented with forced near-zero, antipodal and near-collinear
/// pairs where violations concentrate.  Coincident pairs are skipped.
/// Requires sample_count >= 1000.
ClassMReport check_class_M(const std::function<Vec(const Vec&)>& map, int d,
                           double p, double alpha, double beta,
                           int sample_count = 4096, double radius = 10.0);
/// Same measurement for xi -> A (1+|xi|^{p-2}) xi with a constant matrix.
ClassMReport check_class_M(const Mat& A, double p, double alpha, double beta,
                           int sample_count = 4096, double radius = 10.0);
/// Field version: the pointwise maps of a strided subset of lattice points.
ClassMReport check_class_M(const MatrixField& A, double p, double alpha,
                           double beta, int sample_count = 4096,
                           double radius = 10.0);

}  // namespace monohom
