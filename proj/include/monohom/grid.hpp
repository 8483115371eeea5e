#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <vector>

namespace monohom {

/// Periodic lattice on the torus [-L/2, L/2)^d with N nodes per axis.
///
/// Node j = (j_0, ..., j_{d-1}) sits at x_i = -L/2 + j_i * h with h = L/N.
/// N must be even so that the origin and half-period shifts are nodes and
/// dyadic radii land on the lattice.  Storage is row-major with axis 0
/// slowest; for d < 3 the trailing axes have extent 1.
struct Grid {
  int d = 0;
  int N = 0;
  double L = 0.0;
  double h = 0.0;

  std::size_t size() const {
    std::size_t n = 1;
    for (int i = 0; i < d; ++i) n *= static_cast<std::size_t>(N);
    return n;
  }
  std::array<int, 3> dims() const {
    return {N, d > 1 ? N : 1, d > 2 ? N : 1};
  }
  /// Physical coordinate of index j along any axis.
  double coord(int j) const { return -0.5 * L + h * j; }
  /// Reduce a coordinate difference to the minimal image in [-L/2, L/2).
  double min_image(double dx) const {
    dx = std::remainder(dx, L);
    if (dx < -0.5 * L) dx += L;
    if (dx >= 0.5 * L) dx -= L;
    return dx;
  }
  bool same_as(const Grid& o) const {
    return d == o.d && N == o.N && L == o.L;
  }
};

/// Validates d in {1,2,3}, N even and >= 4, L > 0; throws ConfigError.
Grid make_grid(int d, double L, int N);

/// Scalar lattice field.  Values are plain doubles at nodes; all integral
/// quantities are reported as lattice means (the discrete counterpart of
/// the normalized integral over the torus).
class ScalarField {
 public:
  ScalarField() = default;
  explicit ScalarField(const Grid& g) : grid_(g), v_(g.size(), 0.0) {}

  const Grid& grid() const { return grid_; }
  std::size_t size() const { return v_.size(); }
  double& operator[](std::size_t i) { return v_[i]; }
  double operator[](std::size_t i) const { return v_[i]; }
  double* data() { return v_.data(); }
  const double* data() const { return v_.data(); }
  std::vector<double>& values() { return v_; }
  const std::vector<double>& values() const { return v_; }

 private:
  Grid grid_;
  std::vector<double> v_;
};

/// Vector lattice field stored as d planar component arrays.  Component i
/// of a gradient lives on the forward edge (x, x + h e_i) but is indexed by
/// its source node x, so all components of a vector quantity at node x are
/// collocated for pointwise (nonlinear) evaluation.
class VectorField {
 public:
  VectorField() = default;
  explicit VectorField(const Grid& g) : grid_(g) {
    for (int i = 0; i < g.d; ++i) c_[i].assign(g.size(), 0.0);
  }

  const Grid& grid() const { return grid_; }
  std::size_t size() const { return grid_.size(); }
  std::vector<double>& comp(int i) { return c_[i]; }
  const std::vector<double>& comp(int i) const { return c_[i]; }

 private:
  Grid grid_;
  std::array<std::vector<double>, 3> c_;
};

/// d x d matrix lattice field stored as d^2 planar component arrays,
/// comp(i, j) in row-major order.
class MatrixField {
 public:
  MatrixField() = default;
  explicit MatrixField(const Grid& g) : grid_(g), c_(g.d * g.d) {
    for (auto& c : c_) c.assign(g.size(), 0.0);
  }

  const Grid& grid() const { return grid_; }
  std::size_t size() const { return grid_.size(); }
  std::vector<double>& comp(int i, int j) { return c_[i * grid_.d + j]; }
  const std::vector<double>& comp(int i, int j) const {
    return c_[i * grid_.d + j];
  }

 private:
  Grid grid_;
  std::vector<std::vector<double>> c_;
};

/// Forward-difference gradient: component i at node x is
/// (u(x + h e_i) - u(x)) / h with periodic wrap.
VectorField gradient(const ScalarField& u);

/// Backward-difference divergence, the exact negative adjoint of gradient
/// under the plain lattice inner product:
///   sum_x grad(u)(x) . F(x) = - sum_x u(x) div(F)(x)   (exactly).
ScalarField divergence(const VectorField& F);

/// Row-wise divergence of a matrix field: out_i = sum_j D_j^- S_ij, using
/// the same backward differences as divergence().
VectorField matrix_divergence(const MatrixField& S);

/// Mean of f over lattice points within periodic Euclidean distance r of
/// `center` (length-d physical coordinates).  The cutoff is sharp; points
/// at distance exactly r are included (tolerance 1e-9 h^2 on the squared
/// distance).  If no point qualifies the nearest lattice point is used.
/// Requires 0 <= r <= L/2; throws ConfigError otherwise.
double ball_average(const ScalarField& f, const std::array<double, 3>& center,
                    double r);

/// Lattice mean, plain dot product, and mean-square helpers.
double mean(const ScalarField& f);
double dot(const ScalarField& a, const ScalarField& b);
double dot(const VectorField& a, const VectorField& b);
/// sqrt of the lattice mean of f^2 (discrete L^2 norm of the torus).
double rms(const ScalarField& f);
/// sqrt of the lattice mean of |F|^2.
double rms(const VectorField& F);
/// Subtract the lattice mean in place.
void remove_mean(ScalarField& f);

}  // namespace monohom
