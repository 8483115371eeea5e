#pragma once

#include <array>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "monohom/fft.hpp"
#include "monohom/grid.hpp"
#include "monohom/operator.hpp"
#include "monohom/rng.hpp"

namespace monohom {

/// Whole-space covariance model for the Gaussian layer.  Kinds:
///   "gaussian"    c(x) = exp(-|x|^2 / (2 ell_c^2))   (default)
///   "exponential" c(x) = exp(-|x| / ell_c)
///   "zero"        c = 0 (degenerate, for tests)
/// All kinds have c(0) <= 1 and are integrable.
struct CovarianceSpec {
  std::string kind = "gaussian";
  double ell_c = 1.0;
};

/// c(x) as a function of |x|^2.
double covariance_value(const CovarianceSpec& cov, double r2);

/// Torus periodization c_L(x) = sum_k c(x + L k) sampled at lattice lags.
/// The lattice sum runs over shells |k|_inf = 0, 1, ... and stops once a
/// whole shell contributes less than 1e-14 c(0) pointwise; shells beyond 5
/// periods raise ConfigError (covariance effectively not integrable here).
/// Requires L >= 4 ell_c.
ScalarField periodized_covariance(const CovarianceSpec& cov, const Grid& g);

/// Result of spectral Gaussian sampling: the field plus the fraction of
/// (truncation-induced) negative spectral mass that was clipped to zero.
struct GaussianSample {
  ScalarField field;
  double clipped_mass = 0.0;
  bool warned = false;  // clipped_mass > 1e-8
};

/// Stationary centered Gaussian field with covariance c_L via circulant
/// spectral synthesis: G = IFFT( sqrt(lambda_k) FFT(W) ) where lambda_k are
/// the DFT coefficients of c_L (negatives clipped) and W is unit white
/// noise drawn per site from the counter-based RNG.  Sites are keyed by
/// origin-centered lattice index, so grids with equal spacing share their
/// noise on the physically common window (the coupling used by
/// coupled_pair).  Bitwise deterministic in (seed, grid).
/// Requires c_L even under x -> -x on the torus.
GaussianSample sample_gaussian(const ScalarField& c_L, rng::Key seed);
GaussianSample sample_gaussian(const ScalarField& c_L, rng::Key seed,
                               Spectral& ws);

/// Two Gaussian fields on tori L2 > L1 (same d and spacing) driven by the
/// same white-noise stream.  The sup discrepancy over a fixed observation
/// window shrinks as both tori grow; used for the qualitative periodization
/// convergence check.  Rejects mismatched spacings.
std::pair<GaussianSample, GaussianSample> coupled_pair(
    const CovarianceSpec& cov, const Grid& g1, const Grid& g2, rng::Key seed);

/// Coefficient recipe A = chi * B(G):
///   B     pointwise map from the Gaussian value to a d x d matrix whose
///         symmetric part has eigenvalues in [lambda, 1] and whose operator
///         norm is at most 1,
///   chi   nonnegative normalized polynomial bump (1 - (|x|/rho)^2)^2 with
///         rho = kernel_radius_cells * h.
/// B presets: "tanh" (scalar (1+lambda)/2 + (1-lambda)/2 tanh t), "const"
/// (scalar midpoint, A constant), "diag" (anisotropic diagonal), "tanh-skew"
/// (scalar part plus a skew rotation block, nonsymmetric), "table"
/// (piecewise-linear scalar profile from `table`, clamped outside).
struct CoefficientRecipe {
  double lambda = 0.25;
  CovarianceSpec covariance;
  int kernel_radius_cells = 2;
  std::string B = "tanh";
  bool isotropic = true;
  std::vector<std::array<double, 2>> table;
};

/// The pointwise matrix map of the recipe.
Mat recipe_B(const CoefficientRecipe& r, int d, double t);

/// Normalized convolution kernel chi on the lattice (sums to 1 exactly).
ScalarField make_kernel(const Grid& g, int radius_cells);

/// A(x) = (chi * B(G))(x), convolved componentwise by FFT.  Every returned
/// matrix is checked to have its symmetric part's eigenvalues in
/// [lambda - 1e-10, 1 + 1e-10]; violation raises InvariantError.
MatrixField make_coefficient(const ScalarField& G, const CoefficientRecipe& r);

/// Repeated-sampling helper caching the periodized covariance, its spectral
/// square root and the FFT workspace.  One instance per thread.
class CoefficientSampler {
 public:
  CoefficientSampler(const Grid& g, const CoefficientRecipe& r);
  const Grid& grid() const { return g_; }
  const CoefficientRecipe& recipe() const { return r_; }
  const ScalarField& covariance() const { return c_L_; }
  double clipped_mass() const { return clipped_mass_; }

  GaussianSample sample_gaussian_layer(rng::Key seed);
  MatrixField sample(rng::Key seed);

 private:
  Grid g_;
  CoefficientRecipe r_;
  std::unique_ptr<Spectral> ws_;
  ScalarField c_L_;
  ScalarField chi_;
  std::vector<double> factor_;
  double clipped_mass_ = 0.0;
};

}  // namespace monohom
