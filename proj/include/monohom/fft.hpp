#pragma once

#include <complex>
#include <vector>

#include "monohom/grid.hpp"

struct fftw_plan_s;

namespace monohom {

/// Per-grid FFT workspace: cached FFTW r2c/c2r plans plus the symbol of the
/// discrete Laplacian.  Plans are created with FFTW_ESTIMATE (deterministic
/// plan choice) and executed single-threadedly, so results are bitwise
/// reproducible; concurrency is organized across workspaces, one per thread.
/// Not copyable; create one per thread when parallelizing over samples.
class Spectral {
 public:
  explicit Spectral(const Grid& g);
  ~Spectral();
  Spectral(const Spectral&) = delete;
  Spectral& operator=(const Spectral&) = delete;

  const Grid& grid() const { return g_; }
  /// Number of complex coefficients in the half-spectrum (r2c layout).
  std::size_t spectral_size() const { return spec_n_; }

  /// Unnormalized forward r2c transform.
  void forward(const double* in, std::complex<double>* out);
  /// Inverse c2r transform including the 1/N^d normalization.
  void inverse(const std::complex<double>* in, double* out);

  /// Symbol s_k >= 0 of -Laplacian_h (backward-div of forward-grad):
  /// s_k = sum_i (2 - 2 cos(2 pi k_i / N)) / h^2, s_0 = 0.
  const std::vector<double>& laplace_symbol() const { return symbol_; }

  /// Solve -Laplacian_h u = f on the torus with mean(u) = 0.  The k = 0
  /// mode of f is discarded; callers that must reject nonzero-mean input
  /// check it beforehand.
  void poisson(const ScalarField& f, ScalarField& u);

  /// u = (-m Laplacian_h)^{-1} f with the mean mode projected out; the
  /// constant-coefficient preconditioner of the Krylov solvers.
  void inverse_scaled_laplacian(double m, const ScalarField& f, ScalarField& u);

  /// Circular convolution out(x) = sum_y kernel(y) f(x - y) (plain lattice
  /// sum, so a kernel summing to 1 preserves constants exactly up to
  /// roundoff).
  void convolve(const ScalarField& f, const ScalarField& kernel,
                ScalarField& out);

  /// Pointwise multiply the half-spectrum of f by `factor` (real, indexed
  /// like the symbol) and transform back.  Used for spectral sampling.
  void apply_multiplier(const ScalarField& f, const std::vector<double>& factor,
                        ScalarField& out);

  /// Half-spectrum of f, unnormalized (for covariance eigenvalues).
  std::vector<std::complex<double>> spectrum(const ScalarField& f);

 private:
  Grid g_;
  std::size_t spec_n_ = 0;
  std::vector<double> symbol_;
  double* rbuf_ = nullptr;
  std::complex<double>* cbuf_ = nullptr;
  fftw_plan_s* fwd_ = nullptr;
  fftw_plan_s* bwd_ = nullptr;
};

}  // namespace monohom
