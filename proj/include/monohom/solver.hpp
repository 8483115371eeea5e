#pragma once

#include <utility>
#include <vector>

#include "monohom/fft.hpp"
#include "monohom/grid.hpp"
#include "monohom/operator.hpp"

namespace monohom {

/// Outcome bookkeeping for one solve.  The reported residual is always
/// recomputed by a fresh application of the discrete operator, never the
/// iterate's running estimate.
struct SolveStats {
  int iterations = 0;        // Krylov (linear) or Newton (nonlinear) count
  int krylov_total = 0;      // inner iterations summed over Newton steps
  double rel_residual = 0.0;
  std::vector<double> newton_steps;    // accepted damping factors
  std::vector<double> energy_history;  // filled when energy tracking is on
  double seconds = 0.0;
};

/// -Laplacian_h u = rhs on the torus, mean(u) = 0, by FFT symbol inversion.
/// Rejects rhs whose lattice mean exceeds 1e-12 relative to its rms
/// (incompatible datum on the torus).
ScalarField solve_poisson(const ScalarField& rhs);
ScalarField solve_poisson(Spectral& ws, const ScalarField& rhs);

/// out = -div(K grad u), the discrete divergence-form operator (K^T when
/// `transpose`); public so residual certificates can be recomputed anywhere.
ScalarField apply_divform(const MatrixField& K, bool transpose,
                          const ScalarField& u);

struct LinearOpts {
  double tol = 1e-10;   // relative residual target, l2 norm
  int max_iter = 10000;
  bool transpose = false;  // solve with K^T (adjoint problem)
};

/// -div(K grad u) = div g with zero-mean u.  Conjugate gradients when K is
/// pointwise symmetric, BiCGStab otherwise, both preconditioned by the
/// constant-coefficient operator (-m Laplacian_h)^{-1} with m = mean of
/// trace(K)/d, inverted by FFT.  Throws SolverError (carrying the stats) on
/// non-convergence; never returns a silent partial answer.
std::pair<ScalarField, SolveStats> solve_linear(const MatrixField& K,
                                                const VectorField& g,
                                                const LinearOpts& opts = {});
std::pair<ScalarField, SolveStats> solve_linear(Spectral& ws,
                                                const MatrixField& K,
                                                const VectorField& g,
                                                const LinearOpts& opts = {});

struct NonlinearOpts {
  double tol = 1e-10;  // relative nonlinear residual target
  int max_newton = 50;
  int max_krylov = 10000;
  bool pure_p_growth = false;  // diagnostic mode: drop the "+1" in the map
  bool track_energy = false;   // record the discrete energy per accepted step
};

/// Corrector-mode monotone problem -div a(x, xi + grad phi) = div F with
/// zero-mean phi (F optional; the plain corrector has F = 0).  Damped Newton
/// with the exact analytic Jacobian: at each iterate assemble
/// K = Da(x, xi + grad phi), solve the linear correction, backtrack by
/// halving on the l2 norm of the nonlinear residual (step floor 1e-4).
/// The relative residual is measured against the zero-state residual
/// (constant A plus F = 0 converges immediately, in at most one step).
/// Inner solves run at a fixed fraction of tol (no forcing sequence).
/// `initial` warm-starts parameter sweeps.
std::pair<ScalarField, SolveStats> solve_nonlinear(
    const MatrixField& A, double p, const Vec& xi,
    const NonlinearOpts& opts = {}, const VectorField* F = nullptr,
    const ScalarField* initial = nullptr);
std::pair<ScalarField, SolveStats> solve_nonlinear(
    Spectral& ws, const MatrixField& A, double p, const Vec& xi,
    const NonlinearOpts& opts = {}, const VectorField* F = nullptr,
    const ScalarField* initial = nullptr);

}  // namespace monohom
