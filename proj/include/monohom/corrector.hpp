#pragma once

#include <cstdint>
#include <vector>

#include "monohom/field.hpp"
#include "monohom/operator.hpp"
#include "monohom/solver.hpp"

namespace monohom {

/// Everything attached to one corrector solve on one coefficient sample.
/// phi has zero torus mean, q = a(x, xi + grad phi), abar_sample is the
/// spatial average of q (the single-sample estimate of the homogenized map
/// at xi), mu = 1 + |xi + grad phi|^{p-2}.  sigma holds the skew flux
/// corrector once solve_flux_corrector has run: sigma_ij = -sigma_ji with
/// row-divergence equal to q - abar_sample up to the recorded residual.
struct CorrectorBundle {
  Vec xi;
  double p = 2.0;
  double solve_tol = 1e-10;
  ScalarField phi;
  VectorField grad_phi;
  VectorField q;
  Vec abar_sample;
  ScalarField mu;
  MatrixField sigma;
  bool sigma_solved = false;
  double divsig_residual = 0.0;  // ||div sigma - (q - abar)||_2 / ||q||_2
  SolveStats stats;
};

/// The linearized corrector in direction e on top of a solved bundle:
/// coefficient a_xi = Da(x, xi + grad phi_xi), phi solving
/// -div(a_xi (e + grad phi)) = 0, flux q = a_xi (e + grad phi), and
/// tangent_row = mean(q), one column of the homogenized tangent.
struct LinearizedBundle {
  Vec e;
  MatrixField a_xi;
  ScalarField phi;
  VectorField grad_phi;
  VectorField q;
  Vec tangent_row;
  MatrixField sigma;
  bool sigma_solved = false;
  double divsig_residual = 0.0;
  double weighted_energy = 0.0;  // mean(|grad phi|^2 mu)
  SolveStats stats;
};

/// `initial` warm starts the Newton iteration (slope sweeps and caches hand
/// in the previous solution); the solve still runs to opts.tol.
CorrectorBundle solve_corrector(const OperatorSpec& spec, const Vec& xi,
                                const NonlinearOpts& opts = {},
                                const ScalarField* initial = nullptr);
CorrectorBundle solve_corrector(Spectral& ws, const OperatorSpec& spec,
                                const Vec& xi, const NonlinearOpts& opts = {},
                                const ScalarField* initial = nullptr);

/// Populates bundle.sigma from bundle.q by Poisson solves on the curl of the
/// flux, records the divergence identity residual, and throws
/// InvariantError when it exceeds 100x the solve tolerance.  A no-op in one
/// dimension (no off-diagonal pairs).
CorrectorBundle& solve_flux_corrector(CorrectorBundle& bundle);
CorrectorBundle& solve_flux_corrector(Spectral& ws, CorrectorBundle& bundle);

LinearizedBundle solve_linearized(const OperatorSpec& spec,
                                  const CorrectorBundle& bundle, const Vec& e,
                                  const LinearOpts& opts = {});
LinearizedBundle solve_linearized(Spectral& ws, const OperatorSpec& spec,
                                  const CorrectorBundle& bundle, const Vec& e,
                                  const LinearOpts& opts = {});

/// A family of operators drawn from a coefficient recipe on a fixed grid.
struct EnsembleSpec {
  Grid grid;
  CoefficientRecipe recipe;
  double p = 2.0;
};

/// Monte-Carlo estimate of the homogenized map at one slope: mean and
/// componentwise standard error of abar_sample over independent coefficient
/// samples.  Samples whose solve failed are listed in `failed` and excluded
/// from the average.
struct MapEstimate {
  Vec value;
  Vec se;
  int samples_ok = 0;
  std::vector<int> failed;
};

struct TangentEstimate {
  Mat value;
  Mat se;
  int samples_ok = 0;
  std::vector<int> failed;
};

MapEstimate homogenized_map(const EnsembleSpec& es, const Vec& xi,
                            int sample_count, std::uint64_t seed,
                            const NonlinearOpts& opts = {});

/// Columns are Monte-Carlo means of tangent_row over the canonical
/// directions e_1..e_d, on the same coefficient samples as the map estimate
/// with the same seed (common random numbers).
TangentEstimate homogenized_tangent(const EnsembleSpec& es, const Vec& xi,
                                    int sample_count, std::uint64_t seed,
                                    const NonlinearOpts& opts = {});

}  // namespace monohom
