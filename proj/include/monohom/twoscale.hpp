#pragma once

#include <array>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <vector>

#include "monohom/corrector.hpp"
#include "monohom/errors.hpp"
#include "monohom/field.hpp"
#include "monohom/grid.hpp"
#include "monohom/operator.hpp"
#include "monohom/solver.hpp"

namespace monohom {

/// Smooth partition of unity subordinate to the cubes of the delta-lattice.
/// The construction is a tensor product of one-dimensional C^2 plateau
/// bumps chi_m whose translates sum to 1 exactly (the two transition ramps
/// meeting between neighbouring centers are mirror images of the same
/// quintic smoothstep), so eta_k(x) = prod_a chi_{m_a}(x_a) needs no
/// normalization.  Each eta_k equals 1 on the cube |x-k|_inf <= delta/(2d)
/// (delta/4 in one dimension, where a delta/2 plateau would leave no room
/// for a continuous ramp), vanishes outside |x-k|_inf < delta, and
/// satisfies |grad eta_k| <= c_grad/delta with the recorded c_grad.
/// Profiles are stored once per 1-D center; eta values and analytic
/// gradients are products of table lookups.
struct PartitionOfUnity {
  Grid grid;
  double delta = 0.0;
  int per_axis = 0;  // centers per axis, L/delta
  double plateau = 0.0;  // half-width of the eta == 1 cube
  // chi[m][j]: profile of 1-D center m at axis node j; dchi is its exact
  // derivative (not a finite difference).
  std::vector<std::vector<double>> chi;
  std::vector<std::vector<double>> dchi;
  // Smallest eta over the plateau cubes (1 by construction) and the
  // measured sup of |grad eta_k| * delta over all centers and nodes.
  double c_low = 0.0;
  double c_grad = 0.0;

  int center_count() const;
  std::array<int, 3> center_index(int k) const;  // per-axis center numbers
  std::array<double, 3> center_position(int k) const;
  double eta(int k, int j0, int j1, int j2) const;
  ScalarField eta_field(int k) const;
  VectorField grad_eta_field(int k) const;
};

/// Builds the partition for cell size delta.  delta must be a multiple of
/// h covering at least 8 grid cells, at most L/4, and must divide L so the
/// center lattice closes up periodically.  All invariants (sum 1 to 1e-12,
/// range [0,1], support, plateau, gradient bound) are verified on the
/// lattice before returning; violations raise InvariantError.
PartitionOfUnity build_partition(const Grid& g, double delta);

/// u solving -div a(x, grad u) = div f on the torus with zero mean, the
/// heterogeneous problem of the expansion study.  Thin wrapper over
/// solve_nonlinear in boundary-value mode (slope 0, right-hand side f).
ScalarField solve_heterogeneous(const OperatorSpec& spec, const VectorField& f,
                                const NonlinearOpts& opts = {},
                                SolveStats* stats = nullptr);

/// Radial tabulation of the homogenized map: abar(xi) = rho(|xi|) xi with
/// rho interpolated by a cubic Hermite through (t_i, rho_i).  Nodal slopes
/// are three-point Lagrange derivatives, so constant, linear and quadratic
/// profiles (p = 2, 3, 4 with constant coefficients) are reproduced
/// exactly.  Evaluation clamps below t.front() and extends with a constant
/// above t.back(); gradients that actually exceed tmax() at a converged
/// solution are reported as range failures by solve_homogenized.
struct RadialTable {
  std::vector<double> t;
  std::vector<double> rho;
  std::vector<double> slope;

  double tmax() const { return t.back(); }
  double eval(double s) const;
  double deriv(double s) const;
  Vec abar(const Vec& xi) const;
  Mat tangent(const Vec& xi) const;  // rho Id + (rho'/t) xi xi^T
};

/// Validates and finishes a table: t strictly increasing from >= 0, rho
/// positive and finite, t*rho(t) strictly increasing at the nodes (radial
/// monotonicity of the map).
RadialTable make_radial_table(std::vector<double> t, std::vector<double> rho);

struct HomogenizedResult {
  ScalarField u;
  SolveStats stats;
  double grad_max = 0.0;  // largest |grad u| at the returned solution
};

/// Raised when a homogenized solve converged but its gradient exceeds the
/// tabulated range; carries the observed maximum so the caller can
/// re-tabulate wide enough.
class TableRangeError : public SolverError {
 public:
  TableRangeError(const std::string& what, double rel_residual,
                  int iterations, double grad_max)
      : SolverError(what, rel_residual, iterations), grad_max(grad_max) {}
  double grad_max = 0.0;
};

/// u solving -div abar(grad u) = div f with zero mean by damped Newton with
/// the analytic radial tangent.  Throws SolverError when Newton stalls and
/// TableRangeError when the converged gradient leaves the tabulated range
/// (the table is then too short for this datum; see
/// solve_homogenized_adaptive).
HomogenizedResult solve_homogenized(const RadialTable& table,
                                    const VectorField& f,
                                    const NonlinearOpts& opts = {});

/// Produces a table covering [0, tmax] (how is the caller's business:
/// closed form, cell problems, Monte-Carlo).
using RadialTabulator = std::function<RadialTable(double tmax)>;

/// Tabulate to tmax0 and solve; on a range failure re-tabulate once to a
/// range covering the observed gradient and retry, then fail for good.
/// When `used` is non-null the table of the successful solve is stored
/// there (a remainder assembly wants the same table the solution saw).
HomogenizedResult solve_homogenized_adaptive(const RadialTabulator& tabulate,
                                             double tmax0,
                                             const VectorField& f,
                                             const NonlinearOpts& opts = {},
                                             RadialTable* used = nullptr);

/// Cache of corrector bundles keyed by the slope quantized to a lattice of
/// spacing `quantum` per component.  A miss solves the corrector and its
/// flux corrector on the stored operator; `freeze()` turns further misses
/// into ConfigError (for callers that pre-populate).  Cached bundles keep
/// phi, grad_phi, sigma and the scalar diagnostics; the bulk flux and
/// weight fields are dropped so fine partitions (hundreds of bundles) stay
/// in memory.
///
/// The cache is a concurrent map with single-writer-per-key semantics:
/// every key is solved exactly once and other threads asking for it block
/// until the bundle lands.  Solves warm start from the library's most
/// recently finished bundle (nearby slopes have nearby correctors), which
/// is deterministic whenever a library instance is driven by one thread;
/// concurrent drivers still get exact solves, in cache order.
class CorrectorLibrary {
 public:
  CorrectorLibrary(OperatorSpec spec, double quantum,
                   const NonlinearOpts& opts = {});

  Vec quantize(const Vec& xi) const;
  const CorrectorBundle& get(const Vec& xi);  // xi is quantized internally
  double quantum() const { return quantum_; }
  const OperatorSpec& spec() const { return spec_; }
  int size() const;  // finished bundles
  void freeze();

 private:
  OperatorSpec spec_;
  double quantum_ = 0.0;
  NonlinearOpts opts_;
  bool frozen_ = false;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  const CorrectorBundle* last_done_ = nullptr;
  std::map<std::array<long long, 3>, std::unique_ptr<CorrectorBundle>> cache_;
};

/// The assembled two-scale expansion.  In this artifact scale separation
/// lives in the coefficient (correlation length ell_c = eps * L on the one
/// shared torus), so the correctors of the library already carry the small
/// amplitude that the continuum formula writes as eps * phi(x/eps):
///   u2s = ubar + sum_k eta_k phi_{xi_k},
///   grad_u2s = grad ubar + sum_k (eta_k grad phi_{xi_k}
///                                 + phi_{xi_k} grad eta_k),
/// with xi_k the eta_k-weighted average of grad ubar, quantized to the
/// library lattice before the corrector lookup.  eps and delta are carried
/// for reporting.
struct TwoScaleField {
  double eps = 0.0;
  double delta = 0.0;
  ScalarField ubar;
  VectorField grad_ubar;
  ScalarField u2s;
  VectorField grad_u2s;
  std::vector<Vec> xi_raw;   // exact discrete local averages
  std::vector<Vec> xi_used;  // the quantized slopes actually solved
  double quantization_error = 0.0;  // max_k |xi_raw - xi_used|
};

/// Expansion with the gradient of ubar taken by forward differences.
TwoScaleField two_scale_expand(const ScalarField& ubar,
                               const PartitionOfUnity& pou,
                               CorrectorLibrary& lib, double eps);
/// Same with a caller-supplied gradient (affine ubar wraps around the
/// torus, so its lattice gradient is wrong at the seam; pass the constant
/// slope explicitly).
TwoScaleField two_scale_expand(const ScalarField& ubar,
                               const VectorField& grad_ubar,
                               const PartitionOfUnity& pou,
                               CorrectorLibrary& lib, double eps);

struct ExpansionError {
  double l2 = 0.0;  // || grad u_eps - grad u2s ||_{L^2}, the gated norm
  double lp = 0.0;  // same in L^p, reported alongside
};
ExpansionError expansion_error(const ScalarField& u_eps,
                               const TwoScaleField& ts, double p);

/// The five terms of the divergence-form remainder R of the expansion
/// error equation -div(a(x, grad u2s) - a(x, grad u_eps)) = div R:
///   homogenized_mismatch   sum_k eta_k (abar(xi_k) - abar(grad ubar))
///   flux_corrector         - sum_k sigma_{xi_k} grad eta_k
///   slope_mismatch         sum_k eta_k (a(x, grad ubar + grad phi_k)
///                                       - a(x, xi_k + grad phi_k))
///   blending               a(x, grad ubar + sum_k eta_k grad phi_k)
///                          - sum_k eta_k a(x, grad ubar + grad phi_k)
///   gradient_correction    a(x, grad u2s) - a(x, grad u2s
///                                               - sum_k phi_k grad eta_k)
/// For affine ubar every term vanishes (the first and third have equal
/// arguments, the others telescope through sum eta = 1, sum grad eta = 0).
struct RemainderReport {
  VectorField homogenized_mismatch;
  VectorField flux_corrector;
  VectorField slope_mismatch;
  VectorField blending;
  VectorField gradient_correction;
  VectorField total;
  std::array<double, 5> term_l2{};
  double norm_l2 = 0.0;
};
RemainderReport remainder_assembly(const TwoScaleField& ts,
                                   const PartitionOfUnity& pou,
                                   CorrectorLibrary& lib,
                                   const RadialTable& abar,
                                   const OperatorSpec& spec);

/// Energy estimate behind the convergence rate: testing the error equation
/// with e = u_eps - u2s and using monotonicity of a gives
///   ||grad e||_2^2 + ||grad e||_p^p <= C ||R||_2^2.
/// The check evaluates both sides, records the ratio, and compares against
/// `cap` (0 picks 2^p * 16 / lambda^2, a generous multiple of the constant
/// the monotone-class inequalities yield).
struct EnergyCheck {
  double lhs = 0.0;           // ||grad e||_2^2 + ||grad e||_p^p
  double remainder_l2 = 0.0;  // ||R||_2
  double pairing = 0.0;       // lattice mean of R . grad e
  double ratio = 0.0;         // lhs / ||R||_2^2
  double cap = 0.0;
  bool ok = false;
};
EnergyCheck energy_estimate_check(const OperatorSpec& spec,
                                  const ScalarField& u_eps,
                                  const TwoScaleField& ts,
                                  const RemainderReport& rem,
                                  double cap = 0.0);

/// Deterministic unit-cell coefficient b(x) Id with
/// b = (1+lambda)/2 + (1-lambda)/2 * prod_a cos(2 pi x_a / ell_c),
/// smooth, ell_c-periodic per axis, eigenvalues in [lambda, 1], invariant
/// under the cube symmetries (so the p = 2 homogenized matrix is scalar).
/// Requires L / ell_c integer and ell_c >= 8 h.
MatrixField periodic_coefficient(const Grid& g, double ell_c, double lambda);

/// Fixed smooth divergence-form datum with two Fourier modes per the study
/// design; amplitude scales the gradient of the solutions it drives.
VectorField smooth_rhs(const Grid& g, double amplitude = 1.0);

/// One (eps, sample) run plus the per-eps running slope of the study.
struct RatePoint {
  double eps = 0.0;
  double delta = 0.0;
  int sample = 0;
  double err_l2 = 0.0;
  double err_lp = 0.0;
  double remainder_l2 = 0.0;
  double quant_err = 0.0;
  double energy_ratio = 0.0;
  double slope_partial = 0.0;  // LS slope over eps levels seen so far
};

struct RateStudySpec {
  Grid grid;
  double p = 2.0;
  double lambda = 0.25;
  bool periodic = false;       // deterministic unit cell vs random recipe
  CoefficientRecipe recipe;    // used when periodic == false (ell_c is
                               // overridden per eps)
  std::vector<double> eps_list;
  int samples_per_eps = 1;     // forced to 1 in periodic mode
  std::uint64_t seed = 1;
  double rhs_amplitude = 1.0;
  NonlinearOpts opts{};
};

struct RateReport {
  std::vector<RatePoint> points;
  std::vector<double> eps_levels;
  std::vector<double> mean_err;  // mean err_l2 per eps level
  double slope = 0.0;            // LS slope of log mean_err vs log eps
  double control_err = 0.0;      // constant-coefficient expansion error
};

/// Expansion-error rate in eps at delta = eps * L on one grid: for each
/// eps the coefficient is (re)built with ell_c = eps * L and, sample by
/// sample, the homogenized map is tabulated from that sample's own
/// correctors, ubar is solved from the tabulated map, the expansion is
/// assembled and compared with the heterogeneous solution.  The quenched
/// (per-sample) table matters: on these tori the sample fluctuation of
/// abar is of the same order as the rate being measured, and it is also
/// what the flux-corrector identity holds against.  Random-mode draws are
/// conditioned on a zero torus mean with the pointwise variance restored
/// (raw draws put up to 39% of the variance into a random constant at
/// eps = 1/4, so their law would drift across levels) and sample keys are
/// shared by all levels as common random numbers.  A constant-coefficient
/// control run records the floor of the whole pipeline.  Every run's
/// energy estimate is checked; a violation raises InvariantError.
RateReport two_scale_rate_study(const RateStudySpec& spec);

}  // namespace monohom
