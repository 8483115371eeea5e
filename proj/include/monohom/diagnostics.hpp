#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "monohom/corrector.hpp"
#include "monohom/grid.hpp"
#include "monohom/operator.hpp"
#include "monohom/solver.hpp"

namespace monohom {

/// Growth weight: 1 + sqrt(|z|) in d=1, sqrt(log(2+|z|)) in d=2, 1 above.
double mu_d(int d, double dist);

/// Mean of f over the discrete ball of radius r at EVERY lattice center,
/// via circular convolution with the ball indicator.  Same ball convention
/// as ball_average (min-image metric, cutoff r^2 + 1e-9 h^2), but r may
/// exceed L/2 (the ball then saturates to the whole torus).
ScalarField ball_average_field(const ScalarField& f, double radius);
ScalarField ball_average_field(const ScalarField& f, double radius,
                               Spectral& ws);

enum class RadiusKind { meyers_nonlinear, linear_minimal };

/// A per-point minimal scale.  `c` is the threshold constant the scale was
/// computed with (c1 for the Meyers kind, C for the linear kind); `ell` is
/// the cone slope of the inf-convolution (Meyers kind only, 0 otherwise).
struct RadiusField {
  RadiusKind kind = RadiusKind::meyers_nonlinear;
  ScalarField values;
  double c = 0.0;
  double ell = 0.0;
};

/// Cone slope used by meyers_radius.
inline constexpr double kMeyersSlope = 1.0 / 16.0;

/// Smallest dyadic r = 2^n (in {1, 2, ..., cap}, cap = largest power of two
/// <= L) such that the average of |grad phi|^p over B_R(x) stays below
/// c1 (1 + |xi|^p) for every dyadic R in [r, cap]; one value per node.
ScalarField dyadic_underline_radius(const CorrectorBundle& b, double c1);
ScalarField dyadic_underline_radius(const CorrectorBundle& b, double c1,
                                    Spectral& ws);

/// Minimal-radius field: inf over y of (underline_r(y, c1) + ell |x - y|)
/// with the periodic metric, evaluated exactly by a per-level distance
/// transform.  Values are capped at the dyadic cap.
RadiusField meyers_radius(const CorrectorBundle& b, double c1);
RadiusField meyers_radius(const CorrectorBundle& b, double c1, Spectral& ws);

/// Calibration helper: 4x the sup over nodes and dyadic radii of the
/// defining average ratio avg_{B_R(x)} |grad phi|^p / (1 + |xi|^p).  With
/// this c1 the calibration bundle itself gets underline radius 1 everywhere.
double calibrate_c1(const CorrectorBundle& b);
double calibrate_c1(const CorrectorBundle& b, Spectral& ws);

/// Linear minimal scale: smallest dyadic r such that for all dyadic
/// R in [r, L/2], avg_{B_R} |grad phi_lin|^2 mu  <=  C avg_{B_2R} mu.
RadiusField linear_minimal_radius(const CorrectorBundle& b,
                                  const LinearizedBundle& lb, double C);
RadiusField linear_minimal_radius(const CorrectorBundle& b,
                                  const LinearizedBundle& lb, double C,
                                  Spectral& ws);

/// Which gradient the scaling study averages over balls.
enum class CltQuantity { grad_phi, grad_sigma, grad_phi_lin };

/// Per-radius Monte-Carlo variance of ball-averaged corrector gradients and
/// the fitted log-log slope (CLT scaling would give slope -d).
struct ScalingReport {
  std::vector<double> radii;
  std::vector<double> variance;  // summed over quantity components
  double slope = 0.0;
  double ci_lo = 0.0;  // 95% bootstrap interval for the slope
  double ci_hi = 0.0;
  int samples = 0;
  bool degenerate = false;  // some radius had zero variance
  std::vector<int> failed;
};

/// radii: >= 4 values, max/min >= 8, each <= L/4.  sample_count >= 50.
/// The averaged quantity sits at the origin; variance is over samples.
/// grad_phi_lin linearizes along e1 at the given xi.
ScalingReport clt_scaling(const EnsembleSpec& es, const Vec& xi,
                          CltQuantity quantity,
                          const std::vector<double>& radii, int sample_count,
                          std::uint64_t seed, const NonlinearOpts& opts = {});

/// Moment growth of the anchored correctors at fixed points.
struct GrowthPoint {
  std::array<double, 3> x{};            // physical coordinates
  double mu = 1.0;                      // mu_d(|x|)
  std::array<double, 3> phi_norms{};    // q-norms, q in {1, 2, 4}
  std::array<double, 3> sigma_norms{};  // pooled over ij pairs; 0 in d=1
  double sup_ratio = 0.0;  // max over samples of |value| / mu_d(|x|)
};
struct GrowthReport {
  std::vector<GrowthPoint> points;
  int samples = 0;
  std::vector<int> failed;
};

/// Moments of |phi(x) - avg_{B_1(0)} phi| (and the same for each sigma_ij)
/// at the given points, which must lie in the cube |x_i| <= L/8.
GrowthReport corrector_growth(const EnsembleSpec& es, const Vec& xi,
                              const std::vector<std::array<double, 3>>& points,
                              int sample_count, std::uint64_t seed,
                              const NonlinearOpts& opts = {});

/// q-norm growth fit: E[|X|^q]^{1/q} ~ C q^kappa over q in {1, 2, 4, 8}.
/// Finite kappa is the sub-Weibull proxy for a stretched-exponential tail.
struct MomentTailReport {
  std::array<double, 4> q{1.0, 2.0, 4.0, 8.0};
  std::array<double, 4> qnorm{};
  double kappa = 0.0;
};

/// Requires >= 200 values.
MomentTailReport moment_tail(const std::vector<double>& values);

/// Monotonicity and Lipschitz constants of the homogenized operator over a
/// slope grid, with common random numbers across slopes.
struct PairRatio {
  int i = 0;
  int j = 0;
  double ratio = 0.0;  // (abar_i - abar_j).(xi_i - xi_j) / weight
  double ratio_se = 0.0;
  double lip = 0.0;  // |abar_i - abar_j| / (weight^{1/2} style denominator)
  double lip_se = 0.0;
};
struct MonotonicityReport {
  std::vector<Vec> xi;
  std::vector<PairRatio> pairs;
  double c = 0.0;  // min pair ratio
  double c_se = 0.0;
  int worst_pair = -1;   // index into pairs
  double lipschitz = 0.0;  // max pair lip
  double lipschitz_se = 0.0;
  int lip_pair = -1;
  int samples = 0;
  std::vector<int> failed;
};

/// Both ratios use the weight (1 + |xi_i|^{p-2} + |xi_j|^{p-2}); the
/// monotonicity ratio divides by weight |xi_i - xi_j|^2, the Lipschitz
/// ratio by weight |xi_i - xi_j|.  Per-pair error bars come from the
/// per-sample ratios (shared coefficient samples across slopes).
MonotonicityReport verify_strong_monotonicity(const EnsembleSpec& es,
                                              const std::vector<Vec>& xi_grid,
                                              int sample_count,
                                              std::uint64_t seed,
                                              const NonlinearOpts& opts = {});

/// Radial energy profile zeta(t) = E mean W(x, t e1 + grad phi) and the ODE
/// identity t zeta'(t) - p zeta(t) = h(t), where h collects the quadratic
/// part of the flux: h(t) = (1 - p/2) E mean b |t e1 + grad phi|^2.
struct RadialOdePoint {
  double t = 0.0;
  double zeta = 0.0, zeta_se = 0.0;
  double zeta_prime = 0.0, zeta_prime_se = 0.0;  // abar(t e1) . e1
  double h = 0.0, h_se = 0.0;
  double residual = 0.0, residual_se = 0.0;  // t zeta' - p zeta - h
};
struct RadialOdeReport {
  std::vector<RadialOdePoint> points;
  // min over adjacent t midpoints of FD zeta'' / (1 + t^p)^{(p-2)/p}
  double convexity_constant = 0.0;
  int samples = 0;
  std::vector<int> failed;
};

/// Requires an isotropic recipe producing scalar coefficients and a strictly
/// increasing t grid with >= 5 points.
RadialOdeReport radial_profile_check(const EnsembleSpec& es,
                                     const std::vector<double>& t_grid,
                                     int sample_count, std::uint64_t seed,
                                     const NonlinearOpts& opts = {});

/// Decay fit of ball averages of |grad u|^2 (1 + |grad u|^{p-2}) around the
/// origin, u = xi.x + phi.  avg ~ r^{-exponent}; delta = d - exponent >= 0
/// is the hole-filling exponent on this sample.
struct HolefillingReport {
  std::vector<double> radii;
  std::vector<double> averages;
  double exponent = 0.0;
  double delta = 0.0;
};

/// Requires >= 4 radii, each in (0, L/2].
HolefillingReport holefilling_fit(const CorrectorBundle& b,
                                  const std::vector<double>& radii);

/// Energy-vs-oscillation constants on ball/annulus pairs.
struct CaccioppoliEntry {
  std::array<double, 3> center{};
  double r = 0.0;
  double lhs = 0.0;  // avg_{B_r} |grad u|^2 (1 + |grad u|^{p-2})
  double rhs = 0.0;  // inf_c avg_{B_2r \ B_r} (|u-c|/r)^2 + (|u-c|/r)^p
  double constant = 0.0;  // lhs / rhs
};
struct CaccioppoliReport {
  std::vector<CaccioppoliEntry> entries;
  double constant = 0.0;  // max over entries
};

/// u = xi.x + phi with the linear part unwrapped around each center.
/// Requires 2r <= L/2 for every radius.
CaccioppoliReport caccioppoli_check(const CorrectorBundle& b,
                                    const std::vector<double>& radii,
                                    const std::vector<std::array<double, 3>>& centers);

}  // namespace monohom
