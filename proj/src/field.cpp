#include "monohom/field.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "monohom/errors.hpp"

namespace monohom {

double covariance_value(const CovarianceSpec& cov, double r2) {
  if (cov.kind == "zero") return 0.0;
  if (!(cov.ell_c > 0.0))
    throw ConfigError("covariance: ell_c must be positive");
  if (cov.kind == "gaussian")
    return std::exp(-0.5 * r2 / (cov.ell_c * cov.ell_c));
  if (cov.kind == "exponential")
    return std::exp(-std::sqrt(r2) / cov.ell_c);
  throw ConfigError("covariance: unknown kind '" + cov.kind + "'");
}

ScalarField periodized_covariance(const CovarianceSpec& cov, const Grid& g) {
  ScalarField c(g);
  if (cov.kind == "zero") return c;
  const double c0 = covariance_value(cov, 0.0);
  if (g.L < 4.0 * cov.ell_c - 1e-12 * g.L)
    throw ConfigError("periodized_covariance: requires L >= 4 ell_c");

  constexpr int kMaxShell = 5;
  const double cutoff = 1e-14 * c0;

  // Per-axis squared displacements (h * min(j, N-j) + L k)^2.  Using the
  // integer-reduced lag makes c_L bitwise even under j -> N - j.
  const auto dm = g.dims();
  std::array<std::vector<double>, 3> dy2;
  std::array<std::vector<double>, 3> dy2_min;  // min over j, per k
  for (int a = 0; a < g.d; ++a) {
    dy2[a].assign(static_cast<std::size_t>(g.N) * (2 * kMaxShell + 1), 0.0);
    dy2_min[a].assign(2 * kMaxShell + 1, 0.0);
    for (int k = -kMaxShell; k <= kMaxShell; ++k) {
      double mn = 0.0;
      for (int j = 0; j < g.N; ++j) {
        const int jm = std::min(j, g.N - j);
        const double y = g.h * jm + g.L * k;
        const double v = y * y;
        dy2[a][static_cast<std::size_t>(j) * (2 * kMaxShell + 1) +
               (k + kMaxShell)] = v;
        mn = (j == 0) ? v : std::min(mn, v);
      }
      dy2_min[a][k + kMaxShell] = mn;
    }
  }

  bool converged = false;
  for (int shell = 0; shell <= kMaxShell; ++shell) {
    double shell_max = 0.0;
    int off[3] = {0, 0, 0};
    // Enumerate |k|_inf = shell members.
    std::vector<std::array<int, 3>> members;
    const int lo = -shell, hi = shell;
    for (int k0 = lo; k0 <= hi; ++k0)
      for (int k1 = (g.d > 1 ? lo : 0); k1 <= (g.d > 1 ? hi : 0); ++k1)
        for (int k2 = (g.d > 2 ? lo : 0); k2 <= (g.d > 2 ? hi : 0); ++k2) {
          off[0] = k0; off[1] = k1; off[2] = k2;
          int linf = 0;
          for (int a = 0; a < g.d; ++a) linf = std::max(linf, std::abs(off[a]));
          if (linf == shell) members.push_back({k0, k1, k2});
        }

    for (const auto& k : members) {
      // Cheap member bound: covariance at the member's closest approach.
      double min_r2 = 0.0;
      for (int a = 0; a < g.d; ++a) min_r2 += dy2_min[a][k[a] + kMaxShell];
      const double bound = covariance_value(cov, min_r2);
      if (bound < 1e-2 * cutoff) {
        shell_max = std::max(shell_max, bound);
        continue;
      }
      double member_max = 0.0;
      std::size_t idx = 0;
      for (int j0 = 0; j0 < dm[0]; ++j0) {
        const double r0 = dy2[0][static_cast<std::size_t>(j0) *
                                     (2 * kMaxShell + 1) +
                                 (k[0] + kMaxShell)];
        for (int j1 = 0; j1 < dm[1]; ++j1) {
          const double r1 =
              r0 + (g.d > 1 ? dy2[1][static_cast<std::size_t>(j1) *
                                         (2 * kMaxShell + 1) +
                                     (k[1] + kMaxShell)]
                            : 0.0);
          for (int j2 = 0; j2 < dm[2]; ++j2, ++idx) {
            const double r2 =
                r1 + (g.d > 2 ? dy2[2][static_cast<std::size_t>(j2) *
                                           (2 * kMaxShell + 1) +
                                       (k[2] + kMaxShell)]
                              : 0.0);
            const double v = covariance_value(cov, r2);
            c[idx] += v;
            member_max = std::max(member_max, v);
          }
        }
      }
      shell_max = std::max(shell_max, member_max);
    }

    if (shell >= 1 && shell_max < cutoff) {
      converged = true;
      break;
    }
  }
  if (!converged)
    throw ConfigError(
        "periodized_covariance: lattice sum did not fall below 1e-14 c(0) "
        "within 5 periods; increase L / ell_c or use a faster-decaying kind");
  return c;
}

namespace {

// White noise keyed by origin-centered lattice index, so equal-spacing grids
// agree on their common window.
void fill_white_noise(ScalarField& w, rng::Key seed) {
  const Grid& g = w.grid();
  const auto dm = g.dims();
  const int half = g.N / 2;
  std::size_t idx = 0;
  for (int j0 = 0; j0 < dm[0]; ++j0)
    for (int j1 = 0; j1 < dm[1]; ++j1)
      for (int j2 = 0; j2 < dm[2]; ++j2, ++idx)
        w[idx] = rng::site_normal(seed, j0 - half, g.d > 1 ? j1 - half : 0,
                                  g.d > 2 ? j2 - half : 0, 0);
}

// Spectral square root of the circulant covariance: sqrt of the unnormalized
// DFT coefficients of c_L, negatives clipped.  The clipped fraction is
// weighted by conjugate multiplicity of the half-spectrum.
std::vector<double> spectral_factor(Spectral& ws, const ScalarField& c_L,
                                    double* clipped_mass) {
  const Grid& g = ws.grid();
  auto spec = ws.spectrum(c_L);
  std::vector<double> factor(spec.size());
  double neg = 0.0, tot = 0.0;
  const int last = g.d - 1;
  std::array<int, 3> sd = {1, 1, 1};
  for (int a = 0; a < g.d; ++a) sd[a] = (a == last ? g.N / 2 + 1 : g.N);
  std::size_t idx = 0;
  for (int k0 = 0; k0 < sd[0]; ++k0)
    for (int k1 = 0; k1 < sd[1]; ++k1)
      for (int k2 = 0; k2 < sd[2]; ++k2, ++idx) {
        const int klast = (last == 0 ? k0 : (last == 1 ? k1 : k2));
        const double wgt = (klast == 0 || klast == g.N / 2) ? 1.0 : 2.0;
        const double lam = spec[idx].real();
        tot += wgt * std::abs(lam);
        if (lam < 0.0) neg += wgt * (-lam);
        factor[idx] = std::sqrt(std::max(lam, 0.0));
      }
  *clipped_mass = (tot > 0.0) ? neg / tot : 0.0;
  return factor;
}

void check_even(const ScalarField& c_L) {
  const Grid& g = c_L.grid();
  const auto dm = g.dims();
  double mx = 0.0;
  for (std::size_t i = 0; i < c_L.size(); ++i)
    mx = std::max(mx, std::abs(c_L[i]));
  const double tol = 1e-12 * std::max(1.0, mx);
  std::size_t idx = 0;
  for (int j0 = 0; j0 < dm[0]; ++j0)
    for (int j1 = 0; j1 < dm[1]; ++j1)
      for (int j2 = 0; j2 < dm[2]; ++j2, ++idx) {
        const int f0 = (g.N - j0) % g.N;
        const int f1 = (dm[1] - j1) % dm[1];
        const int f2 = (dm[2] - j2) % dm[2];
        const std::size_t fidx =
            (static_cast<std::size_t>(f0) * dm[1] + f1) * dm[2] + f2;
        if (fidx < idx) continue;
        if (std::abs(c_L[idx] - c_L[fidx]) > tol)
          throw ConfigError(
              "sample_gaussian: covariance is not even under x -> -x");
      }
}

GaussianSample sample_with_factor(Spectral& ws,
                                  const std::vector<double>& factor,
                                  double clipped_mass, rng::Key seed) {
  GaussianSample out;
  out.clipped_mass = clipped_mass;
  out.warned = clipped_mass > 1e-8;
  ScalarField w(ws.grid());
  fill_white_noise(w, seed);
  out.field = ScalarField(ws.grid());
  ws.apply_multiplier(w, factor, out.field);
  return out;
}

}  // namespace

GaussianSample sample_gaussian(const ScalarField& c_L, rng::Key seed,
                               Spectral& ws) {
  if (!c_L.grid().same_as(ws.grid()))
    throw ConfigError("sample_gaussian: workspace grid mismatch");
  check_even(c_L);
  double clipped = 0.0;
  const auto factor = spectral_factor(ws, c_L, &clipped);
  return sample_with_factor(ws, factor, clipped, seed);
}

GaussianSample sample_gaussian(const ScalarField& c_L, rng::Key seed) {
  Spectral ws(c_L.grid());
  return sample_gaussian(c_L, seed, ws);
}

std::pair<GaussianSample, GaussianSample> coupled_pair(
    const CovarianceSpec& cov, const Grid& g1, const Grid& g2, rng::Key seed) {
  if (g1.d != g2.d) throw ConfigError("coupled_pair: dimensions differ");
  if (std::abs(g1.h - g2.h) > 1e-12 * g1.h)
    throw ConfigError("coupled_pair: lattice spacings differ");
  if (g2.L < g1.L - 1e-12 * g1.L)
    throw ConfigError("coupled_pair: second torus must not be smaller");
  auto s1 = sample_gaussian(periodized_covariance(cov, g1), seed);
  auto s2 = sample_gaussian(periodized_covariance(cov, g2), seed);
  return {std::move(s1), std::move(s2)};
}

ScalarField make_kernel(const Grid& g, int radius_cells) {
  if (radius_cells < 1 || radius_cells > g.N / 2)
    throw ConfigError("make_kernel: radius must be in [1, N/2] cells");
  const double rho2 = (radius_cells * g.h) * (radius_cells * g.h);
  ScalarField chi(g);
  const auto dm = g.dims();
  double sum = 0.0;
  std::size_t idx = 0;
  for (int j0 = 0; j0 < dm[0]; ++j0)
    for (int j1 = 0; j1 < dm[1]; ++j1)
      for (int j2 = 0; j2 < dm[2]; ++j2, ++idx) {
        const int jj[3] = {j0, j1, j2};
        double r2 = 0.0;
        for (int a = 0; a < g.d; ++a) {
          const double y = g.h * std::min(jj[a], g.N - jj[a]);
          r2 += y * y;
        }
        if (r2 < rho2) {
          const double t = 1.0 - r2 / rho2;
          chi[idx] = t * t;
          sum += chi[idx];
        }
      }
  for (std::size_t i = 0; i < chi.size(); ++i) chi[i] /= sum;
  return chi;
}

namespace {

enum class BPreset { kConst, kTanh, kDiag, kTanhSkew, kTable };

BPreset parse_preset(const std::string& name) {
  if (name == "const") return BPreset::kConst;
  if (name == "tanh") return BPreset::kTanh;
  if (name == "diag") return BPreset::kDiag;
  if (name == "tanh-skew") return BPreset::kTanhSkew;
  if (name == "table") return BPreset::kTable;
  throw ConfigError("coefficient recipe: unknown B preset '" + name + "'");
}

void validate_recipe(const CoefficientRecipe& r) {
  if (!(r.lambda > 0.0 && r.lambda < 1.0))
    throw ConfigError("coefficient recipe: lambda must lie in (0, 1)");
  const BPreset p = parse_preset(r.B);
  if (p == BPreset::kTable) {
    if (r.table.empty())
      throw ConfigError("coefficient recipe: empty table");
    for (std::size_t i = 0; i < r.table.size(); ++i) {
      if (i > 0 && !(r.table[i][0] > r.table[i - 1][0]))
        throw ConfigError("coefficient recipe: table abscissae not increasing");
      if (r.table[i][1] < r.lambda || r.table[i][1] > 1.0)
        throw ConfigError("coefficient recipe: table values outside [lambda, 1]");
    }
  }
}

double table_value(const std::vector<std::array<double, 2>>& tab, double t) {
  if (t <= tab.front()[0]) return tab.front()[1];
  if (t >= tab.back()[0]) return tab.back()[1];
  auto it = std::upper_bound(
      tab.begin(), tab.end(), t,
      [](double v, const std::array<double, 2>& e) { return v < e[0]; });
  const auto& hi = *it;
  const auto& lo = *(it - 1);
  const double s = (t - lo[0]) / (hi[0] - lo[0]);
  return lo[1] + s * (hi[1] - lo[1]);
}

Mat preset_B(BPreset p, const CoefficientRecipe& r, int d, double t) {
  const double lam = r.lambda;
  switch (p) {
    case BPreset::kConst:
      return Mat::scaled_identity(d, 0.5 * (1.0 + lam));
    case BPreset::kTanh:
      return Mat::scaled_identity(
          d, 0.5 * (1.0 + lam) + 0.5 * (1.0 - lam) * std::tanh(t));
    case BPreset::kDiag: {
      Mat M = Mat::scaled_identity(d, 0.0);
      for (int i = 0; i < d; ++i)
        M(i, i) = 0.5 * (1.0 + lam) + 0.5 * (1.0 - lam) * std::tanh(t + i);
      return M;
    }
    case BPreset::kTanhSkew: {
      // Symmetric part in [lambda, 0.97] plus a small rotation block keeps
      // |B xi| <= |xi|: sqrt(0.97^2 + 0.15^2) < 1.
      const double s = lam + (0.97 - lam) * 0.5 * (1.0 + std::tanh(t));
      Mat M = Mat::scaled_identity(d, s);
      if (d >= 2) {
        const double w = 0.15 * (1.0 - lam) * std::tanh(t);
        M(0, 1) += w;
        M(1, 0) -= w;
      }
      return M;
    }
    case BPreset::kTable:
      return Mat::scaled_identity(d, table_value(r.table, t));
  }
  throw ConfigError("coefficient recipe: unreachable preset");
}

MatrixField coefficient_from_gaussian(Spectral& ws, const ScalarField& chi,
                                      const ScalarField& G,
                                      const CoefficientRecipe& r) {
  const Grid& g = G.grid();
  validate_recipe(r);
  const BPreset p = parse_preset(r.B);
  MatrixField A(g);

  const bool scalar =
      p == BPreset::kConst || p == BPreset::kTanh || p == BPreset::kTable;
  if (scalar) {
    ScalarField b(g), bc(g);
    for (std::size_t i = 0; i < g.size(); ++i)
      b[i] = preset_B(p, r, 1, G[i])(0, 0);
    ws.convolve(b, chi, bc);
    for (int i = 0; i < g.d; ++i) A.comp(i, i) = bc.values();
  } else {
    ScalarField comp(g), out(g);
    for (int i = 0; i < g.d; ++i)
      for (int j = 0; j < g.d; ++j) {
        bool any = false;
        for (std::size_t n = 0; n < g.size(); ++n) {
          comp[n] = preset_B(p, r, g.d, G[n])(i, j);
          any = any || comp[n] != 0.0;
        }
        if (!any) continue;
        ws.convolve(comp, chi, out);
        A.comp(i, j) = out.values();
      }
  }

  // Uniform ellipticity gate: the convolution averages matrices whose
  // symmetric parts are sandwiched, so violations beyond roundoff mean a
  // broken recipe.
  double worst_lo = 1e300, worst_hi = -1e300;
  for (std::size_t n = 0; n < g.size(); ++n) {
    Mat M = Mat::scaled_identity(g.d, 0.0);
    for (int i = 0; i < g.d; ++i)
      for (int j = 0; j < g.d; ++j) M(i, j) = A.comp(i, j)[n];
    const auto er = sym_eig_range(M.sym());
    worst_lo = std::min(worst_lo, er[0]);
    worst_hi = std::max(worst_hi, er[1]);
  }
  if (worst_lo < r.lambda - 1e-10 || worst_hi > 1.0 + 1e-10) {
    std::ostringstream os;
    os << "make_coefficient: symmetric-part eigenvalues [" << worst_lo << ", "
       << worst_hi << "] escape [" << r.lambda << ", 1]";
    throw InvariantError(os.str());
  }
  return A;
}

}  // namespace

Mat recipe_B(const CoefficientRecipe& r, int d, double t) {
  validate_recipe(r);
  return preset_B(parse_preset(r.B), r, d, t);
}

MatrixField make_coefficient(const ScalarField& G,
                             const CoefficientRecipe& r) {
  Spectral ws(G.grid());
  const ScalarField chi = make_kernel(G.grid(), r.kernel_radius_cells);
  return coefficient_from_gaussian(ws, chi, G, r);
}

CoefficientSampler::CoefficientSampler(const Grid& g,
                                       const CoefficientRecipe& r)
    : g_(g), r_(r) {
  validate_recipe(r_);
  ws_ = std::make_unique<Spectral>(g_);
  c_L_ = periodized_covariance(r_.covariance, g_);
  chi_ = make_kernel(g_, r_.kernel_radius_cells);
  factor_ = spectral_factor(*ws_, c_L_, &clipped_mass_);
}

GaussianSample CoefficientSampler::sample_gaussian_layer(rng::Key seed) {
  return sample_with_factor(*ws_, factor_, clipped_mass_, seed);
}

MatrixField CoefficientSampler::sample(rng::Key seed) {
  const GaussianSample gs = sample_gaussian_layer(seed);
  return coefficient_from_gaussian(*ws_, chi_, gs.field, r_);
}

}  // namespace monohom
