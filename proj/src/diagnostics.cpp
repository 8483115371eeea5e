#include "monohom/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "monohom/errors.hpp"
#include "monohom/fft.hpp"
#include "monohom/field.hpp"
#include "monohom/parallel.hpp"
#include "monohom/rng.hpp"

namespace monohom {

namespace {

constexpr double kFar = 1e18;  // sentinel height for empty parabolas

std::array<int, 3> grid_strides(const Grid& g) {
  const auto dims = g.dims();
  return {dims[1] * dims[2], dims[2], 1};
}

// Dyadic radii 1, 2, 4, ... up to the largest power of two <= cap.
std::vector<double> dyadic_radii(double cap) {
  std::vector<double> out;
  for (double r = 1.0; r <= cap * (1.0 + 1e-12); r *= 2.0) out.push_back(r);
  if (out.empty())
    throw ConfigError("dyadic radii: domain too small (need L >= 1)");
  return out;
}

// Ball indicator about the origin node, same metric and cutoff as
// ball_average; count receives the number of member nodes.
ScalarField ball_indicator(const Grid& g, double r, std::size_t& count) {
  ScalarField k(g);
  const auto dims = g.dims();
  const double r2 = r * r + 1e-9 * g.h * g.h;
  count = 0;
  std::size_t idx = 0;
  for (int j0 = 0; j0 < dims[0]; ++j0) {
    const double z0 = g.d > 0 ? g.min_image(g.h * j0) : 0.0;
    for (int j1 = 0; j1 < dims[1]; ++j1) {
      const double z1 = g.d > 1 ? g.min_image(g.h * j1) : 0.0;
      for (int j2 = 0; j2 < dims[2]; ++j2, ++idx) {
        const double z2 = g.d > 2 ? g.min_image(g.h * j2) : 0.0;
        if (z0 * z0 + z1 * z1 + z2 * z2 <= r2) {
          k[idx] = 1.0;
          ++count;
        }
      }
    }
  }
  return k;
}

// d(q) = min_r ( f(r) + (q - r)^2 ), the lower envelope of parabolas.
void lower_envelope(const std::vector<double>& f, std::vector<double>& d) {
  const int n = static_cast<int>(f.size());
  std::vector<int> v(n, 0);
  std::vector<double> z(n + 1, 0.0);
  int k = 0;
  z[0] = -kFar;
  z[1] = kFar;
  for (int q = 1; q < n; ++q) {
    double s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) /
               (2.0 * (q - v[k]));
    while (s <= z[k]) {
      --k;
      s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * (q - v[k]));
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kFar;
  }
  d.resize(n);
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    const double dq = q - v[k];
    d[q] = f[v[k]] + dq * dq;
  }
}

// Squared periodic lattice distance (in cells) to the set {mask != 0},
// exact: each axis pass runs the envelope on a tripled line so every
// minimal-image offset is available.
std::vector<double> periodic_distance_sq(const Grid& g,
                                         const std::vector<char>& mask) {
  const auto dims = g.dims();
  const auto str = grid_strides(g);
  std::vector<double> dist(g.size());
  for (std::size_t i = 0; i < dist.size(); ++i)
    dist[i] = mask[i] ? 0.0 : kFar;

  std::vector<double> line, trip, env;
  for (int a = 0; a < g.d; ++a) {
    const int n = dims[a];
    if (n <= 1) continue;
    line.resize(n);
    trip.resize(3 * n);
    // iterate over all lines along axis a
    const int b = (a + 1) % 3, c = (a + 2) % 3;
    for (int jb = 0; jb < dims[b]; ++jb) {
      for (int jc = 0; jc < dims[c]; ++jc) {
        const std::size_t base = static_cast<std::size_t>(jb) * str[b] +
                                 static_cast<std::size_t>(jc) * str[c];
        for (int i = 0; i < n; ++i) line[i] = dist[base + i * str[a]];
        for (int i = 0; i < 3 * n; ++i) trip[i] = line[i % n];
        lower_envelope(trip, env);
        for (int i = 0; i < n; ++i) dist[base + i * str[a]] = env[i + n];
      }
    }
  }
  return dist;
}

double mean_on(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double stderr_on(const std::vector<double>& v, double m) {
  const std::size_t n = v.size();
  if (n < 2) return 0.0;
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(n - 1) /
                   static_cast<double>(n));
}

// Least-squares slope of y against x.
double ls_slope(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  return sxy / sxx;
}

// |grad phi|^p as a scalar field.
ScalarField gradient_power(const VectorField& G, double p) {
  const Grid& g = G.grid();
  ScalarField e(g);
  for (std::size_t i = 0; i < g.size(); ++i) {
    double s2 = 0.0;
    for (int a = 0; a < g.d; ++a) s2 += G.comp(a)[i] * G.comp(a)[i];
    e[i] = std::pow(s2, 0.5 * p);
  }
  return e;
}

// Same Monte-Carlo fan-out as the corrector estimators: per-index sampler
// and workspace, SolverError marks the sample failed, all else propagates.
template <class Job>
std::vector<int> run_samples(const EnsembleSpec& es, int sample_count,
                             Job&& job) {
  if (sample_count < 1)
    throw ConfigError("monte carlo: sample_count must be >= 1");
  std::vector<char> bad(sample_count, 0);
  parallel_for_index(sample_count, [&](int k) {
    CoefficientSampler sampler(es.grid, es.recipe);
    Spectral ws(es.grid);
    try {
      job(k, sampler, ws);
    } catch (const SolverError&) {
      bad[k] = 1;
    }
  });
  std::vector<int> failed;
  for (int k = 0; k < sample_count; ++k)
    if (bad[k]) failed.push_back(k);
  return failed;
}

std::vector<int> ok_indices(int n, const std::vector<int>& failed) {
  std::vector<char> bad(n, 0);
  for (int k : failed) bad[k] = 1;
  std::vector<int> ok;
  for (int k = 0; k < n; ++k)
    if (!bad[k]) ok.push_back(k);
  return ok;
}

ScalarField component_field(const Grid& g, const std::vector<double>& v) {
  ScalarField f(g);
  f.values() = v;
  return f;
}

}  // namespace

double mu_d(int d, double dist) {
  const double z = std::abs(dist);
  if (d == 1) return 1.0 + std::sqrt(z);
  if (d == 2) return std::sqrt(std::log(2.0 + z));
  return 1.0;
}

ScalarField ball_average_field(const ScalarField& f, double radius,
                               Spectral& ws) {
  const Grid& g = f.grid();
  if (radius < 0.0)
    throw ConfigError("ball_average_field: radius must be nonnegative");
  std::size_t count = 0;
  const ScalarField kernel = ball_indicator(g, radius, count);
  ScalarField out(g);
  ws.convolve(f, kernel, out);
  const double inv = 1.0 / static_cast<double>(count);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= inv;
  return out;
}

ScalarField ball_average_field(const ScalarField& f, double radius) {
  Spectral ws(f.grid());
  return ball_average_field(f, radius, ws);
}

ScalarField dyadic_underline_radius(const CorrectorBundle& b, double c1,
                                    Spectral& ws) {
  const Grid& g = b.phi.grid();
  const ScalarField e = gradient_power(b.grad_phi, b.p);
  const std::vector<double> radii = dyadic_radii(g.L);
  const double cap = radii.back();
  const double threshold = c1 * (1.0 + std::pow(b.xi.norm(), b.p));
  ScalarField values(g);
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = 1.0;
  for (double r : radii) {
    const ScalarField avg = ball_average_field(e, r, ws);
    const double next = std::min(2.0 * r, cap);
    for (std::size_t i = 0; i < values.size(); ++i)
      if (avg[i] > threshold) values[i] = std::max(values[i], next);
  }
  return values;
}

ScalarField dyadic_underline_radius(const CorrectorBundle& b, double c1) {
  Spectral ws(b.phi.grid());
  return dyadic_underline_radius(b, c1, ws);
}

RadiusField meyers_radius(const CorrectorBundle& b, double c1, Spectral& ws) {
  const Grid& g = b.phi.grid();
  const ScalarField underline = dyadic_underline_radius(b, c1, ws);
  RadiusField out;
  out.kind = RadiusKind::meyers_nonlinear;
  out.c = c1;
  out.ell = kMeyersSlope;
  out.values = underline;

  // Exact cone inf-convolution: group the (few) dyadic levels and take the
  // min over levels of value + slope * distance-to-level-set.
  for (double level : dyadic_radii(g.L)) {
    std::vector<char> mask(g.size(), 0);
    bool any = false;
    for (std::size_t i = 0; i < g.size(); ++i)
      if (underline[i] == level) {
        mask[i] = 1;
        any = true;
      }
    if (!any) continue;
    const std::vector<double> d2 = periodic_distance_sq(g, mask);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double cand = level + kMeyersSlope * g.h * std::sqrt(d2[i]);
      if (cand < out.values[i]) out.values[i] = cand;
    }
  }
  return out;
}

RadiusField meyers_radius(const CorrectorBundle& b, double c1) {
  Spectral ws(b.phi.grid());
  return meyers_radius(b, c1, ws);
}

double calibrate_c1(const CorrectorBundle& b, Spectral& ws) {
  const Grid& g = b.phi.grid();
  const ScalarField e = gradient_power(b.grad_phi, b.p);
  const double denom = 1.0 + std::pow(b.xi.norm(), b.p);
  double sup = 0.0;
  for (double r : dyadic_radii(g.L)) {
    const ScalarField avg = ball_average_field(e, r, ws);
    for (std::size_t i = 0; i < avg.size(); ++i)
      sup = std::max(sup, avg[i] / denom);
  }
  return 4.0 * sup;
}

double calibrate_c1(const CorrectorBundle& b) {
  Spectral ws(b.phi.grid());
  return calibrate_c1(b, ws);
}

RadiusField linear_minimal_radius(const CorrectorBundle& b,
                                  const LinearizedBundle& lb, double C,
                                  Spectral& ws) {
  const Grid& g = b.phi.grid();
  if (!lb.phi.grid().same_as(g))
    throw ConfigError("linear_minimal_radius: bundles on different grids");
  ScalarField num(g);
  for (std::size_t i = 0; i < g.size(); ++i) {
    double s2 = 0.0;
    for (int a = 0; a < g.d; ++a)
      s2 += lb.grad_phi.comp(a)[i] * lb.grad_phi.comp(a)[i];
    num[i] = s2 * b.mu[i];
  }
  const std::vector<double> radii = dyadic_radii(0.5 * g.L);
  const double cap = radii.back();
  RadiusField out;
  out.kind = RadiusKind::linear_minimal;
  out.c = C;
  out.values = ScalarField(g);
  for (std::size_t i = 0; i < g.size(); ++i) out.values[i] = 1.0;
  for (double r : radii) {
    const ScalarField lhs = ball_average_field(num, r, ws);
    const ScalarField rhs = ball_average_field(b.mu, 2.0 * r, ws);
    const double next = std::min(2.0 * r, cap);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (lhs[i] > C * rhs[i]) out.values[i] = std::max(out.values[i], next);
  }
  return out;
}

RadiusField linear_minimal_radius(const CorrectorBundle& b,
                                  const LinearizedBundle& lb, double C) {
  Spectral ws(b.phi.grid());
  return linear_minimal_radius(b, lb, C, ws);
}

ScalingReport clt_scaling(const EnsembleSpec& es, const Vec& xi,
                          CltQuantity quantity,
                          const std::vector<double>& radii, int sample_count,
                          std::uint64_t seed, const NonlinearOpts& opts) {
  const Grid& g = es.grid;
  const int d = g.d;
  if (radii.size() < 4)
    throw ConfigError("clt_scaling: need at least 4 radii");
  double rmin = radii[0], rmax = radii[0];
  for (double r : radii) {
    if (r <= 0.0) throw ConfigError("clt_scaling: radii must be positive");
    if (r > 0.25 * g.L * (1.0 + 1e-12))
      throw ConfigError("clt_scaling: radii must not exceed L/4");
    rmin = std::min(rmin, r);
    rmax = std::max(rmax, r);
  }
  if (rmax < 8.0 * rmin * (1.0 - 1e-12))
    throw ConfigError("clt_scaling: radii must span a decade (max >= 8 min)");
  if (sample_count < 50)
    throw ConfigError("clt_scaling: need at least 50 samples per radius");

  const int npairs = d * (d - 1) / 2;
  const int ncomp = quantity == CltQuantity::grad_sigma ? npairs * d : d;
  const std::size_t row_len = radii.size() * static_cast<std::size_t>(ncomp);
  std::vector<std::vector<double>> rows(sample_count);

  OperatorSpec base;
  base.p = es.p;
  base.lambda = es.recipe.lambda;
  const std::array<double, 3> origin{0.0, 0.0, 0.0};

  ScalingReport rep;
  rep.radii = radii;
  rep.failed = run_samples(
      es, sample_count, [&](int k, CoefficientSampler& sampler, Spectral& ws) {
        OperatorSpec spec = base;
        spec.A = sampler.sample({seed, static_cast<std::uint64_t>(k)});
        CorrectorBundle b = solve_corrector(ws, spec, xi, opts);
        std::vector<ScalarField> comps;
        comps.reserve(ncomp);
        if (quantity == CltQuantity::grad_phi) {
          for (int a = 0; a < d; ++a)
            comps.push_back(component_field(g, b.grad_phi.comp(a)));
        } else if (quantity == CltQuantity::grad_sigma) {
          solve_flux_corrector(ws, b);
          for (int i = 0; i < d; ++i)
            for (int j = i + 1; j < d; ++j) {
              const VectorField gs =
                  gradient(component_field(g, b.sigma.comp(i, j)));
              for (int a = 0; a < d; ++a)
                comps.push_back(component_field(g, gs.comp(a)));
            }
        } else {
          LinearOpts lin;
          lin.tol = opts.tol;
          lin.max_iter = opts.max_krylov;
          const LinearizedBundle lb =
              solve_linearized(ws, spec, b, Vec::basis(d, 0), lin);
          for (int a = 0; a < d; ++a)
            comps.push_back(component_field(g, lb.grad_phi.comp(a)));
        }
        std::vector<double> row;
        row.reserve(row_len);
        for (double r : radii)
          for (const ScalarField& f : comps)
            row.push_back(ball_average(f, origin, r));
        rows[k] = std::move(row);
      });

  const std::vector<int> ok = ok_indices(sample_count, rep.failed);
  if (ok.empty())
    throw SolverError("clt_scaling: every sample failed", 0.0, 0);
  rep.samples = static_cast<int>(ok.size());

  auto variances = [&](const std::vector<int>& idx) {
    std::vector<double> var(radii.size(), 0.0);
    const double n = static_cast<double>(idx.size());
    for (std::size_t ri = 0; ri < radii.size(); ++ri) {
      double total = 0.0;
      for (int c = 0; c < ncomp; ++c) {
        const std::size_t col = ri * ncomp + c;
        double m = 0.0;
        for (int k : idx) m += rows[k][col];
        m /= n;
        double s = 0.0;
        for (int k : idx) s += (rows[k][col] - m) * (rows[k][col] - m);
        total += s / (n - 1.0);
      }
      var[ri] = total;
    }
    return var;
  };

  rep.variance = variances(ok);
  for (double v : rep.variance)
    if (!(v > 0.0)) rep.degenerate = true;
  if (rep.degenerate || ok.size() < 2) {
    rep.degenerate = true;
    return rep;
  }

  std::vector<double> lr(radii.size()), lv(radii.size());
  for (std::size_t i = 0; i < radii.size(); ++i) {
    lr[i] = std::log(radii[i]);
    lv[i] = std::log(rep.variance[i]);
  }
  rep.slope = ls_slope(lr, lv);

  // bootstrap the slope
  std::mt19937_64 rng(seed ^ 0x517cc1b727220a95ULL);
  std::uniform_int_distribution<std::size_t> pick(0, ok.size() - 1);
  std::vector<double> slopes;
  slopes.reserve(1000);
  std::vector<int> resample(ok.size());
  for (int rep_i = 0; rep_i < 1000; ++rep_i) {
    for (std::size_t i = 0; i < ok.size(); ++i) resample[i] = ok[pick(rng)];
    const std::vector<double> var = variances(resample);
    bool good = true;
    for (double v : var)
      if (!(v > 0.0)) good = false;
    if (!good) continue;
    for (std::size_t i = 0; i < radii.size(); ++i) lv[i] = std::log(var[i]);
    slopes.push_back(ls_slope(lr, lv));
  }
  if (slopes.size() >= 100) {
    std::sort(slopes.begin(), slopes.end());
    rep.ci_lo = slopes[static_cast<std::size_t>(0.025 * (slopes.size() - 1))];
    rep.ci_hi = slopes[static_cast<std::size_t>(0.975 * (slopes.size() - 1))];
  } else {
    rep.ci_lo = rep.ci_hi = rep.slope;
  }
  return rep;
}

GrowthReport corrector_growth(const EnsembleSpec& es, const Vec& xi,
                              const std::vector<std::array<double, 3>>& points,
                              int sample_count, std::uint64_t seed,
                              const NonlinearOpts& opts) {
  const Grid& g = es.grid;
  const int d = g.d;
  if (points.empty()) throw ConfigError("corrector_growth: no points");
  const auto dims = g.dims();
  const auto str = grid_strides(g);
  std::vector<std::size_t> nodes;
  for (const auto& x : points) {
    std::size_t idx = 0;
    for (int a = 0; a < d; ++a) {
      if (std::abs(x[a]) > 0.125 * g.L + 1e-9)
        throw ConfigError("corrector_growth: point outside the L/8 cube");
      long j = std::lround((x[a] + 0.5 * g.L) / g.h);
      j = ((j % dims[a]) + dims[a]) % dims[a];
      idx += static_cast<std::size_t>(j) * str[a];
    }
    nodes.push_back(idx);
  }

  const int npairs = d * (d - 1) / 2;
  const std::size_t per_point = 1 + static_cast<std::size_t>(npairs);
  std::vector<std::vector<double>> rows(sample_count);

  OperatorSpec base;
  base.p = es.p;
  base.lambda = es.recipe.lambda;
  const std::array<double, 3> origin{0.0, 0.0, 0.0};

  GrowthReport rep;
  rep.failed = run_samples(
      es, sample_count, [&](int k, CoefficientSampler& sampler, Spectral& ws) {
        OperatorSpec spec = base;
        spec.A = sampler.sample({seed, static_cast<std::uint64_t>(k)});
        CorrectorBundle b = solve_corrector(ws, spec, xi, opts);
        if (npairs > 0) solve_flux_corrector(ws, b);
        const double anchor_phi = ball_average(b.phi, origin, 1.0);
        std::vector<double> anchor_sig;
        for (int i = 0; i < d; ++i)
          for (int j = i + 1; j < d; ++j)
            anchor_sig.push_back(ball_average(
                component_field(g, b.sigma.comp(i, j)), origin, 1.0));
        std::vector<double> row;
        row.reserve(nodes.size() * per_point);
        for (std::size_t pt = 0; pt < nodes.size(); ++pt) {
          row.push_back(std::abs(b.phi[nodes[pt]] - anchor_phi));
          int pair = 0;
          for (int i = 0; i < d; ++i)
            for (int j = i + 1; j < d; ++j, ++pair)
              row.push_back(
                  std::abs(b.sigma.comp(i, j)[nodes[pt]] - anchor_sig[pair]));
        }
        rows[k] = std::move(row);
      });

  const std::vector<int> ok = ok_indices(sample_count, rep.failed);
  if (ok.empty())
    throw SolverError("corrector_growth: every sample failed", 0.0, 0);
  rep.samples = static_cast<int>(ok.size());

  const std::array<double, 3> qs{1.0, 2.0, 4.0};
  for (std::size_t pt = 0; pt < points.size(); ++pt) {
    GrowthPoint gp;
    gp.x = points[pt];
    double r2 = 0.0;
    for (int a = 0; a < d; ++a) r2 += points[pt][a] * points[pt][a];
    gp.mu = mu_d(d, std::sqrt(r2));
    for (std::size_t qi = 0; qi < qs.size(); ++qi) {
      double sphi = 0.0, ssig = 0.0;
      for (int k : ok) {
        const double* row = rows[k].data() + pt * per_point;
        sphi += std::pow(row[0], qs[qi]);
        for (int pr = 0; pr < npairs; ++pr)
          ssig += std::pow(row[1 + pr], qs[qi]);
      }
      const double n = static_cast<double>(ok.size());
      gp.phi_norms[qi] = std::pow(sphi / n, 1.0 / qs[qi]);
      gp.sigma_norms[qi] =
          npairs > 0 ? std::pow(ssig / (n * npairs), 1.0 / qs[qi]) : 0.0;
    }
    for (int k : ok) {
      const double* row = rows[k].data() + pt * per_point;
      for (std::size_t c = 0; c < per_point; ++c)
        gp.sup_ratio = std::max(gp.sup_ratio, row[c] / gp.mu);
    }
    rep.points.push_back(gp);
  }
  return rep;
}

MomentTailReport moment_tail(const std::vector<double>& values) {
  if (values.size() < 200)
    throw ConfigError("moment_tail: need at least 200 samples");
  MomentTailReport rep;
  const double n = static_cast<double>(values.size());
  for (std::size_t qi = 0; qi < rep.q.size(); ++qi) {
    double s = 0.0;
    for (double x : values) s += std::pow(std::abs(x), rep.q[qi]);
    rep.qnorm[qi] = std::pow(s / n, 1.0 / rep.q[qi]);
  }
  bool positive = true;
  for (double m : rep.qnorm)
    if (m <= 0.0) positive = false;
  if (!positive) {
    rep.kappa = 0.0;
    return rep;
  }
  std::vector<double> lq, lm;
  for (std::size_t qi = 0; qi < rep.q.size(); ++qi) {
    lq.push_back(std::log(rep.q[qi]));
    lm.push_back(std::log(rep.qnorm[qi]));
  }
  rep.kappa = ls_slope(lq, lm);
  return rep;
}

MonotonicityReport verify_strong_monotonicity(const EnsembleSpec& es,
                                              const std::vector<Vec>& xi_grid,
                                              int sample_count,
                                              std::uint64_t seed,
                                              const NonlinearOpts& opts) {
  const int nxi = static_cast<int>(xi_grid.size());
  if (nxi < 2)
    throw ConfigError("verify_strong_monotonicity: need at least two slopes");
  for (int i = 0; i < nxi; ++i)
    for (int j = i + 1; j < nxi; ++j)
      if ((xi_grid[i] - xi_grid[j]).norm() < 1e-12)
        throw ConfigError("verify_strong_monotonicity: duplicate slopes");

  std::vector<std::vector<Vec>> rows(sample_count);
  OperatorSpec base;
  base.p = es.p;
  base.lambda = es.recipe.lambda;

  MonotonicityReport rep;
  rep.xi = xi_grid;
  rep.failed = run_samples(
      es, sample_count, [&](int k, CoefficientSampler& sampler, Spectral& ws) {
        OperatorSpec spec = base;
        spec.A = sampler.sample({seed, static_cast<std::uint64_t>(k)});
        std::vector<Vec> row;
        row.reserve(nxi);
        for (const Vec& xi : xi_grid)
          row.push_back(solve_corrector(ws, spec, xi, opts).abar_sample);
        rows[k] = std::move(row);
      });

  const std::vector<int> ok = ok_indices(sample_count, rep.failed);
  if (ok.empty())
    throw SolverError("verify_strong_monotonicity: every sample failed", 0.0,
                      0);
  rep.samples = static_cast<int>(ok.size());

  std::vector<double> ratio_k(ok.size()), lip_k(ok.size());
  for (int i = 0; i < nxi; ++i) {
    for (int j = i + 1; j < nxi; ++j) {
      const Vec diff = xi_grid[i] - xi_grid[j];
      const double dist = diff.norm();
      const double w = 1.0 + std::pow(xi_grid[i].norm(), es.p - 2.0) +
                       std::pow(xi_grid[j].norm(), es.p - 2.0);
      for (std::size_t s = 0; s < ok.size(); ++s) {
        const Vec dab = rows[ok[s]][i] - rows[ok[s]][j];
        ratio_k[s] = dot(dab, diff) / (w * dist * dist);
        lip_k[s] = dab.norm() / (w * dist);
      }
      PairRatio pr;
      pr.i = i;
      pr.j = j;
      pr.ratio = mean_on(ratio_k);
      pr.ratio_se = stderr_on(ratio_k, pr.ratio);
      pr.lip = mean_on(lip_k);
      pr.lip_se = stderr_on(lip_k, pr.lip);
      rep.pairs.push_back(pr);
    }
  }
  for (std::size_t pi = 0; pi < rep.pairs.size(); ++pi) {
    const PairRatio& pr = rep.pairs[pi];
    if (rep.worst_pair < 0 || pr.ratio < rep.c) {
      rep.c = pr.ratio;
      rep.c_se = pr.ratio_se;
      rep.worst_pair = static_cast<int>(pi);
    }
    if (rep.lip_pair < 0 || pr.lip > rep.lipschitz) {
      rep.lipschitz = pr.lip;
      rep.lipschitz_se = pr.lip_se;
      rep.lip_pair = static_cast<int>(pi);
    }
  }
  return rep;
}

RadialOdeReport radial_profile_check(const EnsembleSpec& es,
                                     const std::vector<double>& t_grid,
                                     int sample_count, std::uint64_t seed,
                                     const NonlinearOpts& opts) {
  const Grid& g = es.grid;
  if (!es.recipe.isotropic)
    throw ConfigError("radial_profile_check: recipe must be isotropic");
  if (t_grid.size() < 5)
    throw ConfigError("radial_profile_check: need at least 5 t values");
  for (std::size_t i = 0; i < t_grid.size(); ++i) {
    if (t_grid[i] <= 0.0)
      throw ConfigError("radial_profile_check: t values must be positive");
    if (i > 0 && t_grid[i] <= t_grid[i - 1])
      throw ConfigError("radial_profile_check: t grid must increase");
  }

  const Vec e1 = Vec::basis(g.d, 0);
  const std::size_t nt = t_grid.size();
  // per sample: (zeta, zeta', h) per t
  std::vector<std::vector<std::array<double, 3>>> rows(sample_count);
  OperatorSpec base;
  base.p = es.p;
  base.lambda = es.recipe.lambda;

  RadialOdeReport rep;
  rep.failed = run_samples(
      es, sample_count, [&](int k, CoefficientSampler& sampler, Spectral& ws) {
        OperatorSpec spec = base;
        spec.A = sampler.sample({seed, static_cast<std::uint64_t>(k)});
        if (!is_scalar_field(spec.A))
          throw ConfigError(
              "radial_profile_check: coefficients must be scalar");
        const std::vector<double>& b = spec.A.comp(0, 0);
        std::vector<std::array<double, 3>> row(nt);
        for (std::size_t ti = 0; ti < nt; ++ti) {
          const double t = t_grid[ti];
          const Vec xi = t * e1;
          const CorrectorBundle cb = solve_corrector(ws, spec, xi, opts);
          const double zeta = energy_mean(spec.A, es.p, xi, cb.grad_phi);
          const double zp = cb.abar_sample[0];
          double quad = 0.0;
          for (std::size_t x = 0; x < g.size(); ++x) {
            double s2 = 0.0;
            for (int a = 0; a < g.d; ++a) {
              const double ga = xi[a] + cb.grad_phi.comp(a)[x];
              s2 += ga * ga;
            }
            quad += b[x] * s2;
          }
          quad /= static_cast<double>(g.size());
          row[ti] = {zeta, zp, (1.0 - 0.5 * es.p) * quad};
        }
        rows[k] = std::move(row);
      });

  const std::vector<int> ok = ok_indices(sample_count, rep.failed);
  if (ok.empty())
    throw SolverError("radial_profile_check: every sample failed", 0.0, 0);
  rep.samples = static_cast<int>(ok.size());

  std::vector<double> buf(ok.size());
  for (std::size_t ti = 0; ti < nt; ++ti) {
    RadialOdePoint pt;
    pt.t = t_grid[ti];
    for (std::size_t s = 0; s < ok.size(); ++s) buf[s] = rows[ok[s]][ti][0];
    pt.zeta = mean_on(buf);
    pt.zeta_se = stderr_on(buf, pt.zeta);
    for (std::size_t s = 0; s < ok.size(); ++s) buf[s] = rows[ok[s]][ti][1];
    pt.zeta_prime = mean_on(buf);
    pt.zeta_prime_se = stderr_on(buf, pt.zeta_prime);
    for (std::size_t s = 0; s < ok.size(); ++s) buf[s] = rows[ok[s]][ti][2];
    pt.h = mean_on(buf);
    pt.h_se = stderr_on(buf, pt.h);
    for (std::size_t s = 0; s < ok.size(); ++s) {
      const auto& r = rows[ok[s]][ti];
      buf[s] = pt.t * r[1] - es.p * r[0] - r[2];
    }
    pt.residual = mean_on(buf);
    pt.residual_se = stderr_on(buf, pt.residual);
    rep.points.push_back(pt);
  }

  rep.convexity_constant = std::numeric_limits<double>::infinity();
  for (std::size_t ti = 0; ti + 1 < nt; ++ti) {
    const double dzp = (rep.points[ti + 1].zeta_prime -
                        rep.points[ti].zeta_prime) /
                       (t_grid[ti + 1] - t_grid[ti]);
    const double tm = 0.5 * (t_grid[ti] + t_grid[ti + 1]);
    const double bound = std::pow(1.0 + std::pow(tm, es.p),
                                  (es.p - 2.0) / es.p);
    rep.convexity_constant = std::min(rep.convexity_constant, dzp / bound);
  }
  return rep;
}

HolefillingReport holefilling_fit(const CorrectorBundle& b,
                                  const std::vector<double>& radii) {
  const Grid& g = b.phi.grid();
  if (radii.size() < 4)
    throw ConfigError("holefilling_fit: need at least 4 radii");
  for (double r : radii)
    if (r <= 0.0 || r > 0.5 * g.L * (1.0 + 1e-12))
      throw ConfigError("holefilling_fit: radii must lie in (0, L/2]");

  ScalarField e(g);
  for (std::size_t i = 0; i < g.size(); ++i) {
    double s2 = 0.0;
    for (int a = 0; a < g.d; ++a) {
      const double ga = b.xi[a] + b.grad_phi.comp(a)[i];
      s2 += ga * ga;
    }
    e[i] = s2 * (1.0 + std::pow(s2, 0.5 * (b.p - 2.0)));
  }

  HolefillingReport rep;
  rep.radii = radii;
  const std::array<double, 3> origin{0.0, 0.0, 0.0};
  bool positive = true;
  for (double r : radii) {
    const double avg = ball_average(e, origin, r);
    rep.averages.push_back(avg);
    if (avg <= 0.0) positive = false;
  }
  if (!positive) {
    rep.exponent = 0.0;
    rep.delta = static_cast<double>(g.d);
    return rep;
  }
  std::vector<double> lr, la;
  for (std::size_t i = 0; i < radii.size(); ++i) {
    lr.push_back(std::log(radii[i]));
    la.push_back(std::log(rep.averages[i]));
  }
  rep.exponent = -ls_slope(lr, la);
  rep.delta = static_cast<double>(g.d) - rep.exponent;
  return rep;
}

CaccioppoliReport caccioppoli_check(
    const CorrectorBundle& b, const std::vector<double>& radii,
    const std::vector<std::array<double, 3>>& centers) {
  const Grid& g = b.phi.grid();
  if (radii.empty() || centers.empty())
    throw ConfigError("caccioppoli_check: need radii and centers");
  for (double r : radii)
    if (r <= 0.0 || 2.0 * r > 0.5 * g.L * (1.0 + 1e-12))
      throw ConfigError("caccioppoli_check: need 2r <= L/2");

  ScalarField e(g);
  for (std::size_t i = 0; i < g.size(); ++i) {
    double s2 = 0.0;
    for (int a = 0; a < g.d; ++a) {
      const double ga = b.xi[a] + b.grad_phi.comp(a)[i];
      s2 += ga * ga;
    }
    e[i] = s2 * (1.0 + std::pow(s2, 0.5 * (b.p - 2.0)));
  }

  const auto dims = g.dims();
  CaccioppoliReport rep;
  for (const auto& center : centers) {
    for (double r : radii) {
      const double r2 = r * r + 1e-9 * g.h * g.h;
      const double R2 = 4.0 * r * r + 1e-9 * g.h * g.h;
      double lhs_sum = 0.0;
      std::size_t lhs_n = 0;
      std::vector<double> u;  // xi.x + phi on the annulus, unwrapped
      std::size_t idx = 0;
      for (int j0 = 0; j0 < dims[0]; ++j0) {
        const double z0 = g.d > 0 ? g.min_image(g.coord(j0) - center[0]) : 0.0;
        for (int j1 = 0; j1 < dims[1]; ++j1) {
          const double z1 =
              g.d > 1 ? g.min_image(g.coord(j1) - center[1]) : 0.0;
          for (int j2 = 0; j2 < dims[2]; ++j2, ++idx) {
            const double z2 =
                g.d > 2 ? g.min_image(g.coord(j2) - center[2]) : 0.0;
            const double d2 = z0 * z0 + z1 * z1 + z2 * z2;
            if (d2 > R2) continue;
            if (d2 <= r2) {
              lhs_sum += e[idx];
              ++lhs_n;
            } else {
              double lin = b.xi[0] * z0;
              if (g.d > 1) lin += b.xi[1] * z1;
              if (g.d > 2) lin += b.xi[2] * z2;
              u.push_back(lin + b.phi[idx]);
            }
          }
        }
      }
      if (lhs_n == 0 || u.empty()) continue;
      const double lhs = lhs_sum / static_cast<double>(lhs_n);

      const double um = mean_on(u);
      double w = 1.0;
      for (double x : u) w = std::max(w, std::abs(x - um));
      auto objective = [&](double c) {
        double s = 0.0;
        for (double x : u) {
          const double t = std::abs(x - c) / r;
          s += t * t + std::pow(t, b.p);
        }
        return s / static_cast<double>(u.size());
      };
      double lo = um - w, hi = um + w;
      for (int it = 0; it < 200; ++it) {
        const double c1 = lo + (hi - lo) / 3.0;
        const double c2 = hi - (hi - lo) / 3.0;
        if (objective(c1) < objective(c2))
          hi = c2;
        else
          lo = c1;
      }
      const double rhs = objective(0.5 * (lo + hi));

      CaccioppoliEntry entry;
      entry.center = center;
      entry.r = r;
      entry.lhs = lhs;
      entry.rhs = rhs;
      if (rhs > 0.0)
        entry.constant = lhs / rhs;
      else
        entry.constant = lhs > 0.0
                             ? std::numeric_limits<double>::infinity()
                             : 0.0;
      rep.entries.push_back(entry);
      rep.constant = std::max(rep.constant, entry.constant);
    }
  }
  if (rep.entries.empty())
    throw ConfigError("caccioppoli_check: no admissible ball pairs");
  return rep;
}

}  // namespace monohom
