#include "monohom/corrector.hpp"

#include <cmath>

#include "monohom/errors.hpp"
#include "monohom/parallel.hpp"
#include "monohom/rng.hpp"

namespace monohom {

namespace {

double l2_norm(const VectorField& F) {
  double s = 0.0;
  for (int i = 0; i < F.grid().d; ++i)
    for (double v : F.comp(i)) s += v * v;
  return std::sqrt(s);
}

double mean_of_vec(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

Vec field_mean(const VectorField& F) {
  Vec m = Vec::zero(F.grid().d);
  for (int i = 0; i < F.grid().d; ++i) m[i] = mean_of_vec(F.comp(i));
  return m;
}

// Skew flux corrector for any flux field: sigma_ij solves
//   -lap sigma_ij = d_j q_i - d_i q_j   (forward differences),
// so that the backward row-divergence telescopes to q - mean(q) plus a
// multiple of the flux divergence, which vanishes at solver tolerance.
void build_sigma(Spectral& ws, const VectorField& q, const Vec& qbar,
                 double tol, MatrixField& sigma, double& recorded) {
  const Grid& g = q.grid();
  sigma = MatrixField(g);
  if (g.d == 1) {
    recorded = 0.0;
    return;
  }
  std::vector<VectorField> dq;
  dq.reserve(g.d);
  for (int i = 0; i < g.d; ++i) {
    ScalarField qi(g);
    qi.values() = q.comp(i);
    dq.push_back(gradient(qi));
  }
  for (int i = 0; i < g.d; ++i)
    for (int j = i + 1; j < g.d; ++j) {
      ScalarField rhs(g);
      for (std::size_t x = 0; x < g.size(); ++x)
        rhs[x] = dq[j].comp(i)[x] - dq[i].comp(j)[x];
      remove_mean(rhs);
      ScalarField s(g);
      ws.poisson(rhs, s);
      sigma.comp(i, j) = s.values();
      for (std::size_t x = 0; x < g.size(); ++x)
        sigma.comp(j, i)[x] = -s[x];
    }

  const VectorField div_sig = matrix_divergence(sigma);
  double r2 = 0.0;
  for (int i = 0; i < g.d; ++i)
    for (std::size_t x = 0; x < g.size(); ++x) {
      const double d = div_sig.comp(i)[x] - (q.comp(i)[x] - qbar[i]);
      r2 += d * d;
    }
  const double qn = l2_norm(q);
  recorded = std::sqrt(r2) / std::max(qn, 1e-300);
  if (recorded > 100.0 * tol)
    throw InvariantError(
        "flux corrector: divergence identity residual exceeds 100x tol");
}

}  // namespace

CorrectorBundle solve_corrector(Spectral& ws, const OperatorSpec& spec,
                                const Vec& xi, const NonlinearOpts& opts,
                                const ScalarField* initial) {
  const Grid& g = spec.A.grid();
  CorrectorBundle b;
  b.xi = xi;
  b.p = spec.p;
  b.solve_tol = opts.tol;
  auto [phi, st] = solve_nonlinear(ws, spec.A, spec.p, xi, opts, nullptr, initial);
  b.phi = std::move(phi);
  b.stats = std::move(st);
  b.grad_phi = gradient(b.phi);
  eval_flux(spec.A, spec.p, xi, b.grad_phi, b.q);
  b.abar_sample = field_mean(b.q);
  b.mu = ScalarField(g);
  for (std::size_t x = 0; x < g.size(); ++x) {
    double t2 = 0.0;
    for (int i = 0; i < g.d; ++i) {
      const double c = xi[i] + b.grad_phi.comp(i)[x];
      t2 += c * c;
    }
    b.mu[x] = 1.0 + std::pow(std::sqrt(t2), spec.p - 2.0);
  }
  b.sigma = MatrixField(g);
  return b;
}

CorrectorBundle solve_corrector(const OperatorSpec& spec, const Vec& xi,
                                const NonlinearOpts& opts,
                                const ScalarField* initial) {
  Spectral ws(spec.A.grid());
  return solve_corrector(ws, spec, xi, opts, initial);
}

CorrectorBundle& solve_flux_corrector(Spectral& ws, CorrectorBundle& bundle) {
  build_sigma(ws, bundle.q, bundle.abar_sample, bundle.solve_tol,
              bundle.sigma, bundle.divsig_residual);
  bundle.sigma_solved = true;
  return bundle;
}

CorrectorBundle& solve_flux_corrector(CorrectorBundle& bundle) {
  Spectral ws(bundle.q.grid());
  return solve_flux_corrector(ws, bundle);
}

LinearizedBundle solve_linearized(Spectral& ws, const OperatorSpec& spec,
                                  const CorrectorBundle& bundle, const Vec& e,
                                  const LinearOpts& opts) {
  const Grid& g = spec.A.grid();
  if (e.d != g.d || std::abs(e.norm() - 1.0) > 1e-12)
    throw ConfigError("solve_linearized: direction must be a unit vector");
  if (!bundle.phi.grid().same_as(g))
    throw ConfigError("solve_linearized: bundle was solved on another grid");
  LinearizedBundle lb;
  lb.e = e;
  eval_tangent_field(spec.A, spec.p, bundle.xi, bundle.grad_phi, lb.a_xi);

  VectorField rhs(g);
  for (int i = 0; i < g.d; ++i)
    for (std::size_t x = 0; x < g.size(); ++x) {
      double s = 0.0;
      for (int j = 0; j < g.d; ++j) s += lb.a_xi.comp(i, j)[x] * e[j];
      rhs.comp(i)[x] = s;
    }
  auto [phi, st] = solve_linear(ws, lb.a_xi, rhs, opts);
  lb.phi = std::move(phi);
  lb.stats = std::move(st);
  lb.grad_phi = gradient(lb.phi);

  lb.q = VectorField(g);
  for (int i = 0; i < g.d; ++i)
    for (std::size_t x = 0; x < g.size(); ++x) {
      double s = 0.0;
      for (int j = 0; j < g.d; ++j)
        s += lb.a_xi.comp(i, j)[x] * (e[j] + lb.grad_phi.comp(j)[x]);
      lb.q.comp(i)[x] = s;
    }
  lb.tangent_row = field_mean(lb.q);
  build_sigma(ws, lb.q, lb.tangent_row, opts.tol, lb.sigma,
              lb.divsig_residual);
  lb.sigma_solved = true;

  double we = 0.0;
  for (std::size_t x = 0; x < g.size(); ++x) {
    double g2 = 0.0;
    for (int i = 0; i < g.d; ++i)
      g2 += lb.grad_phi.comp(i)[x] * lb.grad_phi.comp(i)[x];
    we += g2 * bundle.mu[x];
  }
  lb.weighted_energy = we / static_cast<double>(g.size());
  return lb;
}

LinearizedBundle solve_linearized(const OperatorSpec& spec,
                                  const CorrectorBundle& bundle, const Vec& e,
                                  const LinearOpts& opts) {
  Spectral ws(spec.A.grid());
  return solve_linearized(ws, spec, bundle, e, opts);
}

namespace {

// Shared Monte-Carlo scaffolding: runs job(k, sampler, ws) over sample
// indices in parallel; a SolverError from a sample marks it failed, anything
// else propagates.  Jobs write results to per-index slots.
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

}  // namespace

MapEstimate homogenized_map(const EnsembleSpec& es, const Vec& xi,
                            int sample_count, std::uint64_t seed,
                            const NonlinearOpts& opts) {
  const int d = es.grid.d;
  std::vector<Vec> rows(sample_count, Vec::zero(d));
  OperatorSpec base;
  base.p = es.p;
  base.lambda = es.recipe.lambda;
  MapEstimate out;
  out.failed = run_samples(es, sample_count,
                           [&](int k, CoefficientSampler& sampler,
                               Spectral& ws) {
                             OperatorSpec spec = base;
                             spec.A = sampler.sample(
                                 {seed, static_cast<std::uint64_t>(k)});
                             rows[k] = solve_corrector(ws, spec, xi, opts)
                                           .abar_sample;
                           });
  out.value = Vec::zero(d);
  out.se = Vec::zero(d);
  std::vector<char> ok(sample_count, 1);
  for (int k : out.failed) ok[k] = 0;
  int n = 0;
  for (int k = 0; k < sample_count; ++k)
    if (ok[k]) {
      ++n;
      for (int i = 0; i < d; ++i) out.value[i] += rows[k][i];
    }
  if (n == 0)
    throw SolverError("homogenized_map: every sample failed", 0.0, 0);
  for (int i = 0; i < d; ++i) out.value[i] /= n;
  if (n >= 2) {
    Vec var = Vec::zero(d);
    for (int k = 0; k < sample_count; ++k)
      if (ok[k])
        for (int i = 0; i < d; ++i) {
          const double c = rows[k][i] - out.value[i];
          var[i] += c * c;
        }
    for (int i = 0; i < d; ++i)
      out.se[i] = std::sqrt(var[i] / (n - 1) / n);
  }
  out.samples_ok = n;
  return out;
}

TangentEstimate homogenized_tangent(const EnsembleSpec& es, const Vec& xi,
                                    int sample_count, std::uint64_t seed,
                                    const NonlinearOpts& opts) {
  const int d = es.grid.d;
  std::vector<Mat> rows(sample_count, Mat::zero(d));
  OperatorSpec base;
  base.p = es.p;
  base.lambda = es.recipe.lambda;
  LinearOpts lin;
  lin.tol = opts.tol;
  lin.max_iter = opts.max_krylov;
  TangentEstimate out;
  out.failed = run_samples(
      es, sample_count,
      [&](int k, CoefficientSampler& sampler, Spectral& ws) {
        OperatorSpec spec = base;
        spec.A = sampler.sample({seed, static_cast<std::uint64_t>(k)});
        const CorrectorBundle b = solve_corrector(ws, spec, xi, opts);
        for (int j = 0; j < d; ++j) {
          const LinearizedBundle lb =
              solve_linearized(ws, spec, b, Vec::basis(d, j), lin);
          for (int i = 0; i < d; ++i) rows[k](i, j) = lb.tangent_row[i];
        }
      });
  out.value = Mat::zero(d);
  out.se = Mat::zero(d);
  std::vector<char> ok(sample_count, 1);
  for (int k : out.failed) ok[k] = 0;
  int n = 0;
  for (int k = 0; k < sample_count; ++k)
    if (ok[k]) {
      ++n;
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) out.value(i, j) += rows[k](i, j);
    }
  if (n == 0)
    throw SolverError("homogenized_tangent: every sample failed", 0.0, 0);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) out.value(i, j) /= n;
  if (n >= 2) {
    Mat var = Mat::zero(d);
    for (int k = 0; k < sample_count; ++k)
      if (ok[k])
        for (int i = 0; i < d; ++i)
          for (int j = 0; j < d; ++j) {
            const double c = rows[k](i, j) - out.value(i, j);
            var(i, j) += c * c;
          }
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j)
        out.se(i, j) = std::sqrt(var(i, j) / (n - 1) / n);
  }
  out.samples_ok = n;
  return out;
}

}  // namespace monohom
