#include "monohom/solver.hpp"

#include <chrono>
#include <cmath>
#include <limits>

#include "monohom/errors.hpp"

namespace monohom {

namespace {

double now_seconds() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

// flux_i = sum_j K_ij dG_j (or K_ji when transposed), pointwise.
void coef_times(const MatrixField& K, bool transpose, const VectorField& G,
                VectorField& flux) {
  const Grid& g = K.grid();
  if (!flux.grid().same_as(g)) flux = VectorField(g);
  for (int i = 0; i < g.d; ++i) {
    auto& out = flux.comp(i);
    std::fill(out.begin(), out.end(), 0.0);
    for (int j = 0; j < g.d; ++j) {
      const auto& kij = transpose ? K.comp(j, i) : K.comp(i, j);
      const auto& gj = G.comp(j);
      for (std::size_t x = 0; x < g.size(); ++x) out[x] += kij[x] * gj[x];
    }
  }
}

double mean_trace_over_d(const MatrixField& K) {
  const Grid& g = K.grid();
  double s = 0.0;
  for (int i = 0; i < g.d; ++i)
    for (std::size_t x = 0; x < g.size(); ++x) s += K.comp(i, i)[x];
  return s / (static_cast<double>(g.size()) * g.d);
}

bool pointwise_symmetric(const MatrixField& K, double tol = 1e-14) {
  const Grid& g = K.grid();
  for (int i = 0; i < g.d; ++i)
    for (int j = i + 1; j < g.d; ++j) {
      const auto& a = K.comp(i, j);
      const auto& b = K.comp(j, i);
      for (std::size_t x = 0; x < g.size(); ++x)
        if (std::abs(a[x] - b[x]) > tol) return false;
    }
  return true;
}

void axpy(double a, const ScalarField& x, ScalarField& y) {
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += a * x[i];
}

}  // namespace

ScalarField apply_divform(const MatrixField& K, bool transpose,
                          const ScalarField& u) {
  VectorField flux;
  coef_times(K, transpose, gradient(u), flux);
  ScalarField out = divergence(flux);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = -out[i];
  return out;
}

ScalarField solve_poisson(Spectral& ws, const ScalarField& rhs) {
  const double r = rms(rhs);
  if (std::abs(mean(rhs)) > 1e-12 * std::max(1e-300, r))
    throw ConfigError("solve_poisson: rhs has nonzero mean on the torus");
  ScalarField u(rhs.grid());
  ws.poisson(rhs, u);
  return u;
}

ScalarField solve_poisson(const ScalarField& rhs) {
  Spectral ws(rhs.grid());
  return solve_poisson(ws, rhs);
}

namespace {

// Shared state for the Krylov loops: the operator, preconditioner and
// scratch fields.
struct KrylovCtx {
  const MatrixField& K;
  bool transpose;
  Spectral& ws;
  double m_bar;
  VectorField grad_buf, flux_buf;

  explicit KrylovCtx(const MatrixField& K_, bool tr, Spectral& ws_)
      : K(K_), transpose(tr), ws(ws_), m_bar(mean_trace_over_d(K_)) {
    if (!(m_bar > 0.0))
      throw ConfigError("solve_linear: coefficient trace mean not positive");
  }

  void apply(const ScalarField& u, ScalarField& out) {
    grad_buf = gradient(u);
    coef_times(K, transpose, grad_buf, flux_buf);
    out = divergence(flux_buf);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = -out[i];
  }
  void precondition(const ScalarField& r, ScalarField& z) {
    ws.inverse_scaled_laplacian(m_bar, r, z);
  }
};

std::pair<ScalarField, SolveStats> pcg(KrylovCtx& ctx, const ScalarField& b,
                                       const LinearOpts& opts,
                                       double norm_b) {
  const Grid& g = b.grid();
  ScalarField u(g), r = b, z(g), p(g), q(g);
  ctx.precondition(r, z);
  p = z;
  double rz = dot(r, z);
  SolveStats st;
  double last_cert = std::numeric_limits<double>::infinity();
  const double t0 = now_seconds();
  while (st.iterations < opts.max_iter) {
    ctx.apply(p, q);
    const double pq = dot(p, q);
    if (!(pq > 0.0))
      throw SolverError("pcg: operator not positive on Krylov direction",
                        rms(r) / norm_b, st.iterations);
    const double alpha = rz / pq;
    axpy(alpha, p, u);
    axpy(-alpha, q, r);
    ++st.iterations;
    if (rms(r) <= 0.5 * opts.tol * norm_b) {
      // Certificate: recompute the residual from scratch.
      ctx.apply(u, q);
      ScalarField rt = b;
      axpy(-1.0, q, rt);
      st.rel_residual = rms(rt) / norm_b;
      if (st.rel_residual <= opts.tol) {
        remove_mean(u);
        st.seconds = now_seconds() - t0;
        return {std::move(u), st};
      }
      // The recursive residual drifted from the true one (roundoff).  Keep
      // going from the true residual, but only with a full restart of the
      // Krylov state: mixing a replaced residual with the stale direction
      // destroys conjugacy and can diverge.  No progress between two
      // consecutive certificates means the roundoff floor is above tol.
      if (st.rel_residual >= 0.99 * last_cert)
        throw SolverError("pcg: residual stagnated above tol",
                          st.rel_residual, st.iterations);
      last_cert = st.rel_residual;
      r = std::move(rt);
      ctx.precondition(r, z);
      p = z;
      rz = dot(r, z);
      continue;
    }
    ctx.precondition(r, z);
    const double rz_new = dot(r, z);
    const double beta = rz_new / rz;
    rz = rz_new;
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = z[i] + beta * p[i];
  }
  ctx.apply(u, q);
  ScalarField rt = b;
  axpy(-1.0, q, rt);
  throw SolverError("pcg: no convergence within max_iter", rms(rt) / norm_b,
                    st.iterations);
}

std::pair<ScalarField, SolveStats> bicgstab(KrylovCtx& ctx,
                                            const ScalarField& b,
                                            const LinearOpts& opts,
                                            double norm_b) {
  const Grid& g = b.grid();
  ScalarField u(g), r = b, rhat = b, p(g), v(g), s(g), t(g), phat(g), shat(g);
  double rho = 1.0, alpha = 1.0, omega = 1.0;
  SolveStats st;
  int restarts = 0;
  bool fresh = true;
  double last_cert = std::numeric_limits<double>::infinity();
  const double t0 = now_seconds();
  while (st.iterations < opts.max_iter) {
    const double rho1 = dot(rhat, r);
    if (std::abs(rho1) < 1e-60) {
      if (++restarts > 3)
        throw SolverError("bicgstab: repeated breakdown", rms(r) / norm_b,
                          st.iterations);
      rhat = r;
      p = r;
      rho = dot(rhat, r);
      omega = alpha = 1.0;
      std::fill(v.values().begin(), v.values().end(), 0.0);
      continue;
    }
    if (fresh) {
      p = r;
      fresh = false;
    } else {
      const double beta = (rho1 / rho) * (alpha / omega);
      for (std::size_t i = 0; i < p.size(); ++i)
        p[i] = r[i] + beta * (p[i] - omega * v[i]);
    }
    rho = rho1;
    ctx.precondition(p, phat);
    ctx.apply(phat, v);
    alpha = rho1 / dot(rhat, v);
    s = r;
    axpy(-alpha, v, s);
    ++st.iterations;
    if (rms(s) <= 0.5 * opts.tol * norm_b) {
      axpy(alpha, phat, u);
      r = s;
    } else {
      ctx.precondition(s, shat);
      ctx.apply(shat, t);
      const double tt = dot(t, t);
      if (!(tt > 0.0))
        throw SolverError("bicgstab: stagnation (t = 0)", rms(s) / norm_b,
                          st.iterations);
      omega = dot(t, s) / tt;
      axpy(alpha, phat, u);
      axpy(omega, shat, u);
      r = s;
      axpy(-omega, t, r);
    }
    if (rms(r) <= 0.5 * opts.tol * norm_b) {
      ctx.apply(u, t);
      ScalarField rt = b;
      axpy(-1.0, t, rt);
      st.rel_residual = rms(rt) / norm_b;
      if (st.rel_residual <= opts.tol) {
        remove_mean(u);
        st.seconds = now_seconds() - t0;
        return {std::move(u), st};
      }
      if (st.rel_residual >= 0.99 * last_cert)
        throw SolverError("bicgstab: residual stagnated above tol",
                          st.rel_residual, st.iterations);
      last_cert = st.rel_residual;
      r = std::move(rt);
      rhat = r;
      rho = alpha = omega = 1.0;
      fresh = true;
    }
  }
  ctx.apply(u, t);
  ScalarField rt = b;
  axpy(-1.0, t, rt);
  throw SolverError("bicgstab: no convergence within max_iter",
                    rms(rt) / norm_b, st.iterations);
}

}  // namespace

std::pair<ScalarField, SolveStats> solve_linear(Spectral& ws,
                                                const MatrixField& K,
                                                const VectorField& g,
                                                const LinearOpts& opts) {
  if (!K.grid().same_as(g.grid()) || !K.grid().same_as(ws.grid()))
    throw ConfigError("solve_linear: grid mismatch");
  ScalarField b = divergence(g);
  remove_mean(b);  // roundoff hygiene; the exact mean is zero by telescoping
  const double norm_b = rms(b);
  if (norm_b == 0.0) {
    SolveStats st;
    return {ScalarField(K.grid()), st};
  }
  KrylovCtx ctx(K, opts.transpose, ws);
  if (pointwise_symmetric(K)) return pcg(ctx, b, opts, norm_b);
  return bicgstab(ctx, b, opts, norm_b);
}

std::pair<ScalarField, SolveStats> solve_linear(const MatrixField& K,
                                                const VectorField& g,
                                                const LinearOpts& opts) {
  Spectral ws(K.grid());
  return solve_linear(ws, K, g, opts);
}

namespace {

// Flux and tangent of the monotone map with a switchable affine base:
// base = 1 is the standard operator, base = 0 the pure p-growth diagnostic.
void assemble_flux(const MatrixField& A, double p, double base,
                   const Vec& offset, const VectorField& G,
                   VectorField& flux) {
  const Grid& g = A.grid();
  if (!flux.grid().same_as(g)) flux = VectorField(g);
  const int d = g.d;
  for (std::size_t x = 0; x < g.size(); ++x) {
    double t2 = 0.0;
    double xi[3];
    for (int i = 0; i < d; ++i) {
      xi[i] = offset[i] + G.comp(i)[x];
      t2 += xi[i] * xi[i];
    }
    const double f = base + std::pow(std::sqrt(t2), p - 2.0);
    for (int i = 0; i < d; ++i) {
      double s = 0.0;
      for (int j = 0; j < d; ++j) s += A.comp(i, j)[x] * xi[j];
      flux.comp(i)[x] = f * s;
    }
  }
}

void assemble_tangent(const MatrixField& A, double p, double base,
                      const Vec& offset, const VectorField& G,
                      MatrixField& K) {
  const Grid& g = A.grid();
  if (!K.grid().same_as(g)) K = MatrixField(g);
  const int d = g.d;
  for (std::size_t x = 0; x < g.size(); ++x) {
    Vec xi = Vec::zero(d);
    for (int i = 0; i < d; ++i) xi[i] = offset[i] + G.comp(i)[x];
    const double t = xi.norm();
    const double f = base + std::pow(t, p - 2.0);
    Mat M = Mat::scaled_identity(d, f);
    if (t > 0.0 && p > 2.0) {
      const double c = (p - 2.0) * std::pow(t, p - 2.0);
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) M(i, j) += c * (xi[i] / t) * (xi[j] / t);
    }
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) {
        double s = 0.0;
        for (int k = 0; k < d; ++k) s += A.comp(i, k)[x] * M(k, j);
        K.comp(i, j)[x] = s;
      }
  }
}

double energy_of(const MatrixField& A, double p, double base,
                 const Vec& offset, const VectorField& G) {
  double s = 0.0;
  for (std::size_t x = 0; x < A.size(); ++x) {
    double t2 = 0.0;
    for (int i = 0; i < A.grid().d; ++i) {
      const double c = offset[i] + G.comp(i)[x];
      t2 += c * c;
    }
    const double t = std::sqrt(t2);
    s += A.comp(0, 0)[x] * (base * 0.5 * t2 + std::pow(t, p) / p);
  }
  return s / static_cast<double>(A.size());
}

// Nonlinear residual field R(phi) = div(a(x, xi + grad phi) + F).
ScalarField nonlinear_residual(const MatrixField& A, double p, double base,
                               const Vec& xi, const VectorField* F,
                               const ScalarField& phi, VectorField& grad_buf,
                               VectorField& flux_buf) {
  grad_buf = gradient(phi);
  assemble_flux(A, p, base, xi, grad_buf, flux_buf);
  if (F) {
    for (int i = 0; i < A.grid().d; ++i) {
      const auto& fi = F->comp(i);
      auto& qi = flux_buf.comp(i);
      for (std::size_t x = 0; x < qi.size(); ++x) qi[x] += fi[x];
    }
  }
  return divergence(flux_buf);
}

}  // namespace

std::pair<ScalarField, SolveStats> solve_nonlinear(
    Spectral& ws, const MatrixField& A, double p, const Vec& xi,
    const NonlinearOpts& opts, const VectorField* F,
    const ScalarField* initial) {
  const Grid& g = A.grid();
  if (xi.d != g.d) throw ConfigError("solve_nonlinear: slope dimension");
  if (!(p >= 2.0)) throw ConfigError("solve_nonlinear: requires p >= 2");
  const double base = opts.pure_p_growth ? 0.0 : 1.0;
  const double t0 = now_seconds();

  SolveStats st;
  VectorField grad_buf(g), flux_buf(g);
  const bool scalar_energy = opts.track_energy && is_scalar_field(A);

  // Residual scale: the zero state.  A vanishing scale means the zero state
  // already solves the problem exactly.
  ScalarField phi(g);
  ScalarField r0 = nonlinear_residual(A, p, base, xi, F, phi, grad_buf,
                                      flux_buf);
  const double denom = rms(r0);

  // A vanishing scale also means any initial guess must be discarded: the
  // zero state is the exact (mean-free) solution.
  const bool use_initial = initial && denom > 0.0;
  if (initial && !initial->grid().same_as(g))
    throw ConfigError("solve_nonlinear: initial guess grid mismatch");
  if (use_initial) {
    phi = *initial;
    remove_mean(phi);
  }

  ScalarField R = use_initial ? nonlinear_residual(A, p, base, xi, F, phi,
                                                   grad_buf, flux_buf)
                              : r0;
  double res = rms(R);
  if (scalar_energy)
    st.energy_history.push_back(energy_of(A, p, base, xi, grad_buf));

  LinearOpts lin;
  lin.max_iter = opts.max_krylov;

  while (true) {
    st.rel_residual = denom > 0.0 ? res / denom : 0.0;
    if (res == 0.0 || st.rel_residual <= opts.tol) break;
    if (st.iterations >= opts.max_newton)
      throw SolverError("newton: no convergence within max_newton",
                        st.rel_residual, st.iterations);

    // Linear correction: -div(K grad delta) = div(q + F) = R, i.e. the
    // divergence-form solve with flux right-hand side q + F.
    MatrixField K;
    assemble_tangent(A, p, base, xi, grad_buf, K);
    lin.tol = std::max(0.1 * opts.tol, 1e-14);
    auto [delta, lin_st] = solve_linear(ws, K, flux_buf, lin);
    st.krylov_total += lin_st.iterations;

    // Backtracking on the nonlinear residual norm, halving with a floor.
    double step = 1.0;
    bool accepted = false;
    ScalarField trial(g);
    while (step >= 1e-4) {
      trial = phi;
      axpy(step, delta, trial);
      ScalarField Rt = nonlinear_residual(A, p, base, xi, F, trial, grad_buf,
                                          flux_buf);
      const double res_t = rms(Rt);
      if (res_t < res * (1.0 - 1e-4 * step)) {
        phi = std::move(trial);
        R = std::move(Rt);
        res = res_t;
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted)
      throw SolverError("newton: line search stagnated",
                        denom > 0.0 ? res / denom : 0.0, st.iterations);
    ++st.iterations;
    st.newton_steps.push_back(step);
    if (scalar_energy)
      st.energy_history.push_back(energy_of(A, p, base, xi, grad_buf));
  }

  remove_mean(phi);
  st.seconds = now_seconds() - t0;
  return {std::move(phi), st};
}

std::pair<ScalarField, SolveStats> solve_nonlinear(
    const MatrixField& A, double p, const Vec& xi, const NonlinearOpts& opts,
    const VectorField* F, const ScalarField* initial) {
  Spectral ws(A.grid());
  return solve_nonlinear(ws, A, p, xi, opts, F, initial);
}

}  // namespace monohom
