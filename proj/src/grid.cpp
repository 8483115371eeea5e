#include "monohom/grid.hpp"

#include <algorithm>
#include <cmath>

#include "monohom/errors.hpp"

namespace monohom {

Grid make_grid(int d, double L, int N) {
  if (d < 1 || d > 3) throw ConfigError("grid: d must be 1, 2 or 3");
  if (N < 4) throw ConfigError("grid: N must be at least 4");
  if (N % 2 != 0) throw ConfigError("grid: N must be even");
  if (!(L > 0.0)) throw ConfigError("grid: L must be positive");
  Grid g;
  g.d = d;
  g.N = N;
  g.L = L;
  g.h = L / N;
  return g;
}

namespace {

struct LoopGeom {
  std::array<int, 3> n;
  std::array<std::ptrdiff_t, 3> stride;
  explicit LoopGeom(const Grid& g) {
    auto dm = g.dims();
    n = dm;
    stride = {static_cast<std::ptrdiff_t>(dm[1]) * dm[2], dm[2], 1};
  }
};

}  // namespace

VectorField gradient(const ScalarField& u) {
  const Grid& g = u.grid();
  VectorField out(g);
  LoopGeom lg(g);
  const double inv_h = 1.0 / g.h;
  const double* uv = u.data();
  for (int axis = 0; axis < g.d; ++axis) {
    double* gv = out.comp(axis).data();
    const std::ptrdiff_t s = lg.stride[axis];
    const std::ptrdiff_t wrap = s * lg.n[axis];
    std::size_t idx = 0;
    for (int i0 = 0; i0 < lg.n[0]; ++i0)
      for (int i1 = 0; i1 < lg.n[1]; ++i1)
        for (int i2 = 0; i2 < lg.n[2]; ++i2, ++idx) {
          const int ia = (axis == 0 ? i0 : axis == 1 ? i1 : i2);
          const std::ptrdiff_t up =
              (ia == lg.n[axis] - 1) ? idx + s - wrap : idx + s;
          gv[idx] = (uv[up] - uv[idx]) * inv_h;
        }
  }
  return out;
}

ScalarField divergence(const VectorField& F) {
  const Grid& g = F.grid();
  ScalarField out(g);
  LoopGeom lg(g);
  const double inv_h = 1.0 / g.h;
  double* ov = out.data();
  for (int axis = 0; axis < g.d; ++axis) {
    const double* fv = F.comp(axis).data();
    const std::ptrdiff_t s = lg.stride[axis];
    const std::ptrdiff_t wrap = s * lg.n[axis];
    std::size_t idx = 0;
    for (int i0 = 0; i0 < lg.n[0]; ++i0)
      for (int i1 = 0; i1 < lg.n[1]; ++i1)
        for (int i2 = 0; i2 < lg.n[2]; ++i2, ++idx) {
          const int ia = (axis == 0 ? i0 : axis == 1 ? i1 : i2);
          const std::ptrdiff_t dn =
              (ia == 0) ? idx - s + wrap : idx - s;
          ov[idx] += (fv[idx] - fv[dn]) * inv_h;
        }
  }
  return out;
}

VectorField matrix_divergence(const MatrixField& S) {
  const Grid& g = S.grid();
  VectorField out(g);
  for (int i = 0; i < g.d; ++i) {
    VectorField row(g);
    for (int j = 0; j < g.d; ++j) row.comp(j) = S.comp(i, j);
    ScalarField di = divergence(row);
    out.comp(i) = di.values();
  }
  return out;
}

double ball_average(const ScalarField& f, const std::array<double, 3>& center,
                    double r) {
  const Grid& g = f.grid();
  if (r < 0.0) throw ConfigError("ball_average: radius must be nonnegative");
  if (r > 0.5 * g.L)
    throw ConfigError("ball_average: radius exceeds L/2");
  LoopGeom lg(g);
  const double tol = 1e-9 * g.h * g.h;
  const double r2 = r * r + tol;

  // Enumerate the unwrapped index window [c - r - h, c + r + h] per axis,
  // clamped to at most N residues so every lattice point appears once.
  std::array<int, 3> lo{0, 0, 0}, hi{0, 0, 0};
  for (int a = 0; a < 3; ++a) {
    if (a < g.d) {
      lo[a] = static_cast<int>(std::floor((center[a] - r + 0.5 * g.L) / g.h)) - 1;
      hi[a] = static_cast<int>(std::ceil((center[a] + r + 0.5 * g.L) / g.h)) + 1;
      if (hi[a] - lo[a] + 1 > g.N) hi[a] = lo[a] + g.N - 1;
    }
  }

  // Displacements go through min_image so that when the window is clamped
  // to N residues the true (minimal) periodic distance is still used.
  double sum = 0.0;
  std::size_t count = 0;
  for (int j0 = lo[0]; j0 <= hi[0]; ++j0) {
    const double dx0 =
        g.d > 0 ? g.min_image(g.coord(0) + g.h * j0 - center[0]) : 0.0;
    for (int j1 = lo[1]; j1 <= hi[1]; ++j1) {
      const double dx1 =
          g.d > 1 ? g.min_image(g.coord(0) + g.h * j1 - center[1]) : 0.0;
      for (int j2 = lo[2]; j2 <= hi[2]; ++j2) {
        const double dx2 =
            g.d > 2 ? g.min_image(g.coord(0) + g.h * j2 - center[2]) : 0.0;
        const double d2 = dx0 * dx0 + dx1 * dx1 + dx2 * dx2;
        if (d2 > r2) continue;
        const int w0 = ((j0 % g.N) + g.N) % g.N;
        const int w1 = g.d > 1 ? ((j1 % g.N) + g.N) % g.N : 0;
        const int w2 = g.d > 2 ? ((j2 % g.N) + g.N) % g.N : 0;
        sum += f[w0 * lg.stride[0] + w1 * lg.stride[1] + w2 * lg.stride[2]];
        ++count;
      }
    }
  }
  if (count == 0) {
    std::array<int, 3> jn{0, 0, 0};
    for (int a = 0; a < g.d; ++a) {
      int j = static_cast<int>(std::lround((center[a] + 0.5 * g.L) / g.h));
      jn[a] = ((j % g.N) + g.N) % g.N;
    }
    return f[jn[0] * lg.stride[0] + jn[1] * lg.stride[1] +
             jn[2] * lg.stride[2]];
  }
  return sum / static_cast<double>(count);
}

double mean(const ScalarField& f) {
  double s = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) s += f[i];
  return s / static_cast<double>(f.size());
}

double dot(const ScalarField& a, const ScalarField& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double dot(const VectorField& a, const VectorField& b) {
  double s = 0.0;
  for (int c = 0; c < a.grid().d; ++c) {
    const auto& av = a.comp(c);
    const auto& bv = b.comp(c);
    for (std::size_t i = 0; i < av.size(); ++i) s += av[i] * bv[i];
  }
  return s;
}

double rms(const ScalarField& f) {
  return std::sqrt(dot(f, f) / static_cast<double>(f.size()));
}

double rms(const VectorField& F) {
  return std::sqrt(dot(F, F) / static_cast<double>(F.size()));
}

void remove_mean(ScalarField& f) {
  const double m = mean(f);
  for (std::size_t i = 0; i < f.size(); ++i) f[i] -= m;
}

}  // namespace monohom
