#include "monohom/fft.hpp"

#include <fftw3.h>

#include <cmath>
#include <mutex>

#include "monohom/errors.hpp"

namespace monohom {

namespace {
// FFTW plan creation/destruction is not thread-safe; execution of distinct
// plans on their own buffers is.
std::mutex& plan_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace

Spectral::Spectral(const Grid& g) : g_(g) {
  auto dm = g.dims();
  const int last = g.d - 1;
  std::size_t sn = 1;
  for (int a = 0; a < g.d; ++a)
    sn *= static_cast<std::size_t>(a == last ? g.N / 2 + 1 : g.N);
  spec_n_ = sn;

  {
    std::lock_guard<std::mutex> lock(plan_mutex());
    rbuf_ = fftw_alloc_real(g.size());
    cbuf_ = reinterpret_cast<std::complex<double>*>(fftw_alloc_complex(sn));
    int n[3] = {dm[0], dm[1], dm[2]};
    fwd_ = fftw_plan_dft_r2c(g.d, n, rbuf_,
                             reinterpret_cast<fftw_complex*>(cbuf_),
                             FFTW_ESTIMATE);
    bwd_ = fftw_plan_dft_c2r(g.d, n, reinterpret_cast<fftw_complex*>(cbuf_),
                             rbuf_, FFTW_ESTIMATE);
  }

  // Laplace symbol on the half-spectrum, axis d-1 truncated to N/2+1.
  symbol_.assign(sn, 0.0);
  const double inv_h2 = 1.0 / (g.h * g.h);
  std::array<int, 3> sn_dims = {1, 1, 1};
  for (int a = 0; a < g.d; ++a) sn_dims[a] = (a == last ? g.N / 2 + 1 : g.N);
  std::size_t idx = 0;
  for (int k0 = 0; k0 < sn_dims[0]; ++k0)
    for (int k1 = 0; k1 < sn_dims[1]; ++k1)
      for (int k2 = 0; k2 < sn_dims[2]; ++k2, ++idx) {
        const int ks[3] = {k0, k1, k2};
        double s = 0.0;
        for (int a = 0; a < g.d; ++a)
          s += (2.0 - 2.0 * std::cos(2.0 * M_PI * ks[a] / g.N)) * inv_h2;
        symbol_[idx] = s;
      }
}

Spectral::~Spectral() {
  std::lock_guard<std::mutex> lock(plan_mutex());
  if (fwd_) fftw_destroy_plan(fwd_);
  if (bwd_) fftw_destroy_plan(bwd_);
  if (rbuf_) fftw_free(rbuf_);
  if (cbuf_) fftw_free(cbuf_);
}

void Spectral::forward(const double* in, std::complex<double>* out) {
  std::copy(in, in + g_.size(), rbuf_);
  fftw_execute(fwd_);
  std::copy(cbuf_, cbuf_ + spec_n_, out);
}

void Spectral::inverse(const std::complex<double>* in, double* out) {
  std::copy(in, in + spec_n_, cbuf_);
  fftw_execute(bwd_);
  const double scale = 1.0 / static_cast<double>(g_.size());
  for (std::size_t i = 0; i < g_.size(); ++i) out[i] = rbuf_[i] * scale;
}

void Spectral::poisson(const ScalarField& f, ScalarField& u) {
  if (!f.grid().same_as(g_)) throw ConfigError("poisson: grid mismatch");
  if (!u.grid().same_as(g_)) u = ScalarField(g_);
  std::vector<std::complex<double>> spec(spec_n_);
  forward(f.data(), spec.data());
  spec[0] = 0.0;
  for (std::size_t i = 1; i < spec_n_; ++i) spec[i] /= symbol_[i];
  inverse(spec.data(), u.data());
}

void Spectral::inverse_scaled_laplacian(double m, const ScalarField& f,
                                        ScalarField& u) {
  if (!(m > 0.0)) throw ConfigError("preconditioner: scale must be positive");
  if (!u.grid().same_as(g_)) u = ScalarField(g_);
  std::vector<std::complex<double>> spec(spec_n_);
  forward(f.data(), spec.data());
  spec[0] = 0.0;
  for (std::size_t i = 1; i < spec_n_; ++i) spec[i] /= (m * symbol_[i]);
  inverse(spec.data(), u.data());
}

void Spectral::convolve(const ScalarField& f, const ScalarField& kernel,
                        ScalarField& out) {
  if (!out.grid().same_as(g_)) out = ScalarField(g_);
  std::vector<std::complex<double>> sf(spec_n_), sk(spec_n_);
  forward(f.data(), sf.data());
  forward(kernel.data(), sk.data());
  for (std::size_t i = 0; i < spec_n_; ++i) sf[i] *= sk[i];
  inverse(sf.data(), out.data());
}

void Spectral::apply_multiplier(const ScalarField& f,
                                const std::vector<double>& factor,
                                ScalarField& out) {
  if (!out.grid().same_as(g_)) out = ScalarField(g_);
  std::vector<std::complex<double>> spec(spec_n_);
  forward(f.data(), spec.data());
  for (std::size_t i = 0; i < spec_n_; ++i) spec[i] *= factor[i];
  inverse(spec.data(), out.data());
}

std::vector<std::complex<double>> Spectral::spectrum(const ScalarField& f) {
  std::vector<std::complex<double>> spec(spec_n_);
  forward(f.data(), spec.data());
  return spec;
}

}  // namespace monohom
