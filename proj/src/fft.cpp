#include "devstyle/fft.hpp"

#include <fftw3.h>

#include <algorithm>
#include <mutex>
#include <stdexcept>

namespace devstyle {
namespace {
std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace

RealFft::RealFft(std::size_t n) : n_(n) {
  if (n < 2) throw std::invalid_argument("RealFft: size must be >= 2");
  real_ = fftw_alloc_real(n);
  auto* c = fftw_alloc_complex(n / 2 + 1);
  cplx_ = c;
  std::lock_guard lock(planner_mutex());
  plan_fwd_ = fftw_plan_dft_r2c_1d(static_cast<int>(n), real_, c, FFTW_ESTIMATE);
  plan_inv_ = fftw_plan_dft_c2r_1d(static_cast<int>(n), c, real_, FFTW_ESTIMATE);
}

RealFft::~RealFft() { release(); }

RealFft::RealFft(RealFft&& o) noexcept
    : n_(o.n_), real_(o.real_), cplx_(o.cplx_), plan_fwd_(o.plan_fwd_), plan_inv_(o.plan_inv_) {
  o.real_ = nullptr;
  o.cplx_ = nullptr;
  o.plan_fwd_ = o.plan_inv_ = nullptr;
}

RealFft& RealFft::operator=(RealFft&& o) noexcept {
  if (this != &o) {
    release();
    n_ = o.n_;
    real_ = o.real_;
    cplx_ = o.cplx_;
    plan_fwd_ = o.plan_fwd_;
    plan_inv_ = o.plan_inv_;
    o.real_ = nullptr;
    o.cplx_ = nullptr;
    o.plan_fwd_ = o.plan_inv_ = nullptr;
  }
  return *this;
}

void RealFft::release() {
  std::lock_guard lock(planner_mutex());
  if (plan_fwd_) fftw_destroy_plan(static_cast<fftw_plan>(plan_fwd_));
  if (plan_inv_) fftw_destroy_plan(static_cast<fftw_plan>(plan_inv_));
  if (real_) fftw_free(real_);
  if (cplx_) fftw_free(cplx_);
  plan_fwd_ = plan_inv_ = nullptr;
  real_ = nullptr;
  cplx_ = nullptr;
}

std::vector<std::complex<double>> RealFft::forward(std::span<const double> x) {
  if (x.size() != n_) throw std::invalid_argument("RealFft::forward: size mismatch");
  std::copy(x.begin(), x.end(), real_);
  fftw_execute(static_cast<fftw_plan>(plan_fwd_));
  auto* c = static_cast<fftw_complex*>(cplx_);
  std::vector<std::complex<double>> out(bins());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = {c[k][0], c[k][1]};
  return out;
}

std::vector<double> RealFft::inverse(std::span<const std::complex<double>> spec) {
  if (spec.size() != bins()) throw std::invalid_argument("RealFft::inverse: size mismatch");
  auto* c = static_cast<fftw_complex*>(cplx_);
  for (std::size_t k = 0; k < spec.size(); ++k) {
    c[k][0] = spec[k].real();
    c[k][1] = spec[k].imag();
  }
  fftw_execute(static_cast<fftw_plan>(plan_inv_));
  std::vector<double> out(real_, real_ + n_);
  const double scale = 1.0 / static_cast<double>(n_);
  for (auto& v : out) v *= scale;
  return out;
}

std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

std::vector<double> fft_convolve(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) return {};
  const std::size_t out_len = a.size() + b.size() - 1;
  const std::size_t n = std::max<std::size_t>(2, next_pow2(out_len));
  RealFft fft(n);
  std::vector<double> pa(n, 0.0), pb(n, 0.0);
  std::copy(a.begin(), a.end(), pa.begin());
  std::copy(b.begin(), b.end(), pb.begin());
  auto fa = fft.forward(pa);
  const auto fb = fft.forward(pb);
  for (std::size_t k = 0; k < fa.size(); ++k) fa[k] *= fb[k];
  auto out = fft.inverse(fa);
  out.resize(out_len);
  return out;
}

}  // namespace devstyle
