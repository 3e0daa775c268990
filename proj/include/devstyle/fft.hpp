#pragma once

#include <complex>
#include <cstddef>
#include <span>
#include <vector>

namespace devstyle {

// Real <-> half-complex transforms of a fixed size, backed by FFTW.
// Plans are created with FFTW_ESTIMATE so results are bit-reproducible.
class RealFft {
 public:
  explicit RealFft(std::size_t n);
  ~RealFft();
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;
  RealFft(RealFft&&) noexcept;
  RealFft& operator=(RealFft&&) noexcept;

  std::size_t size() const { return n_; }
  std::size_t bins() const { return n_ / 2 + 1; }

  // x.size() == size(); returns bins() coefficients, unnormalized.
  std::vector<std::complex<double>> forward(std::span<const double> x);
  // spec.size() == bins(); returns size() samples, scaled by 1/n.
  std::vector<double> inverse(std::span<const std::complex<double>> spec);

 private:
  void release();

  std::size_t n_ = 0;
  double* real_ = nullptr;
  void* cplx_ = nullptr;
  void* plan_fwd_ = nullptr;
  void* plan_inv_ = nullptr;
};

std::size_t next_pow2(std::size_t n);

// Full linear convolution via FFT; output length a.size() + b.size() - 1.
std::vector<double> fft_convolve(std::span<const double> a, std::span<const double> b);

}  // namespace devstyle
