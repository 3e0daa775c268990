#pragma once

#include <cstddef>
#include <vector>

namespace devstyle {

inline constexpr int kDefaultSampleRate = 44100;
inline constexpr std::size_t kMaxFirTaps = 8192;

// Causal FIR filter; taps[0] multiplies the current sample.
struct FirFilter {
  std::vector<double> taps;
  int sample_rate_hz = kDefaultSampleRate;

  // Throws std::invalid_argument when taps are empty, non-finite or too long.
  void validate() const;
};

}  // namespace devstyle
