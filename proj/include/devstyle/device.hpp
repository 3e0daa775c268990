#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "devstyle/audio.hpp"
#include "devstyle/fir.hpp"
#include "devstyle/frc.hpp"

namespace devstyle {

inline constexpr std::size_t kDefaultFirTaps = 4096;
inline constexpr double kRoundTripLoHz = 100.0;
inline constexpr double kRoundTripHiHz = 16000.0;
inline constexpr double kRoundTripTolDb = 1.0;

struct FirDesign {
  FirFilter filter;
  // Worst |measured - requested| over 100 Hz - 16 kHz; the caller decides
  // whether it is acceptable.
  double max_deviation_db = 0.0;
};

// Minimum-phase FIR realizing the magnitude response `frc`: log-magnitude is
// interpolated (log-frequency) onto a dense FFT grid, folded through the real
// cepstrum, exponentiated, inverted and truncated with a tail taper.
FirDesign design_min_phase_fir(const FrequencyResponse& frc, std::size_t n_taps = kDefaultFirTaps,
                               int sample_rate_hz = kDefaultSampleRate);

// Parametric device curve in dB: low shelf, presence bell, treble shelf, notch.
struct DeviceShape {
  double bass_gain_db = 0, bass_corner_hz = 120;
  double presence_gain_db = 0, presence_hz = 3000, presence_width_oct = 0.7;
  double treble_gain_db = 0, treble_corner_hz = 10000;
  double notch_depth_db = 0, notch_hz = 6000, notch_width_oct = 0.12;
};

std::vector<double> shape_curve_db(const DeviceShape& shape, const std::vector<double>& grid_hz);

struct DeviceProfile {
  std::string name;
  FrequencyResponse frc;
  FirFilter filter;
  std::optional<std::string> price_tier;
  std::optional<DeviceShape> shape;
  double design_deviation_db = 0.0;
};

DeviceProfile make_device(std::string name, FrequencyResponse frc, std::size_t n_taps = kDefaultFirTaps,
                          int sample_rate_hz = kDefaultSampleRate);
DeviceProfile make_flat_device(std::string name = "flat");

// Deterministic bank of distinct simulated devices named dev0..dev{n-1};
// every pair differs by a mean absolute of at least 3 dB over the grid.
std::vector<DeviceProfile> make_parametric_device_bank(std::uint64_t seed, int n_devices = 6);

double mean_abs_difference_db(const FrequencyResponse& a, const FrequencyResponse& b);

// Linear convolution with the device filter, truncated to the input length.
AudioSegment apply_device(const AudioSegment& audio, const DeviceProfile& device);
std::vector<double> apply_fir(std::span<const double> x, const FirFilter& filter);

}  // namespace devstyle
