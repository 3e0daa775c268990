#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "devstyle/fir.hpp"

namespace devstyle {

inline constexpr std::size_t kStandardBands = 480;
inline constexpr double kGridLowHz = 20.0;
inline constexpr double kGridHighHz = 22050.0;

// Magnitude response of a playback device, in dB relative to the input.
struct FrequencyResponse {
  std::vector<double> freqs_hz;
  std::vector<double> mags_db;
  std::string device_name;

  std::size_t bands() const { return freqs_hz.size(); }
  void validate() const;
};

enum class TargetKind { harman, flat, custom };

const char* to_string(TargetKind kind);

struct TargetCurve {
  FrequencyResponse curve;
  TargetKind kind = TargetKind::custom;
};

// Log-spaced grid from 20 Hz to 22050 Hz, endpoints included.
std::vector<double> standard_grid(std::size_t bands = kStandardBands);

// Harman-style over-ear preference target. This is a 32-point piecewise
// log-linear approximation (bass shelf, ear-gain bump near 3 kHz, treble
// roll-off), not a published table.
const std::vector<std::pair<double, double>>& harman_approximation_table();
TargetCurve harman_target(const std::vector<double>& grid = standard_grid());
TargetCurve flat_target(const std::vector<double>& grid = standard_grid());

// Evaluates the filter's transfer function at each grid frequency and
// returns 20*log10|H(f)|. Frequencies must lie strictly inside (0, fs/2).
FrequencyResponse measure_frc(const FirFilter& filter, std::span<const double> grid_hz);

// Linear interpolation of mags_db in log-frequency onto new_grid.
FrequencyResponse resample_frc(const FrequencyResponse& fr, std::span<const double> new_grid);

std::vector<double> deviation_from_target(const FrequencyResponse& fr, const TargetCurve& target);

// Largest |a - b| over grid points within [lo_hz, hi_hz]; grids must match.
double max_abs_deviation_db(const FrequencyResponse& a, const FrequencyResponse& b, double lo_hz,
                            double hi_hz);

// CSV with header `freq_hz,magnitude_db`, LF line endings.
void write_frc_csv(const FrequencyResponse& fr, const std::filesystem::path& path);
FrequencyResponse read_frc_csv(const std::filesystem::path& path, std::string device_name = {});

}  // namespace devstyle
