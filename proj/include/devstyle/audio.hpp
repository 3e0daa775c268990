#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace devstyle {

struct AudioSegment {
  std::vector<double> samples;
  int sample_rate_hz = 44100;
  std::string source_file;
  double offset_s = 0.0;

  double duration_s() const { return static_cast<double>(samples.size()) / sample_rate_hz; }
  void validate() const;
};

class WavError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class WavFormat { pcm16, float32 };

struct WavData {
  std::vector<double> samples;  // mono (multi-channel input is averaged)
  int sample_rate_hz = 0;
  int channels = 0;             // channel count in the file
};

WavData read_wav(const std::filesystem::path& path);
void write_wav(const std::filesystem::path& path, std::span<const double> samples, int sample_rate_hz,
               WavFormat format = WavFormat::float32);

// Rational-ratio polyphase resampler with a Kaiser-windowed sinc anti-alias
// filter (stopband at the lower of the two Nyquist rates).
std::vector<double> resample(std::span<const double> x, int from_hz, int to_hz);

// Hermetic "music-like" test material: two voices of 4-8 harmonic partials
// on piecewise-constant fundamentals (80-880 Hz) plus filtered noise bursts.
std::vector<double> generate_music_like(double duration_s, int sample_rate_hz, std::uint64_t seed);

double rms(std::span<const double> x);

}  // namespace devstyle
