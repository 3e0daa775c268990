#include "devstyle/device.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "devstyle/fft.hpp"
#include "devstyle/rng.hpp"

namespace devstyle {
namespace {

// mags_db sampled at arbitrary frequencies, linear in log-frequency and held
// constant beyond the curve's ends.
std::vector<double> interp_clamped(const FrequencyResponse& fr, const std::vector<double>& freqs) {
  std::vector<double> out(freqs.size());
  std::size_t seg = 0;
  const auto& fx = fr.freqs_hz;
  for (std::size_t i = 0; i < freqs.size(); ++i) {
    const double f = freqs[i];
    if (f <= fx.front()) {
      out[i] = fr.mags_db.front();
      continue;
    }
    if (f >= fx.back()) {
      out[i] = fr.mags_db.back();
      continue;
    }
    while (seg + 2 < fx.size() && fx[seg + 1] < f) ++seg;
    const double t = (std::log(f) - std::log(fx[seg])) / (std::log(fx[seg + 1]) - std::log(fx[seg]));
    out[i] = fr.mags_db[seg] + t * (fr.mags_db[seg + 1] - fr.mags_db[seg]);
  }
  return out;
}

std::vector<double> round_trip_grid(const std::vector<double>& grid) {
  std::vector<double> g;
  for (const double f : grid)
    if (f >= kRoundTripLoHz && f <= kRoundTripHiHz) g.push_back(f);
  return g;
}

}  // namespace

FirDesign design_min_phase_fir(const FrequencyResponse& frc, std::size_t n_taps, int sample_rate_hz) {
  frc.validate();
  if (n_taps == 0 || n_taps > kMaxFirTaps)
    throw std::invalid_argument("design_min_phase_fir: n_taps must be in [1, " + std::to_string(kMaxFirTaps) + "]");
  if (sample_rate_hz <= 0) throw std::invalid_argument("design_min_phase_fir: sample rate must be positive");
  for (const double m : frc.mags_db)
    if (m < -48.0 || m > 48.0)
      throw std::invalid_argument("design_min_phase_fir: magnitudes must lie within [-48, +48] dB");

  const std::size_t n_fft = std::max<std::size_t>(8 * next_pow2(n_taps), 16384);
  RealFft fft(n_fft);
  const std::size_t bins = fft.bins();
  std::vector<double> freqs(bins);
  for (std::size_t k = 0; k < bins; ++k)
    freqs[k] = static_cast<double>(k) * sample_rate_hz / static_cast<double>(n_fft);
  const auto db = interp_clamped(frc, freqs);

  // Real cepstrum of the log-magnitude.
  std::vector<std::complex<double>> log_mag(bins);
  for (std::size_t k = 0; k < bins; ++k) log_mag[k] = db[k] * std::numbers::ln10 / 20.0;
  auto cep = fft.inverse(log_mag);

  // Fold onto the causal half: the minimum-phase cepstrum.
  for (std::size_t n = 1; n < n_fft / 2; ++n) cep[n] *= 2.0;
  for (std::size_t n = n_fft / 2 + 1; n < n_fft; ++n) cep[n] = 0.0;

  auto spec = fft.forward(cep);
  for (auto& c : spec) c = std::exp(c);
  auto impulse = fft.inverse(spec);

  FirDesign d;
  d.filter.sample_rate_hz = sample_rate_hz;
  d.filter.taps.assign(impulse.begin(), impulse.begin() + static_cast<std::ptrdiff_t>(n_taps));
  const std::size_t fade = n_taps / 8;
  for (std::size_t i = 0; i < fade; ++i) {
    const double w = 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(i + 1) / static_cast<double>(fade)));
    d.filter.taps[n_taps - fade + i] *= w;
  }

  const auto grid = round_trip_grid(frc.freqs_hz);
  if (!grid.empty()) {
    const auto measured = measure_frc(d.filter, grid);
    const auto wanted = interp_clamped(frc, grid);
    for (std::size_t i = 0; i < grid.size(); ++i)
      d.max_deviation_db = std::max(d.max_deviation_db, std::abs(measured.mags_db[i] - wanted[i]));
  }
  return d;
}

std::vector<double> shape_curve_db(const DeviceShape& s, const std::vector<double>& grid_hz) {
  std::vector<double> out(grid_hz.size());
  for (std::size_t i = 0; i < grid_hz.size(); ++i) {
    const double f = grid_hz[i];
    const double bass = s.bass_gain_db / (1.0 + std::pow(f / s.bass_corner_hz, 2.0));
    const double po = std::log2(f / s.presence_hz) / s.presence_width_oct;
    const double presence = s.presence_gain_db * std::exp(-0.5 * po * po);
    const double treble = s.treble_gain_db / (1.0 + std::pow(s.treble_corner_hz / f, 2.0));
    const double no = std::log2(f / s.notch_hz) / s.notch_width_oct;
    const double notch = -s.notch_depth_db * std::exp(-0.5 * no * no);
    out[i] = bass + presence + treble + notch;
  }
  return out;
}

DeviceProfile make_device(std::string name, FrequencyResponse frc, std::size_t n_taps, int sample_rate_hz) {
  frc.device_name = name;
  auto design = design_min_phase_fir(frc, n_taps, sample_rate_hz);
  DeviceProfile p;
  p.name = std::move(name);
  p.frc = std::move(frc);
  p.filter = std::move(design.filter);
  p.design_deviation_db = design.max_deviation_db;
  return p;
}

DeviceProfile make_flat_device(std::string name) {
  FrequencyResponse fr;
  fr.freqs_hz = standard_grid();
  fr.mags_db.assign(fr.freqs_hz.size(), 0.0);
  return make_device(std::move(name), std::move(fr));
}

double mean_abs_difference_db(const FrequencyResponse& a, const FrequencyResponse& b) {
  if (a.mags_db.size() != b.mags_db.size() || a.mags_db.empty())
    throw std::invalid_argument("mean_abs_difference_db: grids differ");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.mags_db.size(); ++i) acc += std::abs(a.mags_db[i] - b.mags_db[i]);
  return acc / static_cast<double>(a.mags_db.size());
}

std::vector<DeviceProfile> make_parametric_device_bank(std::uint64_t seed, int n_devices) {
  if (n_devices < 2) throw std::invalid_argument("make_parametric_device_bank: need at least 2 devices");
  Rng rng(mix_seed(seed, 0xDE71CE));
  const auto grid = standard_grid();
  std::vector<DeviceProfile> bank;
  std::vector<FrequencyResponse> curves;
  constexpr int kMaxAttempts = 10000;
  for (int attempt = 0; static_cast<int>(bank.size()) < n_devices; ++attempt) {
    if (attempt >= kMaxAttempts) throw std::runtime_error("make_parametric_device_bank: could not find distinct devices");
    DeviceShape s;
    s.bass_gain_db = rng.uniform(3.0, 12.0) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
    s.bass_corner_hz = rng.uniform(60.0, 250.0);
    s.presence_gain_db = rng.uniform(2.0, 8.0) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
    s.presence_hz = rng.uniform(1500.0, 5000.0);
    s.presence_width_oct = rng.uniform(0.4, 1.0);
    s.treble_gain_db = -rng.uniform(0.0, 10.0);
    s.treble_corner_hz = rng.uniform(7000.0, 14000.0);
    s.notch_depth_db = rng.uniform(3.0, 9.0);
    s.notch_hz = rng.uniform(4000.0, 10000.0);
    s.notch_width_oct = rng.uniform(0.08, 0.2);

    FrequencyResponse fr;
    fr.freqs_hz = grid;
    fr.mags_db = shape_curve_db(s, grid);
    const bool distinct = std::all_of(curves.begin(), curves.end(),
                                      [&](const FrequencyResponse& c) { return mean_abs_difference_db(c, fr) >= 3.0; });
    if (!distinct) continue;

    auto p = make_device("dev" + std::to_string(bank.size()), fr);
    p.shape = s;
    curves.push_back(p.frc);
    bank.push_back(std::move(p));
  }
  return bank;
}

std::vector<double> apply_fir(std::span<const double> x, const FirFilter& filter) {
  filter.validate();
  if (x.empty()) return {};
  auto y = fft_convolve(x, filter.taps);
  y.resize(x.size());
  return y;
}

AudioSegment apply_device(const AudioSegment& audio, const DeviceProfile& device) {
  if (audio.sample_rate_hz != device.filter.sample_rate_hz)
    throw std::invalid_argument("apply_device: audio sample rate " + std::to_string(audio.sample_rate_hz) +
                                " Hz does not match device '" + device.name + "' filter rate " +
                                std::to_string(device.filter.sample_rate_hz) + " Hz");
  AudioSegment out;
  out.sample_rate_hz = audio.sample_rate_hz;
  out.source_file = audio.source_file;
  out.offset_s = audio.offset_s;
  out.samples = apply_fir(audio.samples, device.filter);
  return out;
}

}  // namespace devstyle
