#include <cmath>
#include <numbers>

#include "devstyle/device.hpp"
#include "devstyle/rng.hpp"
#include "doctest.h"

using namespace devstyle;

namespace {
FrequencyResponse curve_from(const std::vector<double>& db) {
  FrequencyResponse fr;
  fr.freqs_hz = standard_grid();
  fr.mags_db = db;
  fr.device_name = "test";
  return fr;
}

std::vector<double> noise(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> x(n);
  for (auto& v : x) v = rng.uniform(-0.5, 0.5);
  return x;
}

std::vector<double> band_grid() {
  std::vector<double> g;
  for (const double f : standard_grid())
    if (f >= kRoundTripLoHz && f <= kRoundTripHiHz) g.push_back(f);
  return g;
}
}  // namespace

TEST_CASE("design_min_phase_fir on a flat curve is a unit impulse") {
  const auto d = design_min_phase_fir(curve_from(std::vector<double>(480, 0.0)));
  REQUIRE(d.filter.taps.size() == 4096);
  CHECK(d.filter.taps[0] == doctest::Approx(1.0).epsilon(1e-9));
  double tail = 0.0;
  for (std::size_t i = 1; i < d.filter.taps.size(); ++i) tail += std::abs(d.filter.taps[i]);
  CHECK(tail < 1e-2);
  CHECK(d.max_deviation_db < 1e-6);
}

TEST_CASE("design_min_phase_fir on a +6.0206 dB curve is a doubled impulse") {
  const auto d = design_min_phase_fir(curve_from(std::vector<double>(480, 20.0 * std::log10(2.0))));
  CHECK(std::abs(d.filter.taps[0] - 2.0) < 1e-2);
  for (std::size_t i = 1; i < d.filter.taps.size(); ++i) CHECK(std::abs(d.filter.taps[i]) < 1e-2);
}

TEST_CASE("design_min_phase_fir rejects magnitudes beyond +-48 dB") {
  CHECK_THROWS_AS(design_min_phase_fir(curve_from(std::vector<double>(480, 60.0))), std::invalid_argument);
}

TEST_CASE("design_min_phase_fir reports, rather than hides, unattainable tolerance") {
  // 64 taps cannot resolve a steep bass shelf.
  std::vector<double> db(480);
  const auto g = standard_grid();
  for (std::size_t i = 0; i < 480; ++i) db[i] = g[i] < 150.0 ? 20.0 : -10.0;
  const auto d = design_min_phase_fir(curve_from(db), 64);
  CHECK(d.filter.taps.size() == 64);
  CHECK(d.max_deviation_db > 1.0);
}

TEST_CASE("bank round trip: measure(design(frc)) within 1 dB on 100 Hz - 16 kHz") {
  const auto bank = make_parametric_device_bank(42, 6);
  const auto grid = band_grid();
  for (const auto& p : bank) {
    CAPTURE(p.name);
    const auto measured = measure_frc(p.filter, grid);
    const auto wanted = resample_frc(p.frc, grid);
    CHECK(max_abs_deviation_db(measured, wanted, kRoundTripLoHz, kRoundTripHiHz) <= kRoundTripTolDb);
    CHECK(p.design_deviation_db <= kRoundTripTolDb);
  }
}

TEST_CASE("make_parametric_device_bank") {
  const auto a = make_parametric_device_bank(42, 6);
  const auto b = make_parametric_device_bank(42, 6);
  REQUIRE(a.size() == 6);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].name == "dev" + std::to_string(i));
    CHECK(a[i].frc.mags_db == b[i].frc.mags_db);
    CHECK(a[i].filter.taps == b[i].filter.taps);
  }
  for (const std::uint64_t seed : {1ULL, 7ULL, 42ULL, 1234ULL}) {
    const auto bank = make_parametric_device_bank(seed, 6);
    for (std::size_t i = 0; i < bank.size(); ++i)
      for (std::size_t j = i + 1; j < bank.size(); ++j)
        CHECK(mean_abs_difference_db(bank[i].frc, bank[j].frc) >= 3.0);
  }
  CHECK(make_parametric_device_bank(3, 6)[0].frc.mags_db != a[0].frc.mags_db);
  CHECK_THROWS_AS(make_parametric_device_bank(42, 1), std::invalid_argument);
}

TEST_CASE("apply_device") {
  const auto bank = make_parametric_device_bank(42, 3);
  const auto& dev = bank[0];
  AudioSegment x{noise(20000, 9), 44100, "noise", 0.0};

  SUBCASE("flat device passes audio through") {
    const auto flat = make_flat_device();
    const auto y = apply_device(x, flat);
    REQUIRE(y.samples.size() == x.samples.size());
    std::vector<double> diff(x.samples.size());
    for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = y.samples[i] - x.samples[i];
    CHECK(rms(diff) < 1e-4);
  }
  SUBCASE("homogeneity and additivity") {
    AudioSegment half = x;
    for (auto& v : half.samples) v *= 0.5;
    const auto y = apply_device(x, dev);
    const auto yh = apply_device(half, dev);
    for (std::size_t i = 0; i < y.samples.size(); ++i) CHECK(std::abs(yh.samples[i] - 0.5 * y.samples[i]) < 1e-9);

    AudioSegment other{noise(20000, 10), 44100, "noise2", 0.0};
    AudioSegment sum = x;
    for (std::size_t i = 0; i < sum.samples.size(); ++i) sum.samples[i] += other.samples[i];
    const auto ys = apply_device(sum, dev);
    const auto yo = apply_device(other, dev);
    double worst = 0.0;
    for (std::size_t i = 0; i < ys.samples.size(); ++i)
      worst = std::max(worst, std::abs(ys.samples[i] - y.samples[i] - yo.samples[i]));
    CHECK(worst < 1e-9);
  }
  SUBCASE("time invariance on interior samples") {
    constexpr std::size_t k = 137;
    AudioSegment shifted = x;
    shifted.samples.insert(shifted.samples.begin(), k, 0.0);
    shifted.samples.resize(x.samples.size());
    const auto y = apply_device(x, dev);
    const auto ys = apply_device(shifted, dev);
    double worst = 0.0;
    for (std::size_t i = k; i < y.samples.size(); ++i) worst = std::max(worst, std::abs(ys.samples[i] - y.samples[i - k]));
    CHECK(worst < 1e-9);
  }
  SUBCASE("1 kHz sine through +6 dB at 1 kHz doubles RMS") {
    DeviceShape s;
    s.presence_gain_db = 20.0 * std::log10(2.0);
    s.presence_hz = 1000.0;
    s.presence_width_oct = 1.0;
    s.bass_corner_hz = 10.0;
    s.treble_corner_hz = 1e9;
    FrequencyResponse fr = curve_from(shape_curve_db(s, standard_grid()));
    const auto peaked = make_device("peak", fr);
    AudioSegment sine{std::vector<double>(44100), 44100, "sine", 0.0};
    for (std::size_t i = 0; i < sine.samples.size(); ++i)
      sine.samples[i] = 0.25 * std::sin(2.0 * std::numbers::pi * 1000.0 * static_cast<double>(i) / 44100.0);
    const auto y = apply_device(sine, peaked);
    const std::span<const double> steady_in(sine.samples.begin() + 8192, sine.samples.end());
    const std::span<const double> steady_out(y.samples.begin() + 8192, y.samples.end());
    CHECK(rms(steady_out) / rms(steady_in) == doctest::Approx(2.0).epsilon(0.02));
  }
  SUBCASE("sample-rate mismatch is rejected") {
    AudioSegment wrong = x;
    wrong.sample_rate_hz = 48000;
    CHECK_THROWS_AS(apply_device(wrong, dev), std::invalid_argument);
  }
}
