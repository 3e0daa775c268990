#include "devstyle/frc.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace devstyle {

void FirFilter::validate() const {
  if (taps.empty()) throw std::invalid_argument("FirFilter: taps must be nonempty");
  if (taps.size() > kMaxFirTaps)
    throw std::invalid_argument("FirFilter: " + std::to_string(taps.size()) + " taps exceeds limit of " +
                                std::to_string(kMaxFirTaps));
  for (const double t : taps)
    if (!std::isfinite(t)) throw std::invalid_argument("FirFilter: non-finite tap");
  if (sample_rate_hz <= 0) throw std::invalid_argument("FirFilter: sample rate must be positive");
}

void FrequencyResponse::validate() const {
  if (freqs_hz.size() != mags_db.size())
    throw std::invalid_argument("FrequencyResponse: freqs/mags length mismatch (" +
                                std::to_string(freqs_hz.size()) + " vs " + std::to_string(mags_db.size()) + ")");
  if (freqs_hz.size() < 2) throw std::invalid_argument("FrequencyResponse: need at least two bands");
  // Grids are built from 20 * ratio^k, so allow rounding at the endpoints.
  if (freqs_hz.front() < kGridLowHz * (1 - 1e-12) || freqs_hz.back() > kGridHighHz * (1 + 1e-12))
    throw std::invalid_argument("FrequencyResponse: frequencies must lie within [20, 22050] Hz");
  for (std::size_t i = 1; i < freqs_hz.size(); ++i)
    if (!(freqs_hz[i] > freqs_hz[i - 1]))
      throw std::invalid_argument("FrequencyResponse: frequencies must be strictly increasing");
  for (const double m : mags_db)
    if (!std::isfinite(m)) throw std::invalid_argument("FrequencyResponse: non-finite magnitude");
}

const char* to_string(TargetKind kind) {
  switch (kind) {
    case TargetKind::harman: return "harman";
    case TargetKind::flat: return "flat";
    case TargetKind::custom: return "custom";
  }
  return "custom";
}

std::vector<double> standard_grid(std::size_t bands) {
  if (bands < 2) throw std::invalid_argument("standard_grid: need at least two bands");
  std::vector<double> g(bands);
  const double lo = std::log(kGridLowHz), hi = std::log(kGridHighHz);
  for (std::size_t i = 0; i < bands; ++i)
    g[i] = std::exp(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bands - 1));
  g.front() = kGridLowHz;
  g.back() = kGridHighHz;
  return g;
}

const std::vector<std::pair<double, double>>& harman_approximation_table() {
  static const std::vector<std::pair<double, double>> table = {
      {20.0, 6.0},     {25.0, 5.9},     {31.5, 5.7},     {40.0, 5.4},    {50.0, 5.0},    {63.0, 4.4},
      {80.0, 3.6},     {100.0, 2.7},    {125.0, 1.8},    {160.0, 0.9},   {200.0, 0.0},   {250.0, 0.0},
      {315.0, 0.0},    {400.0, 0.0},    {500.0, 0.0},    {630.0, 0.0},   {800.0, 0.0},   {1000.0, 0.0},
      {1250.0, 0.4},   {1600.0, 1.0},   {2000.0, 1.8},   {2500.0, 2.6},  {3150.0, 3.0},  {4000.0, 2.6},
      {5000.0, 1.8},   {6300.0, 1.0},   {8000.0, 0.4},   {10000.0, 0.0}, {12500.0, -1.5}, {16000.0, -3.5},
      {20000.0, -5.5}, {22050.0, -6.5},
  };
  return table;
}

TargetCurve harman_target(const std::vector<double>& grid) {
  FrequencyResponse table;
  for (const auto& [f, db] : harman_approximation_table()) {
    table.freqs_hz.push_back(f);
    table.mags_db.push_back(db);
  }
  TargetCurve t{resample_frc(table, grid), TargetKind::harman};
  t.curve.device_name = "Harman";
  return t;
}

TargetCurve flat_target(const std::vector<double>& grid) {
  TargetCurve t;
  t.kind = TargetKind::flat;
  t.curve.freqs_hz = grid;
  t.curve.mags_db.assign(grid.size(), 0.0);
  t.curve.device_name = "Flat";
  return t;
}

FrequencyResponse measure_frc(const FirFilter& filter, std::span<const double> grid_hz) {
  filter.validate();
  const double nyquist = filter.sample_rate_hz / 2.0;
  FrequencyResponse out;
  out.freqs_hz.assign(grid_hz.begin(), grid_hz.end());
  out.mags_db.reserve(grid_hz.size());
  for (const double f : grid_hz) {
    if (!(f > 0.0) || f >= nyquist) {
      std::ostringstream msg;
      msg << "measure_frc: grid frequency " << f << " Hz is outside (0, " << nyquist
          << ") Hz (Nyquist at sample rate " << filter.sample_rate_hz << ")";
      throw std::invalid_argument(msg.str());
    }
    // Horner evaluation of sum h[n] z^n with z = exp(-j w).
    const double w = 2.0 * std::numbers::pi * f / filter.sample_rate_hz;
    const std::complex<double> z(std::cos(w), -std::sin(w));
    std::complex<double> acc = 0.0;
    for (auto it = filter.taps.rbegin(); it != filter.taps.rend(); ++it) acc = acc * z + *it;
    const double mag = std::abs(acc);
    out.mags_db.push_back(20.0 * std::log10(std::max(mag, 1e-30)));
  }
  return out;
}

FrequencyResponse resample_frc(const FrequencyResponse& fr, std::span<const double> new_grid) {
  if (fr.freqs_hz.size() != fr.mags_db.size() || fr.freqs_hz.size() < 2)
    throw std::invalid_argument("resample_frc: source curve needs >= 2 aligned points");
  if (new_grid.empty()) throw std::invalid_argument("resample_frc: empty target grid");
  for (std::size_t i = 1; i < new_grid.size(); ++i)
    if (!(new_grid[i] > new_grid[i - 1]))
      throw std::invalid_argument("resample_frc: new grid must be strictly increasing");
  const double lo = fr.freqs_hz.front(), hi = fr.freqs_hz.back();
  constexpr double rel = 1e-9;
  if (new_grid.front() < lo * (1 - rel) || new_grid.back() > hi * (1 + rel)) {
    std::ostringstream msg;
    msg << "resample_frc: new grid [" << new_grid.front() << ", " << new_grid.back()
        << "] Hz lies outside source span [" << lo << ", " << hi << "] Hz";
    throw std::invalid_argument(msg.str());
  }

  FrequencyResponse out;
  out.device_name = fr.device_name;
  out.freqs_hz.assign(new_grid.begin(), new_grid.end());
  out.mags_db.reserve(new_grid.size());
  std::size_t seg = 0;
  for (const double fq : new_grid) {
    const double f = std::clamp(fq, lo, hi);
    while (seg + 2 < fr.freqs_hz.size() && fr.freqs_hz[seg + 1] < f) ++seg;
    const double f0 = fr.freqs_hz[seg], f1 = fr.freqs_hz[seg + 1];
    const double m0 = fr.mags_db[seg], m1 = fr.mags_db[seg + 1];
    if (f == f0) {
      out.mags_db.push_back(m0);
    } else if (f == f1) {
      out.mags_db.push_back(m1);
    } else {
      const double t = (std::log(f) - std::log(f0)) / (std::log(f1) - std::log(f0));
      out.mags_db.push_back(m0 + t * (m1 - m0));
    }
  }
  return out;
}

std::vector<double> deviation_from_target(const FrequencyResponse& fr, const TargetCurve& target) {
  const auto& t = target.curve;
  if (fr.mags_db.size() != t.mags_db.size())
    throw std::invalid_argument("deviation_from_target: length mismatch (" + std::to_string(fr.mags_db.size()) +
                                " vs " + std::to_string(t.mags_db.size()) + "); resample first");
  std::vector<double> d(fr.mags_db.size());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = fr.mags_db[i] - t.mags_db[i];
  return d;
}

double max_abs_deviation_db(const FrequencyResponse& a, const FrequencyResponse& b, double lo_hz, double hi_hz) {
  if (a.freqs_hz.size() != b.freqs_hz.size())
    throw std::invalid_argument("max_abs_deviation_db: grid mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.freqs_hz.size(); ++i) {
    const double f = a.freqs_hz[i];
    if (f < lo_hz || f > hi_hz) continue;
    worst = std::max(worst, std::abs(a.mags_db[i] - b.mags_db[i]));
  }
  return worst;
}

void write_frc_csv(const FrequencyResponse& fr, const std::filesystem::path& path) {
  fr.validate();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_frc_csv: cannot open " + path.string());
  os << "freq_hz,magnitude_db\n";
  char line[96];
  for (std::size_t i = 0; i < fr.bands(); ++i) {
    std::snprintf(line, sizeof line, "%.10g,%.10g\n", fr.freqs_hz[i], fr.mags_db[i]);
    os << line;
  }
  if (!os) throw std::runtime_error("write_frc_csv: write failed for " + path.string());
}

FrequencyResponse read_frc_csv(const std::filesystem::path& path, std::string device_name) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_frc_csv: cannot open " + path.string());
  std::string line;
  std::getline(is, line);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "freq_hz,magnitude_db")
    throw std::runtime_error("read_frc_csv: expected header 'freq_hz,magnitude_db' in " + path.string());
  FrequencyResponse fr;
  fr.device_name = device_name.empty() ? path.stem().string() : std::move(device_name);
  std::size_t row = 1;
  while (std::getline(is, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos)
      throw std::runtime_error("read_frc_csv: malformed row " + std::to_string(row) + " in " + path.string());
    try {
      fr.freqs_hz.push_back(std::stod(line.substr(0, comma)));
      fr.mags_db.push_back(std::stod(line.substr(comma + 1)));
    } catch (const std::exception&) {
      throw std::runtime_error("read_frc_csv: non-numeric row " + std::to_string(row) + " in " + path.string());
    }
  }
  fr.validate();
  return fr;
}

}  // namespace devstyle
