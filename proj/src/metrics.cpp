#include "devstyle/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "devstyle/audio.hpp"
#include "devstyle/fft.hpp"

namespace devstyle {

namespace {

void require_same_length(std::span<const double> a, std::span<const double> b, const char* what) {
  if (a.size() != b.size())
    throw std::invalid_argument(std::string(what) + ": length mismatch (" + std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()) + ")");
}

constexpr double kEps = std::numeric_limits<double>::epsilon();

namespace stoi {

constexpr int kFs = 10000;
constexpr std::size_t kFrame = 256;
constexpr std::size_t kNfft = 512;
constexpr int kBands = 15;
constexpr double kMinFreq = 150.0;
constexpr std::size_t kSegment = 30;
constexpr double kBeta = -15.0;
constexpr double kDynRange = 40.0;

// MATLAB-style hanning(n): the zero endpoints of an (n+2)-point Hann are dropped.
std::vector<double> hanning(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i)
    w[i] = 0.5 - 0.5 * std::cos(2.0 * M_PI * static_cast<double>(i + 1) / static_cast<double>(n + 1));
  return w;
}

struct BandMatrix {
  std::vector<std::pair<std::size_t, std::size_t>> ranges;  // [lo, hi) bins per band
};

const BandMatrix& band_matrix() {
  static const BandMatrix m = [] {
    BandMatrix b;
    const std::size_t bins = kNfft / 2 + 1;
    const auto nearest = [&](double f) {
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < bins; ++k) {
        const double fk = static_cast<double>(kFs) * static_cast<double>(k) / static_cast<double>(kNfft);
        const double d = (fk - f) * (fk - f);
        if (d < best_d) {
          best_d = d;
          best = k;
        }
      }
      return best;
    };
    for (int k = 0; k < kBands; ++k) {
      const double lo = kMinFreq * std::pow(2.0, (2.0 * k - 1.0) / 6.0);
      const double hi = kMinFreq * std::pow(2.0, (2.0 * k + 1.0) / 6.0);
      b.ranges.emplace_back(nearest(lo), nearest(hi));
    }
    return b;
  }();
  return m;
}

// Frames start at 0, hop, ... while start < len - frame.
std::size_t frame_count(std::size_t len, std::size_t frame, std::size_t hop) {
  return len > frame ? (len - frame - 1) / hop + 1 : 0;
}

void remove_silent_frames(std::vector<double>& x, std::vector<double>& y) {
  const std::size_t hop = kFrame / 2;
  const auto w = hanning(kFrame);
  const std::size_t nf = frame_count(x.size(), kFrame, hop);
  std::vector<double> energy(nf);
  for (std::size_t f = 0; f < nf; ++f) {
    double e = 0.0;
    for (std::size_t i = 0; i < kFrame; ++i) {
      const double v = w[i] * x[f * hop + i];
      e += v * v;
    }
    energy[f] = 20.0 * std::log10(std::sqrt(e) + kEps);
  }
  const double top = nf ? *std::max_element(energy.begin(), energy.end()) : 0.0;
  std::vector<std::size_t> keep;
  for (std::size_t f = 0; f < nf; ++f)
    if (top - kDynRange - energy[f] < 0) keep.push_back(f);
  const std::size_t out_len = keep.empty() ? 0 : (keep.size() - 1) * hop + kFrame;
  std::vector<double> xs(out_len, 0.0), ys(out_len, 0.0);
  for (std::size_t k = 0; k < keep.size(); ++k)
    for (std::size_t i = 0; i < kFrame; ++i) {
      xs[k * hop + i] += w[i] * x[keep[k] * hop + i];
      ys[k * hop + i] += w[i] * y[keep[k] * hop + i];
    }
  x = std::move(xs);
  y = std::move(ys);
}

// Third-octave band envelopes, [frame][band].
std::vector<std::array<double, kBands>> band_envelopes(const std::vector<double>& x) {
  const std::size_t hop = kFrame / 2;
  const auto w = hanning(kFrame);
  const auto& bm = band_matrix();
  thread_local RealFft fft(kNfft);
  const std::size_t nf = frame_count(x.size(), kFrame, hop);
  std::vector<std::array<double, kBands>> out(nf);
  std::vector<double> buf(kNfft);
  for (std::size_t f = 0; f < nf; ++f) {
    std::fill(buf.begin(), buf.end(), 0.0);
    for (std::size_t i = 0; i < kFrame; ++i) buf[i] = w[i] * x[f * hop + i];
    const auto spec = fft.forward(buf);
    for (int b = 0; b < kBands; ++b) {
      double e = 0.0;
      for (std::size_t k = bm.ranges[b].first; k < bm.ranges[b].second; ++k) e += std::norm(spec[k]);
      out[f][b] = std::sqrt(e);
    }
  }
  return out;
}

}  // namespace stoi

}  // namespace

double snr_db(std::span<const double> target, std::span<const double> pred) {
  require_same_length(target, pred, "snr_db");
  double sig = 0.0, err = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    sig += target[i] * target[i];
    const double d = target[i] - pred[i];
    err += d * d;
  }
  if (!(sig > 0.0)) throw std::invalid_argument("snr_db: target is all zero");
  if (!std::isfinite(sig) || !std::isfinite(err)) throw std::invalid_argument("snr_db: non-finite input");
  if (err <= sig * 1e-10) return kSnrCapDb;
  return std::min(kSnrCapDb, 10.0 * std::log10(sig / err));
}

double rmse_x100(std::span<const double> target, std::span<const double> pred) {
  require_same_length(target, pred, "rmse_x100");
  if (target.empty()) throw std::invalid_argument("rmse_x100: empty input");
  double err = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double d = target[i] - pred[i];
    err += d * d;
  }
  return 100.0 * std::sqrt(err / static_cast<double>(target.size()));
}

double stoi_percent(std::span<const double> target, std::span<const double> pred, int sample_rate_hz) {
  using namespace stoi;
  require_same_length(target, pred, "stoi_percent");
  if (sample_rate_hz <= 0) throw std::invalid_argument("stoi_percent: bad sample rate");
  if (static_cast<double>(target.size()) < 3.0 * sample_rate_hz)
    throw std::invalid_argument("stoi_percent: need at least 3 s of audio, got " +
                                std::to_string(static_cast<double>(target.size()) / sample_rate_hz) + " s");
  if (std::all_of(target.begin(), target.end(), [](double v) { return v == 0.0; }))
    throw std::invalid_argument("stoi_percent: target is silent (all frames below the dynamic range)");

  auto x = resample(target, sample_rate_hz, kFs);
  auto y = resample(pred, sample_rate_hz, kFs);
  remove_silent_frames(x, y);
  const auto xe = band_envelopes(x);
  const auto ye = band_envelopes(y);
  if (xe.size() < kSegment)
    throw std::invalid_argument("stoi_percent: only " + std::to_string(xe.size()) +
                                " non-silent frames remain, need " + std::to_string(kSegment));

  const double clip = std::pow(10.0, -kBeta / 20.0);
  double total = 0.0;
  const std::size_t n_seg = xe.size() - kSegment + 1;
  std::array<double, kSegment> xs{}, ys{};
  for (std::size_t m = 0; m < n_seg; ++m) {
    for (int b = 0; b < kBands; ++b) {
      double nx = 0.0, ny = 0.0;
      for (std::size_t t = 0; t < kSegment; ++t) {
        xs[t] = xe[m + t][b];
        ys[t] = ye[m + t][b];
        nx += xs[t] * xs[t];
        ny += ys[t] * ys[t];
      }
      const double scale = std::sqrt(nx) / (std::sqrt(ny) + kEps);
      double mx = 0.0, my = 0.0;
      for (std::size_t t = 0; t < kSegment; ++t) {
        ys[t] = std::min(ys[t] * scale, xs[t] * (1.0 + clip));
        mx += xs[t];
        my += ys[t];
      }
      mx /= kSegment;
      my /= kSegment;
      double sx = 0.0, sy = 0.0;
      for (std::size_t t = 0; t < kSegment; ++t) {
        xs[t] -= mx;
        ys[t] -= my;
        sx += xs[t] * xs[t];
        sy += ys[t] * ys[t];
      }
      sx = std::sqrt(sx) + kEps;
      sy = std::sqrt(sy) + kEps;
      double c = 0.0;
      for (std::size_t t = 0; t < kSegment; ++t) c += (xs[t] / sx) * (ys[t] / sy);
      total += c;
    }
  }
  const double d = total / static_cast<double>(n_seg * kBands);
  return std::clamp(100.0 * d, 0.0, 100.0);
}

std::vector<std::string> MetricsReport::variants() const {
  std::vector<std::string> out;
  for (const auto& r : rows)
    if (std::find(out.begin(), out.end(), r.variant) == out.end()) out.push_back(r.variant);
  return out;
}

std::vector<std::string> MetricsReport::devices() const {
  std::vector<std::string> out;
  for (const auto& r : rows)
    if (std::find(out.begin(), out.end(), r.device) == out.end()) out.push_back(r.device);
  return out;
}

MetricsAggregate MetricsReport::aggregate(const std::string& variant) const {
  MetricsAggregate a;
  std::size_t n = 0;
  for (const auto& r : rows) {
    if (r.variant != variant) continue;
    a.snr_db += r.snr_db;
    a.rmse_x100 += r.rmse_x100;
    a.stoi_pct += r.stoi_pct;
    ++n;
  }
  if (n == 0) throw std::invalid_argument("report has no rows for variant '" + variant + "'");
  a.snr_db /= static_cast<double>(n);
  a.rmse_x100 /= static_cast<double>(n);
  a.stoi_pct /= static_cast<double>(n);
  return a;
}

const MetricRow& MetricsReport::row(const std::string& device, const std::string& variant) const {
  for (const auto& r : rows)
    if (r.device == device && r.variant == variant) return r;
  throw std::invalid_argument("report has no row for " + device + " / " + variant);
}

void MetricsReport::append(const MetricsReport& other) { rows.insert(rows.end(), other.rows.begin(), other.rows.end()); }

void MetricsReport::validate() const {
  for (const auto& r : rows) {
    if (r.n_segments == 0) throw std::runtime_error("report row " + r.device + "/" + r.variant + " has no segments");
    if (r.stoi_pct < 0.0 || r.stoi_pct > 100.0)
      throw std::runtime_error("report row " + r.device + "/" + r.variant + " has STOI outside [0, 100]");
  }
}

nlohmann::ordered_json MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["schema"] = "devstyle.report/1";
  auto rj = nlohmann::ordered_json::array();
  for (const auto& r : rows)
    rj.push_back({{"device", r.device},
                  {"variant", r.variant},
                  {"snr_db", r.snr_db},
                  {"rmse_x100", r.rmse_x100},
                  {"stoi_pct", r.stoi_pct},
                  {"n_segments", r.n_segments}});
  j["rows"] = std::move(rj);
  auto agg = nlohmann::ordered_json::array();
  for (const auto& v : variants()) {
    const auto a = aggregate(v);
    agg.push_back({{"variant", v}, {"snr_db", a.snr_db}, {"rmse_x100", a.rmse_x100}, {"stoi_pct", a.stoi_pct}});
  }
  j["aggregates"] = std::move(agg);
  return j;
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
  if (j.value("schema", "") != "devstyle.report/1") throw std::runtime_error("report: unsupported schema");
  MetricsReport r;
  for (const auto& x : j.at("rows"))
    r.rows.push_back({x.at("device").get<std::string>(), x.at("variant").get<std::string>(),
                      x.at("snr_db").get<double>(), x.at("rmse_x100").get<double>(), x.at("stoi_pct").get<double>(),
                      x.at("n_segments").get<std::size_t>()});
  return r;
}

std::string MetricsReport::to_text_table() const {
  const auto devs = devices();
  const auto vars = variants();
  std::size_t name_w = 7;
  for (const auto& v : vars) name_w = std::max(name_w, v.size());
  constexpr int kCell = 7;
  const std::size_t group_w = 3 * kCell + 2;

  std::ostringstream os;
  const auto group_header = [&](const std::string& title) {
    std::string t = title.substr(0, group_w);
    const std::size_t pad = group_w - t.size();
    os << " | " << std::string(pad / 2, ' ') << t << std::string(pad - pad / 2, ' ');
  };
  os << std::left << std::setw(static_cast<int>(name_w)) << "Method" << std::right;
  for (const auto& d : devs) group_header(d);
  group_header("Avg.");
  os << '\n' << std::string(name_w, ' ');
  for (std::size_t g = 0; g <= devs.size(); ++g)
    os << " | " << std::setw(kCell) << "SNR" << ' ' << std::setw(kCell) << "RMSE" << ' ' << std::setw(kCell)
       << "STOI";
  os << '\n' << std::string(name_w + (devs.size() + 1) * (group_w + 3), '-') << '\n';
  os << std::fixed << std::setprecision(2);
  for (const auto& v : vars) {
    os << std::left << std::setw(static_cast<int>(name_w)) << v << std::right;
    for (const auto& d : devs) {
      bool found = false;
      for (const auto& r : rows)
        if (r.device == d && r.variant == v) {
          os << " | " << std::setw(kCell) << r.snr_db << ' ' << std::setw(kCell) << r.rmse_x100 << ' '
             << std::setw(kCell) << r.stoi_pct;
          found = true;
          break;
        }
      if (!found) os << " | " << std::setw(kCell) << "-" << ' ' << std::setw(kCell) << "-" << ' ' << std::setw(kCell) << "-";
    }
    const auto a = aggregate(v);
    os << " | " << std::setw(kCell) << a.snr_db << ' ' << std::setw(kCell) << a.rmse_x100 << ' ' << std::setw(kCell)
       << a.stoi_pct << '\n';
  }
  return os.str();
}

MetricsReport evaluate_dataset(const Predictor& predictor, const DatasetManifest& data,
                               const std::vector<std::string>& devices, const EmbeddingPool* pool,
                               const std::string& variant, const EvalOptions& options) {
  if (devices.empty()) throw std::invalid_argument("evaluate_dataset: no devices");
  if (predictor && !pool) throw std::invalid_argument("evaluate_dataset: a model needs an embedding pool");
  auto store = options.store ? options.store : std::make_shared<AudioStore>(data.sample_rate_hz);
  MetricsReport report;
  for (const auto& dev : devices) {
    const DeviceEmbedding* emb = nullptr;
    if (predictor) {
      if (!pool->has_device(dev)) throw std::invalid_argument("evaluate_dataset: no embedding for device '" + dev + "'");
      emb = &pool->test_embedding(dev);
    }
    PairIterator it(data, Split::test, {dev}, std::max<std::size_t>(1, options.batch_size), 0, false, store);
    if (it.num_samples() == 0) throw std::invalid_argument("evaluate_dataset: device '" + dev + "' has no test segments");
    MetricRow row;
    row.device = dev;
    row.variant = variant;
    std::vector<double> cat_t, cat_p;
    while (auto batch = it.next()) {
      std::vector<std::vector<double>> preds;
      if (predictor) {
        preds = predictor(batch->inputs, std::vector<const DeviceEmbedding*>(batch->size(), emb));
        if (preds.size() != batch->size()) throw std::runtime_error("evaluate_dataset: predictor returned wrong batch");
      } else {
        for (const auto& s : batch->inputs) preds.push_back(s.samples);
      }
      for (std::size_t i = 0; i < batch->size(); ++i) {
        const auto& t = batch->targets[i].samples;
        if (options.concat) {
          cat_t.insert(cat_t.end(), t.begin(), t.end());
          cat_p.insert(cat_p.end(), preds[i].begin(), preds[i].end());
        } else {
          row.snr_db += snr_db(t, preds[i]);
          row.rmse_x100 += rmse_x100(t, preds[i]);
          row.stoi_pct += stoi_percent(t, preds[i], data.sample_rate_hz);
        }
        ++row.n_segments;
      }
    }
    if (options.concat) {
      row.snr_db = snr_db(cat_t, cat_p);
      row.rmse_x100 = rmse_x100(cat_t, cat_p);
      row.stoi_pct = stoi_percent(cat_t, cat_p, data.sample_rate_hz);
    } else {
      const double n = static_cast<double>(row.n_segments);
      row.snr_db /= n;
      row.rmse_x100 /= n;
      row.stoi_pct /= n;
    }
    report.rows.push_back(std::move(row));
  }
  report.validate();
  return report;
}

}  // namespace devstyle
