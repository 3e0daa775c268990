#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "devstyle/datapipe.hpp"
#include "devstyle/embeddings.hpp"
#include "json.hpp"

namespace devstyle {

inline constexpr double kSnrCapDb = 100.0;

// 10 log10(sum t^2 / sum (t - p)^2), capped at +100 dB.
double snr_db(std::span<const double> target, std::span<const double> pred);
// 100 * RMS(t - p).
double rmse_x100(std::span<const double> target, std::span<const double> pred);

// Classic STOI (10 kHz, 15 third-octave bands from 150 Hz, 30-frame segments,
// -15 dB clipping, 40 dB silent-frame removal) times 100, floored at 0.
double stoi_percent(std::span<const double> target, std::span<const double> pred, int sample_rate_hz);

struct MetricRow {
  std::string device;
  std::string variant;
  double snr_db = 0.0;
  double rmse_x100 = 0.0;
  double stoi_pct = 0.0;
  std::size_t n_segments = 0;
};

struct MetricsAggregate {
  double snr_db = 0.0;
  double rmse_x100 = 0.0;
  double stoi_pct = 0.0;
};

struct MetricsReport {
  std::vector<MetricRow> rows;

  std::vector<std::string> variants() const;  // first-seen order
  std::vector<std::string> devices() const;   // first-seen order
  // Unweighted mean over the variant's device rows.
  MetricsAggregate aggregate(const std::string& variant) const;
  const MetricRow& row(const std::string& device, const std::string& variant) const;
  void append(const MetricsReport& other);
  void validate() const;

  nlohmann::ordered_json to_json() const;
  static MetricsReport from_json(const nlohmann::json& j);
  // One line per variant; SNR, RMSE x100, STOI per device, then the average.
  std::string to_text_table() const;
};

// Maps a batch of input windows and their conditioning embeddings to predicted waveforms.
using Predictor = std::function<std::vector<std::vector<double>>(const std::vector<AudioSegment>& inputs,
                                                                 const std::vector<const DeviceEmbedding*>& embeddings)>;

struct EvalOptions {
  std::size_t batch_size = 8;
  bool concat = false;  // metrics over concatenated test audio instead of per-segment means
  std::shared_ptr<AudioStore> store;
};

// Runs every test window of each device through `predictor` (or the identity
// when empty) with the device's fixed test embedding.
MetricsReport evaluate_dataset(const Predictor& predictor, const DatasetManifest& data,
                               const std::vector<std::string>& devices, const EmbeddingPool* pool,
                               const std::string& variant, const EvalOptions& options = {});

}  // namespace devstyle
