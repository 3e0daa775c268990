#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "devstyle/datapipe.hpp"
#include "devstyle/embeddings.hpp"
#include "devstyle/metrics.hpp"
#include "devstyle/model.hpp"
#include "json.hpp"

namespace devstyle {

struct TrainConfig {
  double lr = 5e-5;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-6;
  int epochs = 20;
  int batch_size = 32;
  int patience = 3;
  std::uint64_t seed = 0;
  std::string loss = "mse";
  double grad_clip_norm = 5.0;
  // Gradient accumulation chunk; the optimiser still steps once per batch.
  int micro_batch = 8;
  // Random subset of training windows drawn per epoch (0 = all of them).
  std::size_t samples_per_epoch = 0;
  // Evenly spaced subset of validation windows (0 = all of them).
  std::size_t val_samples = 0;
  // FiLM generators stay at their identity initialisation.
  bool no_film = false;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  // Missing keys keep their defaults; unknown keys are rejected.
  static TrainConfig from_json(const nlohmann::json& j);
  std::string hash() const;
  // Hash of everything but `epochs`: a run may be resumed with a larger epoch budget.
  std::string resume_hash() const;
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
};

class EarlyStopping {
 public:
  explicit EarlyStopping(int patience);
  // Records one epoch's validation loss; returns true when training should stop.
  bool update(double val_loss);
  bool improved() const { return improved_; }
  int best_epoch() const { return best_epoch_; }
  double best() const { return best_; }
  int epochs_seen() const { return seen_; }
  int bad_epochs() const { return bad_; }
  void restore(int seen, int best_epoch, double best, int bad);

 private:
  int patience_;
  int seen_ = 0;
  int best_epoch_ = 0;
  double best_ = 0.0;
  int bad_ = 0;
  bool improved_ = false;
};

class NonFiniteLossError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainOptions {
  // Devices to train and validate on; empty means every manifest device.
  std::vector<std::string> devices;
  // Replaces the train split windows (few-shot tuning sets).
  std::optional<std::vector<SampleRef>> train_samples;
  // config.json, history.csv, best.ckpt, last.ckpt
  std::optional<std::filesystem::path> run_dir;
  // Continue from run_dir/last.ckpt when present.
  bool resume = false;
  std::shared_ptr<AudioStore> store;
  std::function<void(const std::string&)> log;
  // Stored under "extra" in both checkpoints next to the trainer's own fields.
  nlohmann::json checkpoint_meta = nlohmann::json::object();
};

struct TrainResult {
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  double best_val_loss = 0.0;
  bool stopped_early = false;
  std::size_t iterations = 0;
  // Pool indices drawn per device over the whole run.
  std::map<std::string, std::map<int, std::size_t>> ep_draws;
};

// AdamW on MSE with per-iteration embedding-pool sampling and per-epoch
// validation under each device's fixed test embedding. On return the model
// holds the best-validation weights.
TrainResult train(HybridModel& model, const EmbeddingPool& pool, const DatasetManifest& data, const TrainConfig& cfg,
                  const TrainOptions& options = {});

// Mean MSE over `samples`, each conditioned on its device's test embedding.
double validation_loss(HybridModel& model, const EmbeddingPool& pool, const DatasetManifest& data,
                       const std::vector<SampleRef>& samples, int micro_batch,
                       std::shared_ptr<AudioStore> store = nullptr);

// ceil(fraction * N) of the device's N training windows, apportioned over its
// files by largest remainder and drawn per file with `seed`.
std::vector<SampleRef> select_few_shot_samples(const DatasetManifest& data, const std::string& device, double fraction,
                                               std::uint64_t seed);

struct FewShotResult {
  std::vector<SampleRef> tuning_samples;
  TrainResult training;
  MetricsReport before;
  MetricsReport after;
};

// Loads `base_checkpoint` (which must not have seen `target_device`), tunes all
// weights on a `fraction` of the target's training windows and evaluates the
// target's test split before and after.
FewShotResult few_shot_adapt(const std::filesystem::path& base_checkpoint, const std::string& target_device,
                             double fraction, const DatasetManifest& data, const EmbeddingPool& pool,
                             const TrainConfig& cfg, const TrainOptions& options = {});

// Wraps a model as an evaluation predictor; inference runs in chunks of `micro_batch`.
Predictor model_predictor(HybridModel model, int micro_batch = 8);

// Devices recorded as seen in training by a checkpoint written by train().
std::vector<std::string> checkpoint_train_devices(const std::filesystem::path& checkpoint);

}  // namespace devstyle
