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
#include "devstyle/device.hpp"
#include "devstyle/embeddings.hpp"
#include "devstyle/metrics.hpp"
#include "devstyle/model.hpp"
#include "devstyle/training.hpp"
#include "json.hpp"

namespace devstyle {

struct CorpusConfig {
  // Source music; a synthetic corpus is generated when unset.
  std::optional<std::filesystem::path> input_dir;
  int n_files = 20;
  double duration_s = 30.0;
};

struct EmbeddingConfig {
  std::string provider = "frc_encoder";  // or "vlm"
  double jitter_db = kDefaultJitterDb;
  std::optional<std::string> vlm_endpoint;  // falls back to $DEVSTYLE_VLM_ENDPOINT
  std::optional<std::string> prompt;
  int fan_out = 4;
};

struct AblationConfig {
  bool no_film = false;
  bool no_harman = false;
  std::vector<int> ep_numbers;
};

struct FewShotConfig {
  std::string target_device;
  std::vector<double> fractions{0.02, 0.05};
  // Tuning hyperparameters; the main train block when unset.
  std::optional<TrainConfig> train;
};

struct EvalConfig {
  bool concat = false;
  int batch_size = 8;
};

struct PlotConfig {
  bool enabled = true;
  int tsne_per_device = 50;
  double tsne_perplexity = 15.0;
};

struct ExperimentConfig {
  std::filesystem::path out_dir = "runs/default";
  std::uint64_t seed = 0;
  std::uint64_t bank_seed = 7;
  int n_devices = 6;
  CorpusConfig corpus;
  SplitSpec split = SplitSpec::desk();
  int ep_number = 30;
  EmbeddingConfig embedding;
  std::string model_preset = "toy";  // toy | desk | full | miniature
  nlohmann::json model_overrides = nlohmann::json::object();
  TrainConfig train;
  AblationConfig ablation;
  FewShotConfig few_shot;
  EvalConfig eval;
  PlotConfig plots;

  ModelConfig model_config() const;
  void validate() const;
  nlohmann::ordered_json to_json() const;
  // Strict: unknown keys and wrongly typed values are rejected with their JSON path.
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);
};

// Width-reduced toy model for single-core CPU runs.
ModelConfig desk_model_config();
ModelConfig model_preset(const std::string& name);

class PipelineError : public std::runtime_error {
 public:
  PipelineError(const std::string& stage, const std::filesystem::path& artifact, const std::string& what);
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct StageStatus {
  std::string name;
  bool skipped = false;
  std::string input_hash;
};

// Runs content-addressed stages under <root>/stages: a stage is skipped when
// its recorded input hash matches and every recorded output still has the
// recorded SHA-256.
class StageRunner {
 public:
  StageRunner(std::filesystem::path root, std::function<void(const std::string&)> log = {});
  // Returns the stage's output hash (over the listed outputs).
  std::string run(const std::string& name, const std::string& input_hash, const std::vector<std::filesystem::path>& outputs,
                  const std::function<void()>& body);
  // Outputs listed after the body has run (and, for the skip check, before).
  std::string run(const std::string& name, const std::string& input_hash,
                  const std::function<std::vector<std::filesystem::path>()>& outputs, const std::function<void()>& body);
  // "running" when a previous attempt with this input hash was interrupted.
  std::optional<std::string> recorded_state(const std::string& name, const std::string& input_hash) const;
  const std::vector<StageStatus>& history() const { return history_; }

 private:
  std::filesystem::path root_;
  std::function<void(const std::string&)> log_;
  std::vector<StageStatus> history_;
};

struct PipelineResult {
  std::filesystem::path run_dir;
  MetricsReport report;
  std::vector<StageStatus> stages;
};

struct AblationResult {
  MetricsReport report;  // one variant per EP setting and flagged condition
  std::vector<std::string> failures;
  std::vector<StageStatus> stages;
};

struct FewShotSummary {
  MetricsReport report;  // base, then one variant per fraction
  std::vector<StageStatus> stages;
};

using Logger = std::function<void(const std::string&)>;

// Individual stages; each is idempotent through the stage records.
class Pipeline {
 public:
  explicit Pipeline(ExperimentConfig cfg, Logger log = {});

  const ExperimentConfig& config() const { return cfg_; }
  const std::vector<DeviceProfile>& bank() const { return bank_; }

  const DatasetManifest& synthesize();  // corpus + paired dataset + splits
  const EmbeddingPool& pool(int ep_number, bool flat_target = false);
  std::filesystem::path train(const std::string& variant, int ep_number, const TrainConfig& tc,
                              const std::vector<std::string>& devices = {}, bool flat_target = false);
  MetricsReport evaluate(const std::string& variant, const std::filesystem::path& checkpoint, int ep_number,
                         bool flat_target = false, const std::vector<std::string>& devices = {});
  MetricsReport evaluate_identity();
  void render_frc_graphs();
  void plot(const std::filesystem::path& checkpoint, const std::filesystem::path& history_csv);

  const std::vector<StageStatus>& stages() const { return runner_.history(); }
  std::filesystem::path root() const { return cfg_.out_dir; }

 private:
  std::string pool_key(int ep_number, bool flat_target) const;
  std::string embedding_hash() const;

  ExperimentConfig cfg_;
  Logger log_;
  StageRunner runner_;
  std::vector<DeviceProfile> bank_;
  std::optional<DatasetManifest> data_;
  std::string data_hash_;
  std::map<std::string, EmbeddingPool> pools_;
  std::map<std::string, std::string> pool_hashes_;
  std::map<std::string, std::string> train_hashes_;
  std::shared_ptr<AudioStore> store_;
};

// synthesize -> pool -> split -> train -> evaluate -> report + plots
PipelineResult run_pipeline(const ExperimentConfig& cfg, Logger log = {});
// One training per EP setting plus the flagged conditions, on shared data and seeds.
AblationResult ablation_suite(const ExperimentConfig& cfg, const std::vector<int>& ep_numbers, Logger log = {});
// Leave-one-out base training, then adaptation with each configured fraction.
FewShotSummary run_few_shot(const ExperimentConfig& cfg, Logger log = {});

}  // namespace devstyle
