#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "devstyle/device.hpp"
#include "devstyle/frc.hpp"
#include "devstyle/frc_graph.hpp"
#include "devstyle/rng.hpp"

namespace devstyle {

inline constexpr std::size_t kEmbeddingDim = 4096;
inline constexpr int kTestPoolBase = 10000;
inline constexpr int kTestPoolSize = 20;
inline constexpr double kDefaultJitterDb = 0.5;

enum class EmbeddingSource { frc_encoder, vlm_service };
const char* to_string(EmbeddingSource s);
EmbeddingSource embedding_source_from_string(const std::string& s);

struct DeviceEmbedding {
  std::vector<float> vector;
  std::string device_name;
  EmbeddingSource source = EmbeddingSource::frc_encoder;
  int pool_index = 0;

  // Length 4096, finite, not all zero.
  void validate() const;
};

// Feature layout fed to the projection: magnitudes (480), deviation from the
// target (480), 16 band means over equal log-frequency spans, 15 differences
// of adjacent band means.
inline constexpr std::size_t kBandCount = 16;
inline constexpr std::size_t kFrcFeatureDim = 2 * kStandardBands + kBandCount + (kBandCount - 1);
std::vector<double> frc_features(const FrequencyResponse& frc, const TargetCurve& target);

DeviceEmbedding extract_embedding_frc_encoder(const FrequencyResponse& frc, const TargetCurve& target,
                                              const std::string& device_name, int pool_index, std::uint64_t seed,
                                              double jitter_db = kDefaultJitterDb);

// {name} and {axes} are substituted; <image> marks where the graph goes.
struct PromptTemplate {
  std::string text;

  static constexpr const char* kImageToken = "<image>";
  static PromptTemplate default_template();
  void validate() const;
  std::string render(const std::string& device_name, const std::string& axes = kDefaultAxes) const;

  static constexpr const char* kDefaultAxes = "x: frequency in Hz (log scale), y: magnitude in dB";
};

// Connection failures and 5xx responses. Retried.
class TransportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
// Anything the service answered that breaks the wire contract. Not retried.
class ContractError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct VlmOptions {
  int max_retries = 3;
  std::chrono::milliseconds initial_backoff{200};
  double backoff_factor = 2.0;
  std::chrono::seconds timeout{60};
};

// Environment variable consulted by the CLI for the service URL.
inline constexpr const char* kVlmEndpointEnv = "DEVSTYLE_VLM_ENDPOINT";

// POST <endpoint>/embed {"prompt", "image_b64"} -> {"embedding": [4096], "model"}.
DeviceEmbedding extract_embedding_vlm(const FrcLineGraph& graph, const PromptTemplate& prompt,
                                      const std::string& endpoint, const std::string& device_name, int pool_index,
                                      const VlmOptions& options = {});

using EmbeddingProvider =
    std::function<DeviceEmbedding(const DeviceProfile& device, int pool_index, std::uint64_t seed)>;

EmbeddingProvider frc_encoder_provider(TargetCurve target, double jitter_db = kDefaultJitterDb);
// Renders each device's graph (with the target overlaid when given) and queries the service.
EmbeddingProvider vlm_provider(std::string endpoint, PromptTemplate prompt, std::optional<TargetCurve> overlay,
                               VlmOptions options = {});

struct EmbeddingPool {
  int ep_number = 0;
  std::uint64_t seed = 0;
  EmbeddingSource source = EmbeddingSource::frc_encoder;
  std::vector<std::string> devices;
  std::map<std::string, std::vector<DeviceEmbedding>> train;
  std::map<std::string, std::vector<DeviceEmbedding>> test;

  // Counts, dimensions and train/test disjointness of (device, pool_index).
  void validate() const;
  bool has_device(const std::string& name) const { return train.count(name) != 0; }
  // The fixed held-out embedding (pool index 10000) used for validation and test.
  const DeviceEmbedding& test_embedding(const std::string& device) const;

  // <dir>/pool_manifest.json plus <dir>/<device>.f32 (train rows, then test rows).
  void save(const std::filesystem::path& dir) const;
  static EmbeddingPool load(const std::filesystem::path& dir);
};

// Calls `provider` for every (device, index) with up to `fan_out` concurrent
// calls. Any provider failure aborts the build; when `out_dir` is given, files
// written by this call are removed again.
EmbeddingPool build_pool(const std::vector<DeviceProfile>& bank, int ep_number, const EmbeddingProvider& provider,
                         std::uint64_t seed, const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                         int fan_out = 4);

const DeviceEmbedding& sample_train_embedding(const EmbeddingPool& pool, const std::string& device_name, Rng& rng);

}  // namespace devstyle
