#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "devstyle/audio.hpp"
#include "json.hpp"

namespace devstyle {

inline constexpr double kSegmentSeconds = 5.0;
inline constexpr double kStrideSeconds = 0.5;

enum class Split { train, val, test, unassigned };
const char* to_string(Split s);
Split split_from_string(const std::string& s);

// Start offsets k*stride for k = 0..floor((duration - segment)/stride).
std::vector<double> window_file(double duration_s, double segment_s = kSegmentSeconds,
                                double stride_s = kStrideSeconds);
std::size_t window_count(double duration_s, double segment_s = kSegmentSeconds, double stride_s = kStrideSeconds);

// Per-device minute budgets; files are assigned whole.
struct SplitSpec {
  double train_minutes = 60.0;
  double val_minutes = 15.0;
  double test_minutes = 25.0;

  static SplitSpec full() { return {}; }
  static SplitSpec desk() { return {6.0, 1.5, 2.5}; }
};

// One (input file, device) pair.
struct ManifestEntry {
  std::string file;         // input file name, e.g. clip000.wav
  std::string device;
  std::string input_path;   // relative to the dataset root
  std::string target_path;  // relative to the dataset root
  double duration_s = 0.0;
  std::int64_t frames = 0;
  Split split = Split::unassigned;
};

struct DatasetManifest {
  std::filesystem::path root;
  int sample_rate_hz = 44100;
  double segment_s = kSegmentSeconds;
  double stride_s = kStrideSeconds;
  std::uint64_t synthesis_seed = 0;
  std::vector<std::string> devices;
  std::vector<ManifestEntry> entries;
  std::map<std::string, std::size_t> segment_counts;  // keyed by split name
  std::optional<SplitSpec> split_spec;
  std::optional<std::uint64_t> split_seed;
  std::vector<std::string> warnings;

  std::size_t count_segments(Split s) const;
  void recompute_segment_counts();
  // Throws std::runtime_error when recorded counts disagree with recomputed ones.
  void validate() const;

  nlohmann::ordered_json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j, std::filesystem::path root);
  void save(const std::filesystem::path& path) const;
  static DatasetManifest load(const std::filesystem::path& path);
};

class InsufficientAudioError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Deterministic file-level assignment: per device, files sorted by name are
// shuffled with `seed` and budgets are filled greedily to the nearest whole
// file (train, then val, then test). Leftover files stay unassigned.
DatasetManifest build_splits(const DatasetManifest& manifest, const SplitSpec& spec, std::uint64_t seed);

// Loaded WAV files shared between iterators (float storage).
class AudioStore {
 public:
  explicit AudioStore(int expected_rate_hz = 44100) : rate_(expected_rate_hz) {}
  std::shared_ptr<const std::vector<float>> get(const std::filesystem::path& path);
  void clear();

 private:
  int rate_;
  std::mutex mu_;
  std::map<std::string, std::shared_ptr<const std::vector<float>>> cache_;
};

struct SampleRef {
  std::size_t entry = 0;  // index into manifest.entries
  double offset_s = 0.0;
  bool operator==(const SampleRef&) const = default;
};

// Every window of every entry in `split` belonging to one of `devices`, in manifest order.
std::vector<SampleRef> enumerate_samples(const DatasetManifest& m, Split split, const std::vector<std::string>& devices);

struct PairBatch {
  std::vector<AudioSegment> inputs;
  std::vector<AudioSegment> targets;
  std::vector<std::string> devices;
  std::size_t size() const { return inputs.size(); }
};

// Aligned (input, device-played target) windows in batches; the order is
// reshuffled per epoch from (shuffle_seed, epoch). The final partial batch is
// yielded.
class PairIterator {
 public:
  PairIterator(const DatasetManifest& manifest, std::vector<SampleRef> samples, std::size_t batch_size,
               std::uint64_t shuffle_seed, bool shuffle = true, std::shared_ptr<AudioStore> store = nullptr);
  PairIterator(const DatasetManifest& manifest, Split split, const std::vector<std::string>& devices,
               std::size_t batch_size, std::uint64_t shuffle_seed, bool shuffle = true,
               std::shared_ptr<AudioStore> store = nullptr);

  std::size_t num_samples() const { return samples_.size(); }
  std::size_t num_batches() const { return (samples_.size() + batch_size_ - 1) / batch_size_; }
  void start_epoch(std::size_t epoch);
  std::optional<PairBatch> next();
  const std::vector<SampleRef>& order() const { return order_; }
  const std::vector<SampleRef>& samples() const { return samples_; }

 private:
  AudioSegment load(const std::string& rel_path, const SampleRef& ref) const;

  const DatasetManifest* manifest_;
  std::vector<SampleRef> samples_;
  std::vector<SampleRef> order_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  bool shuffle_;
  std::size_t cursor_ = 0;
  std::shared_ptr<AudioStore> store_;
};

}  // namespace devstyle
