#include "devstyle/datapipe.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "devstyle/io.hpp"
#include "devstyle/rng.hpp"

namespace devstyle {

const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    case Split::unassigned: return "unassigned";
  }
  return "unassigned";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  if (s == "unassigned") return Split::unassigned;
  throw std::invalid_argument("unknown split '" + s + "'");
}

std::size_t window_count(double duration_s, double segment_s, double stride_s) {
  if (!(segment_s > 0) || !(stride_s > 0)) throw std::invalid_argument("window_file: segment and stride must be > 0");
  if (duration_s + 1e-9 < segment_s) return 0;
  return static_cast<std::size_t>(std::floor((duration_s - segment_s) / stride_s + 1e-9)) + 1;
}

std::vector<double> window_file(double duration_s, double segment_s, double stride_s) {
  const std::size_t n = window_count(duration_s, segment_s, stride_s);
  std::vector<double> offsets(n);
  for (std::size_t k = 0; k < n; ++k) offsets[k] = static_cast<double>(k) * stride_s;
  return offsets;
}

std::size_t DatasetManifest::count_segments(Split s) const {
  std::size_t n = 0;
  for (const auto& e : entries)
    if (e.split == s) n += window_count(e.duration_s, segment_s, stride_s);
  return n;
}

void DatasetManifest::recompute_segment_counts() {
  segment_counts.clear();
  for (const Split s : {Split::train, Split::val, Split::test}) segment_counts[to_string(s)] = count_segments(s);
}

void DatasetManifest::validate() const {
  for (const Split s : {Split::train, Split::val, Split::test}) {
    const auto it = segment_counts.find(to_string(s));
    const std::size_t recorded = it == segment_counts.end() ? 0 : it->second;
    const std::size_t actual = count_segments(s);
    if (recorded != actual)
      throw std::runtime_error(std::string("manifest: recorded ") + to_string(s) + " segment count " +
                               std::to_string(recorded) + " != recomputed " + std::to_string(actual));
  }
  // A file may not appear in two splits for the same device.
  std::map<std::pair<std::string, std::string>, Split> seen;
  for (const auto& e : entries) {
    const auto [it, inserted] = seen.emplace(std::make_pair(e.device, e.file), e.split);
    if (!inserted) throw std::runtime_error("manifest: duplicate entry for " + e.device + "/" + e.file);
  }
}

nlohmann::ordered_json DatasetManifest::to_json() const {
  nlohmann::ordered_json j;
  j["schema"] = "devstyle.manifest/1";
  j["sample_rate_hz"] = sample_rate_hz;
  j["segment_s"] = segment_s;
  j["stride_s"] = stride_s;
  j["synthesis_seed"] = synthesis_seed;
  j["devices"] = devices;
  auto files = nlohmann::ordered_json::array();
  for (const auto& e : entries) {
    nlohmann::ordered_json f;
    f["file"] = e.file;
    f["device"] = e.device;
    f["input"] = e.input_path;
    f["target"] = e.target_path;
    f["duration_s"] = e.duration_s;
    f["frames"] = e.frames;
    f["split"] = to_string(e.split);
    files.push_back(std::move(f));
  }
  j["files"] = std::move(files);
  nlohmann::ordered_json counts;
  for (const Split s : {Split::train, Split::val, Split::test}) {
    const auto it = segment_counts.find(to_string(s));
    counts[to_string(s)] = it == segment_counts.end() ? 0 : it->second;
  }
  j["segment_counts"] = std::move(counts);
  if (split_spec && split_seed) {
    j["split"] = {{"seed", *split_seed},
                  {"train_minutes", split_spec->train_minutes},
                  {"val_minutes", split_spec->val_minutes},
                  {"test_minutes", split_spec->test_minutes}};
  }
  j["warnings"] = warnings;
  return j;
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j, std::filesystem::path root) {
  if (j.value("schema", "") != "devstyle.manifest/1") throw std::runtime_error("manifest: unsupported schema");
  DatasetManifest m;
  m.root = std::move(root);
  m.sample_rate_hz = j.at("sample_rate_hz").get<int>();
  m.segment_s = j.at("segment_s").get<double>();
  m.stride_s = j.at("stride_s").get<double>();
  m.synthesis_seed = j.at("synthesis_seed").get<std::uint64_t>();
  m.devices = j.at("devices").get<std::vector<std::string>>();
  for (const auto& f : j.at("files")) {
    ManifestEntry e;
    e.file = f.at("file").get<std::string>();
    e.device = f.at("device").get<std::string>();
    e.input_path = f.at("input").get<std::string>();
    e.target_path = f.at("target").get<std::string>();
    e.duration_s = f.at("duration_s").get<double>();
    e.frames = f.at("frames").get<std::int64_t>();
    e.split = split_from_string(f.at("split").get<std::string>());
    m.entries.push_back(std::move(e));
  }
  for (const auto& [k, v] : j.at("segment_counts").items()) m.segment_counts[k] = v.get<std::size_t>();
  if (j.contains("split")) {
    const auto& s = j["split"];
    m.split_spec = SplitSpec{s.at("train_minutes").get<double>(), s.at("val_minutes").get<double>(),
                             s.at("test_minutes").get<double>()};
    m.split_seed = s.at("seed").get<std::uint64_t>();
  }
  m.warnings = j.value("warnings", std::vector<std::string>{});
  return m;
}

void DatasetManifest::save(const std::filesystem::path& path) const {
  write_file_atomic(path, to_json().dump(2) + '\n');
}

DatasetManifest DatasetManifest::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("manifest: cannot open " + path.string());
  auto m = from_json(nlohmann::json::parse(is), path.parent_path());
  m.validate();
  return m;
}

DatasetManifest build_splits(const DatasetManifest& manifest, const SplitSpec& spec, std::uint64_t seed) {
  if (spec.train_minutes < 0 || spec.val_minutes < 0 || spec.test_minutes < 0)
    throw std::invalid_argument("build_splits: budgets must be non-negative");
  DatasetManifest out = manifest;
  const double need_s = 60.0 * (spec.train_minutes + spec.val_minutes + spec.test_minutes);

  std::ostringstream shortfall;
  bool short_any = false;
  for (const auto& dev : out.devices) {
    double have = 0.0;
    for (const auto& e : out.entries)
      if (e.device == dev) have += e.duration_s;
    if (have + 1e-6 < need_s) {
      short_any = true;
      shortfall << "  " << dev << ": have " << have / 60.0 << " min, need " << need_s / 60.0 << " min (short "
                << (need_s - have) / 60.0 << " min)\n";
    }
  }
  if (short_any) throw InsufficientAudioError("build_splits: insufficient audio per device:\n" + shortfall.str());

  const double budgets[3] = {60.0 * spec.train_minutes, 60.0 * spec.val_minutes, 60.0 * spec.test_minutes};
  const Split kinds[3] = {Split::train, Split::val, Split::test};
  for (const auto& dev : out.devices) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < out.entries.size(); ++i)
      if (out.entries[i].device == dev) idx.push_back(i);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return out.entries[a].file < out.entries[b].file; });
    // Same shuffle for every device, so equal file sets get equal assignments.
    Rng rng(mix_seed(seed, 0x5B117));
    rng.shuffle(idx);
    double totals[3] = {0, 0, 0};
    for (const std::size_t i : idx) {
      auto& e = out.entries[i];
      e.split = Split::unassigned;
      for (int s = 0; s < 3; ++s) {
        // Add the file only if it brings the total closer to the budget.
        if (totals[s] + e.duration_s / 2.0 < budgets[s] - 1e-9) {
          e.split = kinds[s];
          totals[s] += e.duration_s;
          break;
        }
      }
    }
  }
  out.split_spec = spec;
  out.split_seed = seed;
  out.recompute_segment_counts();
  return out;
}

std::shared_ptr<const std::vector<float>> AudioStore::get(const std::filesystem::path& path) {
  const std::string key = path.string();
  {
    std::lock_guard lock(mu_);
    if (const auto it = cache_.find(key); it != cache_.end()) return it->second;
  }
  const auto wav = read_wav(path);
  if (wav.sample_rate_hz != rate_)
    throw WavError(path.string() + ": sample rate " + std::to_string(wav.sample_rate_hz) + " Hz, expected " +
                   std::to_string(rate_));
  auto data = std::make_shared<std::vector<float>>(wav.samples.begin(), wav.samples.end());
  std::lock_guard lock(mu_);
  return cache_.emplace(key, std::move(data)).first->second;
}

void AudioStore::clear() {
  std::lock_guard lock(mu_);
  cache_.clear();
}

std::vector<SampleRef> enumerate_samples(const DatasetManifest& m, Split split, const std::vector<std::string>& devices) {
  const std::set<std::string> wanted(devices.begin(), devices.end());
  std::vector<SampleRef> out;
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    const auto& e = m.entries[i];
    if (e.split != split || !wanted.contains(e.device)) continue;
    for (const double off : window_file(e.duration_s, m.segment_s, m.stride_s)) out.push_back({i, off});
  }
  return out;
}

PairIterator::PairIterator(const DatasetManifest& manifest, std::vector<SampleRef> samples, std::size_t batch_size,
                           std::uint64_t shuffle_seed, bool shuffle, std::shared_ptr<AudioStore> store)
    : manifest_(&manifest),
      samples_(std::move(samples)),
      batch_size_(batch_size),
      seed_(shuffle_seed),
      shuffle_(shuffle),
      store_(store ? std::move(store) : std::make_shared<AudioStore>(manifest.sample_rate_hz)) {
  if (batch_size_ == 0) throw std::invalid_argument("PairIterator: batch size must be positive");
  std::set<std::size_t> entries;
  for (const auto& s : samples_) entries.insert(s.entry);
  for (const std::size_t i : entries) {
    const auto& e = manifest_->entries.at(i);
    if (!std::filesystem::exists(manifest_->root / e.target_path))
      throw std::runtime_error("PairIterator: missing target file for device '" + e.device +
                               "': " + (manifest_->root / e.target_path).string());
    if (!std::filesystem::exists(manifest_->root / e.input_path))
      throw std::runtime_error("PairIterator: missing input file: " + (manifest_->root / e.input_path).string());
  }
  start_epoch(0);
}

PairIterator::PairIterator(const DatasetManifest& manifest, Split split, const std::vector<std::string>& devices,
                           std::size_t batch_size, std::uint64_t shuffle_seed, bool shuffle,
                           std::shared_ptr<AudioStore> store)
    : PairIterator(manifest, enumerate_samples(manifest, split, devices), batch_size, shuffle_seed, shuffle,
                   std::move(store)) {}

void PairIterator::start_epoch(std::size_t epoch) {
  order_ = samples_;
  if (shuffle_) {
    Rng rng(mix_seed(seed_, epoch));
    rng.shuffle(order_);
  }
  cursor_ = 0;
}

AudioSegment PairIterator::load(const std::string& rel_path, const SampleRef& ref) const {
  const auto& m = *manifest_;
  const auto path = m.root / rel_path;
  if (!std::filesystem::exists(path)) throw std::runtime_error("PairIterator: missing file " + path.string());
  const auto data = store_->get(path);
  const auto start = static_cast<std::size_t>(std::llround(ref.offset_s * m.sample_rate_hz));
  const auto len = static_cast<std::size_t>(std::llround(m.segment_s * m.sample_rate_hz));
  if (start + len > data->size())
    throw std::runtime_error("PairIterator: window at " + std::to_string(ref.offset_s) + " s exceeds " + path.string());
  AudioSegment seg;
  seg.sample_rate_hz = m.sample_rate_hz;
  seg.source_file = rel_path;
  seg.offset_s = ref.offset_s;
  seg.samples.assign(data->begin() + static_cast<std::ptrdiff_t>(start),
                     data->begin() + static_cast<std::ptrdiff_t>(start + len));
  return seg;
}

std::optional<PairBatch> PairIterator::next() {
  if (cursor_ >= order_.size()) return std::nullopt;
  PairBatch b;
  const std::size_t end = std::min(order_.size(), cursor_ + batch_size_);
  for (; cursor_ < end; ++cursor_) {
    const auto& ref = order_[cursor_];
    const auto& e = manifest_->entries.at(ref.entry);
    b.inputs.push_back(load(e.input_path, ref));
    b.targets.push_back(load(e.target_path, ref));
    b.devices.push_back(e.device);
  }
  return b;
}

}  // namespace devstyle
