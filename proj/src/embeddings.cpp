#include "devstyle/embeddings.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <regex>
#include <set>
#include <thread>

#include "devstyle/io.hpp"
#include "httplib.h"
#include "json.hpp"

namespace devstyle {

namespace {

constexpr std::uint64_t kProjectionSeed = 0x9E3779B97F4A7C15ULL;

// Rows of the fixed random projection, entries N(0, 1/d_in).
const std::vector<double>& projection_matrix() {
  static const std::vector<double> w = [] {
    std::vector<double> m(kEmbeddingDim * kFrcFeatureDim);
    Rng rng(kProjectionSeed);
    const double scale = 1.0 / std::sqrt(static_cast<double>(kFrcFeatureDim));
    for (auto& v : m) v = scale * rng.normal();
    return m;
  }();
  return w;
}

bool same_grid(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::abs(a[i] - b[i]) > 1e-6 * b[i]) return false;
  return true;
}

std::string row_file_name(const std::string& device) { return device + ".f32"; }

}  // namespace

const char* to_string(EmbeddingSource s) {
  return s == EmbeddingSource::frc_encoder ? "frc_encoder" : "vlm_service";
}

EmbeddingSource embedding_source_from_string(const std::string& s) {
  if (s == "frc_encoder") return EmbeddingSource::frc_encoder;
  if (s == "vlm_service") return EmbeddingSource::vlm_service;
  throw std::invalid_argument("unknown embedding source '" + s + "'");
}

void DeviceEmbedding::validate() const {
  if (vector.size() != kEmbeddingDim)
    throw std::invalid_argument("embedding for " + device_name + " has length " + std::to_string(vector.size()) +
                                ", expected " + std::to_string(kEmbeddingDim));
  bool any = false;
  for (float v : vector) {
    if (!std::isfinite(v)) throw std::invalid_argument("embedding for " + device_name + " is not finite");
    any |= v != 0.0f;
  }
  if (!any) throw std::invalid_argument("embedding for " + device_name + " is all zero");
}

std::vector<double> frc_features(const FrequencyResponse& frc, const TargetCurve& target) {
  const auto grid = standard_grid();
  if (frc.freqs_hz.size() != kStandardBands || !same_grid(frc.freqs_hz, grid))
    throw std::invalid_argument("frc_features: response must be on the " + std::to_string(kStandardBands) +
                                "-band standard grid (got " + std::to_string(frc.freqs_hz.size()) + " bands)");
  const auto dev = deviation_from_target(frc, target);

  std::vector<double> f;
  f.reserve(kFrcFeatureDim);
  f.insert(f.end(), frc.mags_db.begin(), frc.mags_db.end());
  f.insert(f.end(), dev.begin(), dev.end());
  std::vector<double> bands(kBandCount, 0.0);
  const std::size_t per = kStandardBands / kBandCount;
  for (std::size_t b = 0; b < kBandCount; ++b) {
    for (std::size_t k = b * per; k < (b + 1) * per; ++k) bands[b] += frc.mags_db[k];
    bands[b] /= static_cast<double>(per);
  }
  f.insert(f.end(), bands.begin(), bands.end());
  for (std::size_t b = 1; b < kBandCount; ++b) f.push_back(bands[b] - bands[b - 1]);
  return f;
}

DeviceEmbedding extract_embedding_frc_encoder(const FrequencyResponse& frc, const TargetCurve& target,
                                              const std::string& device_name, int pool_index, std::uint64_t seed,
                                              double jitter_db) {
  auto f = frc_features(frc, target);
  Rng rng(derive_seed(device_name, pool_index, seed));
  for (auto& v : f) v += jitter_db * rng.normal();

  const auto& w = projection_matrix();
  std::vector<double> y(kEmbeddingDim, 0.0);
  double norm2 = 0.0;
  for (std::size_t r = 0; r < kEmbeddingDim; ++r) {
    const double* row = w.data() + r * kFrcFeatureDim;
    double acc = 0.0;
    for (std::size_t c = 0; c < kFrcFeatureDim; ++c) acc += row[c] * f[c];
    y[r] = acc;
    norm2 += acc * acc;
  }
  const double inv = 1.0 / std::sqrt(norm2);
  DeviceEmbedding e;
  e.device_name = device_name;
  e.source = EmbeddingSource::frc_encoder;
  e.pool_index = pool_index;
  e.vector.resize(kEmbeddingDim);
  for (std::size_t r = 0; r < kEmbeddingDim; ++r) e.vector[r] = static_cast<float>(y[r] * inv);
  return e;
}

PromptTemplate PromptTemplate::default_template() {
  return {std::string(kImageToken) +
          "\nAnalyze this frequency response graph for device {name}. The orange line is the Harman target. "
          "Describe bass, midrange and treble deviations."};
}

void PromptTemplate::validate() const {
  if (text.empty()) throw std::invalid_argument("prompt template is empty");
  if (text.find(kImageToken) == std::string::npos)
    throw std::invalid_argument(std::string("prompt template lacks the ") + kImageToken + " placeholder");
}

std::string PromptTemplate::render(const std::string& device_name, const std::string& axes) const {
  validate();
  std::string out = text;
  const auto replace_all = [&out](const std::string& key, const std::string& value) {
    for (std::size_t p = out.find(key); p != std::string::npos; p = out.find(key, p + value.size()))
      out.replace(p, key.size(), value);
  };
  replace_all("{name}", device_name);
  replace_all("{axes}", axes);
  return out;
}

DeviceEmbedding extract_embedding_vlm(const FrcLineGraph& graph, const PromptTemplate& prompt,
                                      const std::string& endpoint, const std::string& device_name, int pool_index,
                                      const VlmOptions& options) {
  static const std::regex kUrl(R"(^(https?://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(endpoint, m, kUrl)) throw std::invalid_argument("VLM endpoint is not a URL: " + endpoint);
  std::string path = m[2].matched ? m[2].str() : std::string();
  while (!path.empty() && path.back() == '/') path.pop_back();
  path += "/embed";

  nlohmann::json req;
  req["prompt"] = prompt.render(device_name);
  req["image_b64"] = base64_encode(graph.image_bytes);
  const std::string body = req.dump();

  httplib::Client client(m[1].str());
  client.set_connection_timeout(options.timeout);
  client.set_read_timeout(options.timeout);
  client.set_write_timeout(options.timeout);

  auto backoff = options.initial_backoff;
  for (int attempt = 0;; ++attempt) {
    std::string failure;
    auto res = client.Post(path, body, "application/json");
    if (!res) {
      failure = "request to " + endpoint + " failed: " + httplib::to_string(res.error());
    } else if (res->status >= 500) {
      failure = "service at " + endpoint + " answered HTTP " + std::to_string(res->status);
    } else if (res->status != 200) {
      throw ContractError("service at " + endpoint + " answered HTTP " + std::to_string(res->status) + ": " +
                          res->body.substr(0, 200));
    } else {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(res->body);
      } catch (const std::exception& e) {
        throw ContractError(std::string("service response is not JSON: ") + e.what());
      }
      if (!j.is_object() || !j.contains("embedding") || !j["embedding"].is_array())
        throw ContractError("service response lacks an \"embedding\" array");
      if (!j.contains("model") || !j["model"].is_string())
        throw ContractError("service response lacks a \"model\" string");
      const auto& arr = j["embedding"];
      if (arr.size() != kEmbeddingDim)
        throw ContractError("service returned an embedding of length " + std::to_string(arr.size()) +
                            ", expected " + std::to_string(kEmbeddingDim));
      DeviceEmbedding e;
      e.device_name = device_name;
      e.source = EmbeddingSource::vlm_service;
      e.pool_index = pool_index;
      e.vector.reserve(kEmbeddingDim);
      for (const auto& v : arr) {
        if (!v.is_number()) throw ContractError("service embedding contains a non-number");
        e.vector.push_back(v.get<float>());
      }
      try {
        e.validate();
      } catch (const std::invalid_argument& err) {
        throw ContractError(err.what());
      }
      return e;
    }
    if (attempt >= options.max_retries)
      throw TransportError(failure + " (after " + std::to_string(attempt + 1) + " attempts)");
    std::this_thread::sleep_for(backoff);
    backoff = std::chrono::milliseconds(static_cast<long long>(static_cast<double>(backoff.count()) *
                                                               options.backoff_factor));
  }
}

EmbeddingProvider frc_encoder_provider(TargetCurve target, double jitter_db) {
  return [target = std::move(target), jitter_db](const DeviceProfile& d, int pool_index, std::uint64_t seed) {
    return extract_embedding_frc_encoder(d.frc, target, d.name, pool_index, seed, jitter_db);
  };
}

EmbeddingProvider vlm_provider(std::string endpoint, PromptTemplate prompt, std::optional<TargetCurve> overlay,
                               VlmOptions options) {
  prompt.validate();
  return [=](const DeviceProfile& d, int pool_index, std::uint64_t) {
    const auto graph = render_line_graph({d.frc}, overlay);
    return extract_embedding_vlm(graph, prompt, endpoint, d.name, pool_index, options);
  };
}

void EmbeddingPool::validate() const {
  if (ep_number < 1) throw std::runtime_error("pool: ep_number must be >= 1");
  for (const auto& d : devices) {
    const auto tr = train.find(d);
    const auto te = test.find(d);
    if (tr == train.end() || te == test.end()) throw std::runtime_error("pool: device " + d + " is missing");
    if (static_cast<int>(tr->second.size()) != ep_number)
      throw std::runtime_error("pool: device " + d + " has " + std::to_string(tr->second.size()) +
                               " train embeddings, expected " + std::to_string(ep_number));
    if (static_cast<int>(te->second.size()) != kTestPoolSize)
      throw std::runtime_error("pool: device " + d + " has " + std::to_string(te->second.size()) +
                               " test embeddings, expected " + std::to_string(kTestPoolSize));
    std::set<int> train_idx;
    for (const auto& e : tr->second) {
      e.validate();
      if (e.device_name != d) throw std::runtime_error("pool: embedding filed under " + d + " names " + e.device_name);
      train_idx.insert(e.pool_index);
    }
    for (const auto& e : te->second) {
      e.validate();
      if (train_idx.count(e.pool_index))
        throw std::runtime_error("pool: device " + d + " pool index " + std::to_string(e.pool_index) +
                                 " is in both train and test");
    }
  }
  if (train.size() != devices.size() || test.size() != devices.size())
    throw std::runtime_error("pool: device list does not match stored embeddings");
}

const DeviceEmbedding& EmbeddingPool::test_embedding(const std::string& device) const {
  const auto it = test.find(device);
  if (it == test.end()) throw std::invalid_argument("pool has no test embeddings for device '" + device + "'");
  for (const auto& e : it->second)
    if (e.pool_index == kTestPoolBase) return e;
  throw std::runtime_error("pool: device " + device + " lacks the held-out embedding");
}

void EmbeddingPool::save(const std::filesystem::path& dir) const {
  validate();
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json j;
  j["schema"] = "devstyle.pool/1";
  j["ep_number"] = ep_number;
  j["seed"] = seed;
  j["source"] = to_string(source);
  j["dim"] = kEmbeddingDim;
  auto devs = nlohmann::ordered_json::array();
  for (const auto& d : devices) {
    std::string bytes;
    std::vector<int> train_idx, test_idx;
    for (const auto& e : train.at(d)) {
      append_f32_le(bytes, e.vector);
      train_idx.push_back(e.pool_index);
    }
    for (const auto& e : test.at(d)) {
      append_f32_le(bytes, e.vector);
      test_idx.push_back(e.pool_index);
    }
    write_file_atomic(dir / row_file_name(d), bytes);
    devs.push_back({{"device", d},
                    {"file", row_file_name(d)},
                    {"train_indices", train_idx},
                    {"test_indices", test_idx},
                    {"sha256", sha256_hex(bytes)}});
  }
  j["devices"] = std::move(devs);
  write_file_atomic(dir / "pool_manifest.json", j.dump(2) + '\n');
}

EmbeddingPool EmbeddingPool::load(const std::filesystem::path& dir) {
  const auto j = nlohmann::json::parse(read_file(dir / "pool_manifest.json"));
  if (j.value("schema", "") != "devstyle.pool/1") throw std::runtime_error("pool: unsupported schema");
  if (j.at("dim").get<std::size_t>() != kEmbeddingDim) throw std::runtime_error("pool: wrong embedding dimension");
  EmbeddingPool p;
  p.ep_number = j.at("ep_number").get<int>();
  p.seed = j.at("seed").get<std::uint64_t>();
  p.source = embedding_source_from_string(j.at("source").get<std::string>());
  for (const auto& dj : j.at("devices")) {
    const auto name = dj.at("device").get<std::string>();
    const auto bytes = read_file(dir / dj.at("file").get<std::string>());
    if (sha256_hex(bytes) != dj.at("sha256").get<std::string>())
      throw std::runtime_error("pool: checksum mismatch for " + name);
    const auto rows = parse_f32_le(bytes);
    const auto tr = dj.at("train_indices").get<std::vector<int>>();
    const auto te = dj.at("test_indices").get<std::vector<int>>();
    if (rows.size() != (tr.size() + te.size()) * kEmbeddingDim)
      throw std::runtime_error("pool: row file for " + name + " has the wrong size");
    std::size_t r = 0;
    const auto take = [&](int idx) {
      DeviceEmbedding e;
      e.device_name = name;
      e.source = p.source;
      e.pool_index = idx;
      e.vector.assign(rows.begin() + static_cast<std::ptrdiff_t>(r * kEmbeddingDim),
                      rows.begin() + static_cast<std::ptrdiff_t>((r + 1) * kEmbeddingDim));
      ++r;
      return e;
    };
    p.devices.push_back(name);
    for (int idx : tr) p.train[name].push_back(take(idx));
    for (int idx : te) p.test[name].push_back(take(idx));
  }
  p.validate();
  return p;
}

EmbeddingPool build_pool(const std::vector<DeviceProfile>& bank, int ep_number, const EmbeddingProvider& provider,
                         std::uint64_t seed, const std::optional<std::filesystem::path>& out_dir, int fan_out) {
  if (ep_number < 1) throw std::invalid_argument("build_pool: ep_number must be >= 1");
  if (bank.empty()) throw std::invalid_argument("build_pool: empty device bank");

  struct Job {
    std::size_t device;
    int pool_index;
  };
  std::vector<Job> jobs;
  for (std::size_t d = 0; d < bank.size(); ++d) {
    for (int i = 0; i < ep_number; ++i) jobs.push_back({d, i});
    for (int i = 0; i < kTestPoolSize; ++i) jobs.push_back({d, kTestPoolBase + i});
  }
  std::vector<std::optional<DeviceEmbedding>> results(jobs.size());
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mu;
  const auto worker = [&] {
    for (;;) {
      const std::size_t k = next.fetch_add(1);
      if (k >= jobs.size() || failed.load()) return;
      try {
        auto e = provider(bank[jobs[k].device], jobs[k].pool_index, seed);
        e.validate();
        results[k] = std::move(e);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mu);
        if (!error) error = std::current_exception();
        failed = true;
        return;
      }
    }
  };
  const int n_threads = std::max(1, std::min<int>(fan_out, static_cast<int>(jobs.size())));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (int t = 0; t < n_threads; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }
  if (error) std::rethrow_exception(error);

  EmbeddingPool pool;
  pool.ep_number = ep_number;
  pool.seed = seed;
  pool.source = results.front()->source;
  for (const auto& d : bank) pool.devices.push_back(d.name);
  for (std::size_t k = 0; k < jobs.size(); ++k) {
    const auto& name = bank[jobs[k].device].name;
    auto& dst = jobs[k].pool_index >= kTestPoolBase ? pool.test[name] : pool.train[name];
    dst.push_back(std::move(*results[k]));
  }
  pool.validate();

  if (out_dir) {
    try {
      pool.save(*out_dir);
    } catch (...) {
      std::error_code ec;
      std::filesystem::remove(*out_dir / "pool_manifest.json", ec);
      for (const auto& d : pool.devices) std::filesystem::remove(*out_dir / row_file_name(d), ec);
      throw;
    }
  }
  return pool;
}

const DeviceEmbedding& sample_train_embedding(const EmbeddingPool& pool, const std::string& device_name, Rng& rng) {
  const auto it = pool.train.find(device_name);
  if (it == pool.train.end() || it->second.empty())
    throw std::invalid_argument("pool has no train embeddings for device '" + device_name + "'");
  return it->second[static_cast<std::size_t>(rng.below(it->second.size()))];
}

}  // namespace devstyle
