#include "devstyle/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "devstyle/frc_graph.hpp"
#include "devstyle/io.hpp"
#include "devstyle/plot.hpp"
#include "devstyle/rng.hpp"
#include "devstyle/synth.hpp"
#include "devstyle/tsne.hpp"

namespace devstyle {

namespace fs = std::filesystem;
using json = nlohmann::json;

ModelConfig desk_model_config() {
  ModelConfig c;
  c.base_channels = 4;
  c.model_dim = 32;
  c.film_hidden = 64;
  return c;
}

ModelConfig model_preset(const std::string& name) {
  if (name == "toy") return ModelConfig::toy();
  if (name == "desk") return desk_model_config();
  if (name == "full") return ModelConfig::full_scale();
  if (name == "miniature") return ModelConfig::miniature();
  throw std::invalid_argument("unknown model preset '" + name + "' (toy, desk, full, miniature)");
}

namespace {

// Strict reader for one JSON object: unknown keys and type mismatches name their path.
class Fields {
 public:
  Fields(const json& j, std::string path, std::initializer_list<const char*> keys) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw std::invalid_argument(path_ + ": expected an object");
    std::set<std::string> known(keys.begin(), keys.end());
    for (const auto& [k, v] : j.items())
      if (!known.count(k)) throw std::invalid_argument(path_ + ": unknown key '" + k + "'");
  }

  template <class T>
  void get(const char* key, T& out) const {
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw std::invalid_argument(path_ + "." + key + ": wrong type (" + j_.at(key).type_name() + ")");
    }
  }

  const json* sub(const char* key) const { return j_.contains(key) ? &j_.at(key) : nullptr; }
  std::string path(const char* key) const { return path_ + "." + key; }

 private:
  const json& j_;
  std::string path_;
};

std::string hash_json(const json& j) { return sha256_hex(j.dump()); }

std::string percent_tag(double fraction) {
  std::ostringstream s;
  s << fraction * 100.0 << "%";
  return s.str();
}

}  // namespace

ModelConfig ExperimentConfig::model_config() const {
  auto base = devstyle::model_preset(model_preset).to_json();
  json merged = base;
  for (const auto& [k, v] : model_overrides.items())
    if (!base.contains(k)) throw std::invalid_argument("model: unknown key '" + k + "'");
  merged.merge_patch(model_overrides);
  return ModelConfig::from_json(merged);
}

void ExperimentConfig::validate() const {
  const auto fail = [](const std::string& m) { throw std::invalid_argument("config: " + m); };
  if (out_dir.empty()) fail("out_dir is empty");
  if (n_devices < 2) fail("n_devices must be at least 2");
  if (corpus.n_files < 1 || !(corpus.duration_s > 0)) fail("corpus needs files of positive duration");
  if (ep_number < 1) fail("ep_number must be at least 1");
  if (embedding.provider != "frc_encoder" && embedding.provider != "vlm")
    fail("embedding.provider must be frc_encoder or vlm");
  if (embedding.fan_out < 1) fail("embedding.fan_out must be positive");
  for (int ep : ablation.ep_numbers)
    if (ep < 1) fail("ablation.ep_numbers must be positive");
  for (double f : few_shot.fractions)
    if (!(f > 0 && f <= 1)) fail("few_shot.fractions must lie in (0, 1]");
  if (eval.batch_size < 1) fail("eval.batch_size must be positive");
  if (plots.tsne_per_device < 2) fail("plots.tsne_per_device must be at least 2");
  model_config();
  train.validate();
  if (few_shot.train) few_shot.train->validate();
}

nlohmann::ordered_json ExperimentConfig::to_json() const {
  nlohmann::ordered_json j;
  j["out_dir"] = out_dir.string();
  j["seed"] = seed;
  j["bank_seed"] = bank_seed;
  j["n_devices"] = n_devices;
  j["corpus"] = {{"input_dir", corpus.input_dir ? json(corpus.input_dir->string()) : json(nullptr)},
                 {"n_files", corpus.n_files},
                 {"duration_s", corpus.duration_s}};
  j["split"] = {{"train_minutes", split.train_minutes},
                {"val_minutes", split.val_minutes},
                {"test_minutes", split.test_minutes}};
  j["ep_number"] = ep_number;
  j["embedding"] = {{"provider", embedding.provider},
                    {"jitter_db", embedding.jitter_db},
                    {"vlm_endpoint", embedding.vlm_endpoint ? json(*embedding.vlm_endpoint) : json(nullptr)},
                    {"prompt", embedding.prompt ? json(*embedding.prompt) : json(nullptr)},
                    {"fan_out", embedding.fan_out}};
  j["model"] = {{"preset", model_preset}, {"overrides", model_overrides}};
  j["train"] = train.to_json();
  j["ablation"] = {{"no_film", ablation.no_film},
                   {"no_harman", ablation.no_harman},
                   {"ep_numbers", ablation.ep_numbers}};
  j["few_shot"] = {{"target_device", few_shot.target_device},
                   {"fractions", few_shot.fractions},
                   {"train", few_shot.train ? json(few_shot.train->to_json()) : json(nullptr)}};
  j["eval"] = {{"concat", eval.concat}, {"batch_size", eval.batch_size}};
  j["plots"] = {{"enabled", plots.enabled},
                {"tsne_per_device", plots.tsne_per_device},
                {"tsne_perplexity", plots.tsne_perplexity}};
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c;
  const Fields top(j, "config",
                   {"out_dir", "seed", "bank_seed", "n_devices", "corpus", "split", "ep_number", "embedding", "model",
                    "train", "ablation", "few_shot", "eval", "plots"});
  std::string out = c.out_dir.string();
  top.get("out_dir", out);
  c.out_dir = out;
  top.get("seed", c.seed);
  top.get("bank_seed", c.bank_seed);
  top.get("n_devices", c.n_devices);
  top.get("ep_number", c.ep_number);
  if (const auto* s = top.sub("corpus")) {
    const Fields f(*s, top.path("corpus"), {"input_dir", "n_files", "duration_s"});
    if (s->contains("input_dir") && !s->at("input_dir").is_null()) {
      std::string d;
      f.get("input_dir", d);
      c.corpus.input_dir = d;
    }
    f.get("n_files", c.corpus.n_files);
    f.get("duration_s", c.corpus.duration_s);
  }
  if (const auto* s = top.sub("split")) {
    const Fields f(*s, top.path("split"), {"train_minutes", "val_minutes", "test_minutes"});
    f.get("train_minutes", c.split.train_minutes);
    f.get("val_minutes", c.split.val_minutes);
    f.get("test_minutes", c.split.test_minutes);
  }
  if (const auto* s = top.sub("embedding")) {
    const Fields f(*s, top.path("embedding"), {"provider", "jitter_db", "vlm_endpoint", "prompt", "fan_out"});
    f.get("provider", c.embedding.provider);
    f.get("jitter_db", c.embedding.jitter_db);
    f.get("fan_out", c.embedding.fan_out);
    for (const char* k : {"vlm_endpoint", "prompt"}) {
      if (!s->contains(k) || s->at(k).is_null()) continue;
      std::string v;
      f.get(k, v);
      (std::string(k) == "prompt" ? c.embedding.prompt : c.embedding.vlm_endpoint) = v;
    }
  }
  if (const auto* s = top.sub("model")) {
    const Fields f(*s, top.path("model"), {"preset", "overrides"});
    f.get("preset", c.model_preset);
    if (const auto* o = f.sub("overrides")) {
      if (!o->is_object()) throw std::invalid_argument("config.model.overrides: expected an object");
      c.model_overrides = *o;
    }
  }
  if (const auto* s = top.sub("train")) {
    try {
      c.train = TrainConfig::from_json(*s);
    } catch (const std::exception& e) {
      throw std::invalid_argument(std::string("config.train: ") + e.what());
    }
  }
  if (const auto* s = top.sub("ablation")) {
    const Fields f(*s, top.path("ablation"), {"no_film", "no_harman", "ep_numbers"});
    f.get("no_film", c.ablation.no_film);
    f.get("no_harman", c.ablation.no_harman);
    f.get("ep_numbers", c.ablation.ep_numbers);
  }
  if (const auto* s = top.sub("few_shot")) {
    const Fields f(*s, top.path("few_shot"), {"target_device", "fractions", "train"});
    f.get("target_device", c.few_shot.target_device);
    f.get("fractions", c.few_shot.fractions);
    if (s->contains("train") && !s->at("train").is_null()) c.few_shot.train = TrainConfig::from_json(s->at("train"));
  }
  if (const auto* s = top.sub("eval")) {
    const Fields f(*s, top.path("eval"), {"concat", "batch_size"});
    f.get("concat", c.eval.concat);
    f.get("batch_size", c.eval.batch_size);
  }
  if (const auto* s = top.sub("plots")) {
    const Fields f(*s, top.path("plots"), {"enabled", "tsne_per_device", "tsne_perplexity"});
    f.get("enabled", c.plots.enabled);
    f.get("tsne_per_device", c.plots.tsne_per_device);
    f.get("tsne_perplexity", c.plots.tsne_perplexity);
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw std::invalid_argument("config " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

PipelineError::PipelineError(const std::string& stage, const fs::path& artifact, const std::string& what)
    : std::runtime_error("stage '" + stage + "' failed (" + artifact.string() + "): " + what), stage_(stage) {}

StageRunner::StageRunner(fs::path root, std::function<void(const std::string&)> log)
    : root_(std::move(root)), log_(std::move(log)) {}

std::string StageRunner::run(const std::string& name, const std::string& input_hash, const std::vector<fs::path>& outputs,
                             const std::function<void()>& body) {
  return run(name, input_hash, [outputs] { return outputs; }, body);
}

std::optional<std::string> StageRunner::recorded_state(const std::string& name, const std::string& input_hash) const {
  const auto record = root_ / "stages" / (name + ".json");
  if (!fs::exists(record)) return std::nullopt;
  try {
    const auto r = json::parse(read_file(record));
    if (r.at("input_hash") != input_hash) return std::nullopt;
    return r.at("state").get<std::string>();
  } catch (const json::exception&) {
    return std::nullopt;
  }
}

std::string StageRunner::run(const std::string& name, const std::string& input_hash,
                             const std::function<std::vector<fs::path>()>& list_outputs,
                             const std::function<void()>& body) {
  const auto record = root_ / "stages" / (name + ".json");
  const auto output_hashes = [&] {
    nlohmann::ordered_json o = json::object();
    for (const auto& p : list_outputs()) o[fs::relative(p, root_).generic_string()] = sha256_file(p);
    return o;
  };
  if (fs::exists(record)) {
    try {
      const auto r = json::parse(read_file(record));
      bool fresh = r.at("input_hash") == input_hash && r.at("state") == "done";
      for (const auto& p : fresh ? list_outputs() : std::vector<fs::path>{}) {
        if (!fresh) break;
        const auto key = fs::relative(p, root_).generic_string();
        fresh = fs::exists(p) && r.at("outputs").contains(key) && r.at("outputs").at(key) == sha256_file(p);
      }
      if (fresh) {
        if (log_) log_("[" + name + "] up to date");
        history_.push_back({name, true, input_hash});
        return hash_json(r.at("outputs"));
      }
    } catch (const json::exception&) {
      // unreadable record: rerun
    }
  }
  if (log_) log_("[" + name + "] running");
  write_file_atomic(record, nlohmann::ordered_json{{"stage", name}, {"input_hash", input_hash}, {"state", "running"}}.dump(2));
  try {
    body();
  } catch (const PipelineError&) {
    throw;
  } catch (const std::exception& e) {
    throw PipelineError(name, root_ / "stages" / (name + ".json"), e.what());
  }
  nlohmann::ordered_json out;
  try {
    out = output_hashes();
  } catch (const std::exception& e) {
    throw PipelineError(name, root_, std::string("missing output: ") + e.what());
  }
  write_file_atomic(record,
                    nlohmann::ordered_json{{"stage", name}, {"input_hash", input_hash}, {"state", "done"}, {"outputs", out}}
                            .dump(2) +
                        "\n");
  history_.push_back({name, false, input_hash});
  return hash_json(out);
}

Pipeline::Pipeline(ExperimentConfig cfg, Logger log)
    : cfg_(std::move(cfg)), log_(std::move(log)), runner_(cfg_.out_dir, log_) {
  cfg_.validate();
  bank_ = make_parametric_device_bank(cfg_.bank_seed, cfg_.n_devices);
  store_ = std::make_shared<AudioStore>();
  fs::create_directories(cfg_.out_dir);
  auto snap = cfg_.to_json();
  snap["derived_seeds"] = {{"synthesis", derive_seed("synthesis", 0, cfg_.seed)},
                           {"split", derive_seed("split", 0, cfg_.seed)},
                           {"pool", derive_seed("pool", 0, cfg_.seed)},
                           {"model_init", derive_seed("model", 0, cfg_.seed)},
                           {"train", cfg_.seed}};
  write_file_atomic(cfg_.out_dir / "experiment.json", snap.dump(2) + "\n");
}

const DatasetManifest& Pipeline::synthesize() {
  if (data_) return *data_;
  const auto root = cfg_.out_dir / "data";
  json in = {{"corpus", cfg_.to_json()["corpus"]},
             {"bank_seed", cfg_.bank_seed},
             {"n_devices", cfg_.n_devices},
             {"seed", derive_seed("synthesis", 0, cfg_.seed)}};
  std::vector<fs::path> sources;
  if (cfg_.corpus.input_dir) {
    for (const auto& e : fs::directory_iterator(*cfg_.corpus.input_dir))
      if (e.is_regular_file()) sources.push_back(e.path());
    std::sort(sources.begin(), sources.end());
    for (const auto& s : sources) in["inputs"][s.filename().string()] = sha256_file(s);
  }
  // Output list: the manifest plus every WAV it references.
  const auto synth_outputs = [&] {
    std::vector<fs::path> outs{root / "out" / "manifest.json"};
    if (fs::exists(outs[0])) {
      const auto m = DatasetManifest::load(outs[0]);
      for (const auto& e : m.entries) outs.push_back(root / "out" / e.target_path);
      std::set<std::string> inputs;
      for (const auto& e : m.entries) inputs.insert(e.input_path);
      for (const auto& p : inputs) outs.push_back(root / "out" / p);
    }
    return outs;
  };
  const auto synth_hash = runner_.run("synthesize", hash_json(in), synth_outputs, [&] {
    fs::remove_all(root);
    auto inputs = sources;
    if (cfg_.corpus.input_dir && inputs.empty())
      throw std::runtime_error("no input files in " + cfg_.corpus.input_dir->string());
    if (inputs.empty())
      inputs = generate_input_corpus(root / "src", cfg_.corpus.n_files, cfg_.corpus.duration_s,
                                     derive_seed("corpus", 0, cfg_.seed));
    SynthOptions so;
    so.seed = derive_seed("synthesis", 0, cfg_.seed);
    synthesize_paired_dataset(inputs, bank_, root / "out", so);
  });

  const auto split_path = root / "out" / "split_manifest.json";
  json sin = {{"data", synth_hash},
              {"split", cfg_.to_json()["split"]},
              {"seed", derive_seed("split", 0, cfg_.seed)}};
  data_hash_ = runner_.run("split", hash_json(sin), {split_path}, [&] {
    const auto m = DatasetManifest::load(root / "out" / "manifest.json");
    build_splits(m, cfg_.split, derive_seed("split", 0, cfg_.seed)).save(split_path);
  });
  data_ = DatasetManifest::load(split_path);
  return *data_;
}

std::string Pipeline::pool_key(int ep_number, bool flat_target) const {
  return "ep" + std::to_string(ep_number) + (flat_target ? "-flat" : "");
}

std::string Pipeline::embedding_hash() const {
  auto e = cfg_.to_json()["embedding"];
  e.erase("fan_out");
  return hash_json({{"embedding", e}, {"bank_seed", cfg_.bank_seed}, {"n_devices", cfg_.n_devices}});
}

namespace {

EmbeddingProvider make_provider(const ExperimentConfig& cfg, bool flat) {
  const auto target = flat ? flat_target() : harman_target();
  if (cfg.embedding.provider == "frc_encoder") return frc_encoder_provider(target, cfg.embedding.jitter_db);
  std::string endpoint;
  if (cfg.embedding.vlm_endpoint) {
    endpoint = *cfg.embedding.vlm_endpoint;
  } else if (const char* env = std::getenv(kVlmEndpointEnv)) {
    endpoint = env;
  } else {
    throw std::invalid_argument(std::string("vlm provider needs embedding.vlm_endpoint or $") + kVlmEndpointEnv);
  }
  PromptTemplate prompt = cfg.embedding.prompt ? PromptTemplate{*cfg.embedding.prompt} : PromptTemplate::default_template();
  return vlm_provider(endpoint, prompt, target);
}

}  // namespace

const EmbeddingPool& Pipeline::pool(int ep_number, bool flat_target) {
  const auto key = pool_key(ep_number, flat_target);
  if (const auto it = pools_.find(key); it != pools_.end()) return it->second;
  const auto dir = cfg_.out_dir / "pools" / key;
  json in = {{"embedding", embedding_hash()},
             {"ep_number", ep_number},
             {"flat_target", flat_target},
             {"seed", derive_seed("pool", 0, cfg_.seed)}};
  std::vector<fs::path> outs{dir / "pool_manifest.json"};
  for (const auto& d : bank_) outs.push_back(dir / (d.name + ".f32"));
  pool_hashes_[key] = runner_.run("pool-" + key, hash_json(in), outs, [&] {
    fs::remove_all(dir);
    build_pool(bank_, ep_number, make_provider(cfg_, flat_target), derive_seed("pool", 0, cfg_.seed), dir,
               cfg_.embedding.fan_out);
  });
  return pools_.emplace(key, EmbeddingPool::load(dir)).first->second;
}

fs::path Pipeline::train(const std::string& variant, int ep_number, const TrainConfig& tc,
                         const std::vector<std::string>& devices, bool flat_target) {
  const auto& data = synthesize();
  const auto& p = pool(ep_number, flat_target);
  const auto dir = cfg_.out_dir / "runs" / variant;
  const auto mc = cfg_.model_config();
  json in = {{"data", data_hash_},
             {"pool", pool_hashes_.at(pool_key(ep_number, flat_target))},
             {"model", mc.to_json()},
             {"train", tc.to_json()},
             {"devices", devices},
             {"model_seed", derive_seed("model", 0, cfg_.seed)}};
  const auto h = hash_json(in);
  // An interrupted run of the same stage resumes from last.ckpt; anything else starts clean.
  const bool resumable = runner_.recorded_state("train-" + variant, h) == "running";
  train_hashes_[variant] = runner_.run(
      "train-" + variant, h, {dir / "best.ckpt", dir / "history.csv"}, [&] {
        if (!resumable) fs::remove_all(dir);
        auto model = make_model(mc, derive_seed("model", 0, cfg_.seed));
        TrainOptions o;
        o.devices = devices;
        o.run_dir = dir;
        o.resume = true;
        o.store = store_;
        o.log = [&](const std::string& m) {
          if (log_) log_("[train-" + variant + "] " + m);
        };
        devstyle::train(model, p, data, tc, o);
      });
  return dir / "best.ckpt";
}

MetricsReport Pipeline::evaluate(const std::string& variant, const fs::path& checkpoint, int ep_number, bool flat_target,
                                 const std::vector<std::string>& devices) {
  const auto& data = synthesize();
  const auto& p = pool(ep_number, flat_target);
  const auto out = cfg_.out_dir / "reports" / ("eval-" + variant + ".json");
  json in = {{"checkpoint", sha256_file(checkpoint)},
             {"data", data_hash_},
             {"pool", pool_hashes_.at(pool_key(ep_number, flat_target))},
             {"variant", variant},
             {"devices", devices},
             {"eval", cfg_.to_json()["eval"]}};
  runner_.run("evaluate-" + variant, hash_json(in), {out}, [&] {
    const auto model = load_model(checkpoint);
    EvalOptions eo{.batch_size = static_cast<std::size_t>(cfg_.eval.batch_size), .concat = cfg_.eval.concat,
                   .store = store_};
    const auto rep = evaluate_dataset(model_predictor(model, cfg_.eval.batch_size), data,
                                      devices.empty() ? data.devices : devices, &p, variant, eo);
    write_file_atomic(out, rep.to_json().dump(2) + "\n");
  });
  return MetricsReport::from_json(json::parse(read_file(out)));
}

MetricsReport Pipeline::evaluate_identity() {
  const auto& data = synthesize();
  const auto out = cfg_.out_dir / "reports" / "eval-identity.json";
  json in = {{"data", data_hash_}, {"eval", cfg_.to_json()["eval"]}};
  runner_.run("evaluate-identity", hash_json(in), {out}, [&] {
    EvalOptions eo{.batch_size = static_cast<std::size_t>(cfg_.eval.batch_size), .concat = cfg_.eval.concat,
                   .store = store_};
    const auto rep = evaluate_dataset(nullptr, data, data.devices, nullptr, "identity", eo);
    write_file_atomic(out, rep.to_json().dump(2) + "\n");
  });
  return MetricsReport::from_json(json::parse(read_file(out)));
}

void Pipeline::render_frc_graphs() {
  const auto dir = cfg_.out_dir / "plots";
  std::vector<fs::path> outs{dir / "frc_all.png"};
  for (const auto& d : bank_) outs.push_back(dir / ("frc_" + d.name + ".png"));
  json in = {{"bank_seed", cfg_.bank_seed}, {"n_devices", cfg_.n_devices}};
  runner_.run("render-frc", hash_json(in), outs, [&] {
    const auto target = harman_target();
    std::vector<FrequencyResponse> all;
    for (const auto& d : bank_) {
      auto fr = d.frc;
      fr.device_name = d.name;
      all.push_back(fr);
      const auto g = render_line_graph({fr}, target);
      write_file_atomic(dir / ("frc_" + d.name + ".png"), std::string(g.image_bytes.begin(), g.image_bytes.end()));
    }
    const auto g = render_line_graph(all, target);
    write_file_atomic(dir / "frc_all.png", std::string(g.image_bytes.begin(), g.image_bytes.end()));
  });
}

namespace {

std::vector<std::vector<double>> log_spectrogram(const std::vector<double>& x) {
  const StftConfig sc;
  auto t = torch::from_blob(const_cast<double*>(x.data()), {1, static_cast<std::int64_t>(x.size())}, torch::kDouble);
  const auto s = stft(t, sc)[0];
  const auto mag = (s[0].square() + s[1].square()).sqrt();
  const auto db = (20.0 * torch::log10(mag + 1e-8)).contiguous();
  std::vector<std::vector<double>> rows(static_cast<std::size_t>(db.size(0)));
  for (std::int64_t f = 0; f < db.size(0); ++f) {
    const double* p = db[f].data_ptr<double>();
    rows[static_cast<std::size_t>(f)].assign(p, p + db.size(1));
  }
  return rows;
}

void write_png(const fs::path& path, const Canvas& c) {
  const auto bytes = c.encode_png();
  write_file_atomic(path, std::string(bytes.begin(), bytes.end()));
}

std::vector<EpochRecord> read_history(const fs::path& csv) {
  std::ifstream f(csv);
  std::string line;
  std::getline(f, line);
  std::vector<EpochRecord> out;
  while (std::getline(f, line)) {
    EpochRecord r;
    if (std::sscanf(line.c_str(), "%d,%lf,%lf", &r.epoch, &r.train_loss, &r.val_loss) == 3) out.push_back(r);
  }
  return out;
}

}  // namespace

void Pipeline::plot(const fs::path& checkpoint, const fs::path& history_csv) {
  const auto& data = synthesize();
  const auto dir = cfg_.out_dir / "plots";
  std::vector<fs::path> outs{dir / "tsne.png", dir / "loss.png"};
  for (const auto& d : bank_) outs.push_back(dir / ("spectrogram_" + d.name + ".png"));
  json in = {{"checkpoint", sha256_file(checkpoint)},
             {"history", sha256_file(history_csv)},
             {"data", data_hash_},
             {"embedding", embedding_hash()},
             {"plots", cfg_.to_json()["plots"]}};
  runner_.run("plots", hash_json(in), outs, [&] {
    const auto model = load_model(checkpoint);
    const auto predict = model_predictor(model, 1);
    const auto& p = pool(cfg_.ep_number);

    // Input / target / output spectrograms of each device's first test window.
    for (const auto& dev : data.devices) {
      PairIterator it(data, Split::test, {dev}, 1, 0, false, store_);
      it.start_epoch(0);
      const auto b = it.next();
      if (!b) continue;
      const auto pred = predict(b->inputs, {&p.test_embedding(dev)}).at(0);
      const auto a = log_spectrogram(b->inputs[0].samples);
      const auto t = log_spectrogram(b->targets[0].samples);
      const auto o = log_spectrogram(pred);
      double hi = -1e9;
      for (const auto& r : t) hi = std::max(hi, *std::max_element(r.begin(), r.end()));
      Canvas c(3 * 300 + 20, 320);
      c.blit(render_heatmap(300, 320, a, hi - 80, hi, "input"), 0, 0);
      c.blit(render_heatmap(300, 320, t, hi - 80, hi, "target " + dev), 310, 0);
      c.blit(render_heatmap(300, 320, o, hi - 80, hi, "output"), 620, 0);
      write_png(dir / ("spectrogram_" + dev + ".png"), c);
    }
    // Pool-style embeddings of every device in two dimensions.
    const auto provider = make_provider(cfg_, false);
    std::vector<DeviceEmbedding> embs;
    for (const auto& d : bank_)
      for (int i = 0; i < cfg_.plots.tsne_per_device; ++i)
        embs.push_back(provider(d, i, derive_seed("pool", 0, cfg_.seed)));
    const auto pts = project_embeddings_2d(embs, cfg_.plots.tsne_perplexity);
    std::vector<ScatterPoint> sp;
    for (const auto& q : pts) sp.push_back({q.x, q.y, q.device_name});
    AxesStyle st;
    st.title = "device embeddings (t-SNE)";
    write_png(dir / "tsne.png", render_scatter(st, sp));

    const auto hist = read_history(history_csv);
    PlotSeries tr{"train", {}, {}, series_palette()[0]}, va{"val", {}, {}, series_palette()[1]};
    for (const auto& r : hist) {
      tr.x.push_back(r.epoch);
      tr.y.push_back(r.train_loss);
      va.x.push_back(r.epoch);
      va.y.push_back(r.val_loss);
    }
    AxesStyle ls;
    ls.title = "loss";
    ls.x_label = "epoch";
    ls.y_label = "MSE";
    write_png(dir / "loss.png", render_line_plot(ls, {tr, va}));
  });
}

PipelineResult run_pipeline(const ExperimentConfig& cfg, Logger log) {
  Pipeline p(cfg, log);
  p.synthesize();
  p.pool(cfg.ep_number);
  auto tc = cfg.train;
  tc.seed = cfg.seed;
  const auto variant = tc.no_film ? std::string("no_film") : "EP-" + std::to_string(cfg.ep_number);
  const auto ckpt = p.train(variant, cfg.ep_number, tc);
  const auto identity = p.evaluate_identity();
  const auto report = p.evaluate(variant, ckpt, cfg.ep_number);
  auto both = identity;
  both.append(report);
  write_file_atomic(cfg.out_dir / "report.json", report.to_json().dump(2) + "\n");
  write_file_atomic(cfg.out_dir / "report.txt", both.to_text_table());
  if (cfg.plots.enabled) {
    p.render_frc_graphs();
    p.plot(ckpt, ckpt.parent_path() / "history.csv");
  }
  return {cfg.out_dir, report, p.stages()};
}

AblationResult ablation_suite(const ExperimentConfig& cfg, const std::vector<int>& ep_numbers, Logger log) {
  if (ep_numbers.empty()) throw std::invalid_argument("ablation_suite: ep_numbers is empty");
  Pipeline p(cfg, log);
  p.synthesize();
  auto tc = cfg.train;
  tc.seed = cfg.seed;
  tc.no_film = false;
  AblationResult r;
  const auto attempt = [&](const std::string& variant, const std::function<void()>& fn) {
    try {
      fn();
    } catch (const std::exception& e) {
      r.failures.push_back(variant + ": " + e.what());
      if (log) log("[ablation] " + variant + " failed: " + e.what());
    }
  };
  auto eps = ep_numbers;
  std::sort(eps.begin(), eps.end());
  eps.erase(std::unique(eps.begin(), eps.end()), eps.end());
  for (int ep : eps) {
    const auto v = "EP-" + std::to_string(ep);
    attempt(v, [&] { r.report.append(p.evaluate(v, p.train(v, ep, tc), ep)); });
  }
  if (cfg.ablation.no_film) {
    auto nf = tc;
    nf.no_film = true;
    attempt("W/o FiLM", [&] {
      r.report.append(p.evaluate("W/o FiLM", p.train("no_film", cfg.ep_number, nf), cfg.ep_number));
    });
  }
  if (cfg.ablation.no_harman) {
    attempt("W/o HC", [&] {
      r.report.append(p.evaluate("W/o HC", p.train("no_harman", cfg.ep_number, tc, {}, true), cfg.ep_number, true));
    });
  }
  nlohmann::ordered_json j = r.report.to_json();
  j["failures"] = r.failures;
  write_file_atomic(cfg.out_dir / "ablation.json", j.dump(2) + "\n");
  write_file_atomic(cfg.out_dir / "ablation.txt", r.report.rows.empty() ? "" : r.report.to_text_table());
  r.stages = p.stages();
  return r;
}

FewShotSummary run_few_shot(const ExperimentConfig& cfg, Logger log) {
  Pipeline p(cfg, log);
  const auto& target = cfg.few_shot.target_device;
  const auto& data = p.synthesize();
  if (std::find(data.devices.begin(), data.devices.end(), target) == data.devices.end())
    throw std::invalid_argument("few_shot.target_device '" + target + "' is not a bank device");
  std::vector<std::string> others;
  for (const auto& d : data.devices)
    if (d != target) others.push_back(d);

  auto tc = cfg.train;
  tc.seed = cfg.seed;
  const auto base = p.train("loo-" + target, cfg.ep_number, tc, others);
  auto ftc = cfg.few_shot.train ? *cfg.few_shot.train : tc;
  ftc.seed = cfg.seed;

  FewShotSummary s;
  const auto& pool = p.pool(cfg.ep_number);
  for (std::size_t i = 0; i < cfg.few_shot.fractions.size(); ++i) {
    const double f = cfg.few_shot.fractions[i];
    const auto tag = percent_tag(f);
    const auto dir = cfg.out_dir / "runs" / ("fewshot-" + target + "-" + tag);
    const auto out = cfg.out_dir / "reports" / ("fewshot-" + target + "-" + tag + ".json");
    json in = {{"base", sha256_file(base)}, {"fraction", f}, {"train", ftc.to_json()}, {"target", target}};
    StageRunner runner(cfg.out_dir, log);
    runner.run("fewshot-" + tag, hash_json(in), {out}, [&] {
      fs::remove_all(dir);
      TrainOptions o;
      o.run_dir = dir;
      o.log = [&](const std::string& m) {
        if (log) log("[fewshot-" + tag + "] " + m);
      };
      const auto r = few_shot_adapt(base, target, f, data, pool, ftc, o);
      nlohmann::ordered_json j;
      j["before"] = r.before.to_json();
      j["after"] = r.after.to_json();
      j["tuning_windows"] = r.tuning_samples.size();
      write_file_atomic(out, j.dump(2) + "\n");
    });
    const auto j = json::parse(read_file(out));
    if (i == 0) {
      auto before = MetricsReport::from_json(j.at("before"));
      s.report.append(before);
    }
    s.report.append(MetricsReport::from_json(j.at("after")));
    for (const auto& st : runner.history()) s.stages.push_back(st);
  }
  write_file_atomic(cfg.out_dir / "fewshot.json", s.report.to_json().dump(2) + "\n");
  write_file_atomic(cfg.out_dir / "fewshot.txt", s.report.to_text_table());
  for (const auto& st : p.stages()) s.stages.insert(s.stages.begin(), st);
  return s;
}

}  // namespace devstyle
