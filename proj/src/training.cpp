#include "devstyle/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>
#include <sstream>

#include "devstyle/io.hpp"
#include "devstyle/rng.hpp"

namespace devstyle {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  const auto fail = [](const std::string& m) { throw std::invalid_argument("TrainConfig: " + m); };
  if (!(lr > 0) || !std::isfinite(lr)) fail("lr must be positive");
  if (!(eps > 0)) fail("eps must be positive");
  if (weight_decay < 0) fail("weight_decay must be non-negative");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) fail("betas must lie in [0, 1)");
  if (epochs < 1) fail("epochs must be at least 1");
  if (batch_size < 1 || micro_batch < 1) fail("batch sizes must be positive");
  if (patience < 1) fail("patience must be at least 1");
  if (loss != "mse") fail("unsupported loss '" + loss + "'");
  if (!(grad_clip_norm > 0)) fail("grad_clip_norm must be positive");
}

nlohmann::ordered_json TrainConfig::to_json() const {
  return {{"lr", lr},
          {"weight_decay", weight_decay},
          {"beta1", beta1},
          {"beta2", beta2},
          {"eps", eps},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"patience", patience},
          {"seed", seed},
          {"loss", loss},
          {"grad_clip_norm", grad_clip_norm},
          {"micro_batch", micro_batch},
          {"samples_per_epoch", samples_per_epoch},
          {"val_samples", val_samples},
          {"no_film", no_film}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("TrainConfig: expected a JSON object");
  TrainConfig c;
  const auto known = c.to_json();
  for (const auto& [k, v] : j.items())
    if (!known.contains(k)) throw std::invalid_argument("TrainConfig: unknown key '" + k + "'");
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.patience = j.value("patience", c.patience);
  c.seed = j.value("seed", c.seed);
  c.loss = j.value("loss", c.loss);
  c.grad_clip_norm = j.value("grad_clip_norm", c.grad_clip_norm);
  c.micro_batch = j.value("micro_batch", c.micro_batch);
  c.samples_per_epoch = j.value("samples_per_epoch", c.samples_per_epoch);
  c.val_samples = j.value("val_samples", c.val_samples);
  c.no_film = j.value("no_film", c.no_film);
  c.validate();
  return c;
}

std::string TrainConfig::hash() const { return sha256_hex(to_json().dump()); }

std::string TrainConfig::resume_hash() const {
  auto j = to_json();
  j.erase("epochs");
  return sha256_hex(j.dump());
}

EarlyStopping::EarlyStopping(int patience) : patience_(patience) {
  if (patience < 1) throw std::invalid_argument("EarlyStopping: patience must be at least 1");
}

bool EarlyStopping::update(double val_loss) {
  ++seen_;
  improved_ = seen_ == 1 || val_loss < best_;
  if (improved_) {
    best_ = val_loss;
    best_epoch_ = seen_;
    bad_ = 0;
  } else {
    ++bad_;
  }
  return bad_ >= patience_;
}

void EarlyStopping::restore(int seen, int best_epoch, double best, int bad) {
  seen_ = seen;
  best_epoch_ = best_epoch;
  best_ = best;
  bad_ = bad;
  improved_ = false;
}

namespace {

torch::Tensor segments_tensor(const std::vector<AudioSegment>& segs, std::size_t begin, std::size_t end) {
  const auto len = static_cast<std::int64_t>(segs.at(begin).samples.size());
  auto t = torch::empty({static_cast<std::int64_t>(end - begin), len});
  auto acc = t.accessor<float, 2>();
  for (std::size_t i = begin; i < end; ++i) {
    if (static_cast<std::int64_t>(segs[i].samples.size()) != len)
      throw std::invalid_argument("batch windows differ in length");
    for (std::int64_t k = 0; k < len; ++k)
      acc[static_cast<std::int64_t>(i - begin)][k] = static_cast<float>(segs[i].samples[static_cast<std::size_t>(k)]);
  }
  return t;
}

torch::Tensor embeddings_tensor(const std::vector<const DeviceEmbedding*>& embs, std::size_t begin, std::size_t end) {
  const auto dim = static_cast<std::int64_t>(embs.at(begin)->vector.size());
  auto t = torch::empty({static_cast<std::int64_t>(end - begin), dim});
  for (std::size_t i = begin; i < end; ++i)
    std::copy(embs[i]->vector.begin(), embs[i]->vector.end(), t[static_cast<std::int64_t>(i - begin)].data_ptr<float>());
  return t;
}

bool no_decay(const std::string& name) {
  const bool film_bias = name.rfind("film_", 0) == 0 && name.size() >= 5 && name.ends_with(".bias");
  return film_bias || name.find(".norm_") != std::string::npos;
}

std::vector<std::string> resolve_devices(const DatasetManifest& data, const EmbeddingPool& pool,
                                         const std::vector<std::string>& requested) {
  auto devs = requested.empty() ? data.devices : requested;
  for (const auto& d : devs) {
    if (std::find(data.devices.begin(), data.devices.end(), d) == data.devices.end())
      throw std::invalid_argument("train: device '" + d + "' is not in the dataset");
    if (!pool.has_device(d)) throw std::invalid_argument("train: embedding pool has no device '" + d + "'");
  }
  return devs;
}

std::vector<SampleRef> spaced_subset(const std::vector<SampleRef>& all, std::size_t cap) {
  if (cap == 0 || cap >= all.size()) return all;
  std::vector<SampleRef> out;
  for (std::size_t i = 0; i < cap; ++i) out.push_back(all[i * all.size() / cap]);
  return out;
}

struct Snapshot {
  std::vector<torch::Tensor> params;
};

Snapshot snapshot(const HybridModel& m) {
  Snapshot s;
  for (const auto& p : m->parameters()) s.params.push_back(p.detach().clone());
  return s;
}

void restore(HybridModel& m, const Snapshot& s) {
  torch::NoGradGuard g;
  auto ps = m->parameters();
  for (std::size_t i = 0; i < ps.size(); ++i) ps[i].copy_(s.params[i]);
}

std::string history_csv(const std::vector<EpochRecord>& h) {
  std::string out = "epoch,train_loss,val_loss\n";
  char buf[96];
  for (const auto& r : h) {
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g\n", r.epoch, r.train_loss, r.val_loss);
    out += buf;
  }
  return out;
}

}  // namespace

double validation_loss(HybridModel& model, const EmbeddingPool& pool, const DatasetManifest& data,
                       const std::vector<SampleRef>& samples, int micro_batch, std::shared_ptr<AudioStore> store) {
  if (samples.empty()) throw std::invalid_argument("validation_loss: no validation windows");
  torch::NoGradGuard g;
  model->eval();
  PairIterator it(data, samples, static_cast<std::size_t>(micro_batch), 0, false, std::move(store));
  it.start_epoch(0);
  double sum = 0.0;
  std::size_t n = 0;
  while (auto b = it.next()) {
    std::vector<const DeviceEmbedding*> embs;
    for (const auto& d : b->devices) embs.push_back(&pool.test_embedding(d));
    const auto x = segments_tensor(b->inputs, 0, b->size());
    const auto y = segments_tensor(b->targets, 0, b->size());
    const auto out = model->forward(x, embeddings_tensor(embs, 0, embs.size()));
    sum += (out - y).square().mean(1).sum().item<double>();
    n += b->size();
  }
  model->train();
  return sum / static_cast<double>(n);
}

TrainResult train(HybridModel& model, const EmbeddingPool& pool, const DatasetManifest& data, const TrainConfig& cfg,
                  const TrainOptions& options) {
  cfg.validate();
  const auto devices = resolve_devices(data, pool, options.devices);
  const auto log = [&](const std::string& m) {
    if (options.log) options.log(m);
  };
  auto store = options.store ? options.store : std::make_shared<AudioStore>(data.sample_rate_hz);

  const auto train_samples = options.train_samples ? *options.train_samples : enumerate_samples(data, Split::train, devices);
  if (train_samples.empty()) throw std::invalid_argument("train: no training windows");
  const auto val_samples = spaced_subset(enumerate_samples(data, Split::val, devices), cfg.val_samples);
  if (val_samples.empty()) throw std::invalid_argument("train: no validation windows");

  // Parameter groups: decoupled decay everywhere except FiLM-generator biases and LayerNorm parameters.
  std::vector<torch::Tensor> decay, plain;
  std::vector<std::pair<std::string, torch::Tensor>> trainable;
  for (auto& p : model->named_parameters()) {
    if (cfg.no_film && model->is_film_parameter(p.key())) {
      p.value().set_requires_grad(false);
      continue;
    }
    p.value().set_requires_grad(true);
    trainable.emplace_back(p.key(), p.value());
    (no_decay(p.key()) ? plain : decay).push_back(p.value());
  }
  if (cfg.no_film) {
    model->film_b->reset_to_identity();
    model->film_e->reset_to_identity();
  }
  auto opts = torch::optim::AdamWOptions(cfg.lr).betas({cfg.beta1, cfg.beta2}).eps(cfg.eps).weight_decay(cfg.weight_decay);
  std::vector<torch::optim::OptimizerParamGroup> groups;
  groups.emplace_back(decay);
  if (!plain.empty()) {
    auto nd = std::make_unique<torch::optim::AdamWOptions>(opts);
    nd->weight_decay(0.0);
    groups.emplace_back(plain, std::move(nd));
  }
  torch::optim::AdamW opt(groups, opts);

  TrainResult result;
  EarlyStopping stopper(cfg.patience);
  std::set<std::string> seen_devices(devices.begin(), devices.end());
  for (const auto& d : options.checkpoint_meta.value("train_devices", std::vector<std::string>{})) seen_devices.insert(d);

  const auto extra_meta = [&](int epoch) {
    auto extra = options.checkpoint_meta;
    extra["train_devices"] = std::vector<std::string>(seen_devices.begin(), seen_devices.end());
    extra["train_config"] = cfg.to_json();
    extra["train_config_hash"] = cfg.resume_hash();
    extra["epoch"] = epoch;
    extra["best_epoch"] = stopper.best_epoch();
    extra["best_val_loss"] = stopper.best();
    extra["bad_epochs"] = stopper.bad_epochs();
    extra["iterations"] = result.iterations;
    extra["stopped_early"] = result.stopped_early;
    auto h = nlohmann::json::array();
    for (const auto& r : result.history) h.push_back({r.epoch, r.train_loss, r.val_loss});
    extra["history"] = h;
    auto draws = nlohmann::json::object();
    for (const auto& [d, m] : result.ep_draws)
      for (const auto& [idx, n] : m) draws[d][std::to_string(idx)] = n;
    extra["ep_draws"] = draws;
    return extra;
  };
  const auto write_checkpoint = [&](const fs::path& path, int epoch, bool with_optimizer) {
    TensorArchive a;
    a.meta = {{"config", model->config().to_json()}, {"extra", extra_meta(epoch)}};
    store_parameters(model, a);
    if (with_optimizer) {
      auto steps = nlohmann::json::object();
      for (const auto& [name, p] : trainable) {
        const auto it = opt.state().find(p.unsafeGetTensorImpl());
        if (it == opt.state().end()) continue;
        const auto& s = static_cast<const torch::optim::AdamWParamState&>(*it->second);
        steps[name] = s.step();
        a.tensors.emplace_back("optim/" + name + "/exp_avg", s.exp_avg());
        a.tensors.emplace_back("optim/" + name + "/exp_avg_sq", s.exp_avg_sq());
      }
      a.meta["extra"]["optimizer_steps"] = steps;
    }
    a.save(path);
  };

  Snapshot best;
  int start_epoch = 1;
  if (options.run_dir) {
    fs::create_directories(*options.run_dir);
    const auto last = *options.run_dir / "last.ckpt";
    if (options.resume && fs::exists(last)) {
      const auto a = TensorArchive::load(last);
      const auto& extra = a.meta.at("extra");
      if (extra.at("train_config_hash") != cfg.resume_hash())
        throw std::runtime_error("train: cannot resume " + last.string() + ", it was written with a different TrainConfig");
      load_parameters(model, a);
      const auto& steps = extra.at("optimizer_steps");
      for (const auto& [name, p] : trainable) {
        if (!steps.contains(name)) continue;
        auto s = std::make_unique<torch::optim::AdamWParamState>();
        s->step(steps.at(name).get<std::int64_t>());
        s->exp_avg(a.get("optim/" + name + "/exp_avg").clone());
        s->exp_avg_sq(a.get("optim/" + name + "/exp_avg_sq").clone());
        opt.state()[p.unsafeGetTensorImpl()] = std::move(s);
      }
      for (const auto& r : extra.at("history"))
        result.history.push_back({r.at(0).get<int>(), r.at(1).get<double>(), r.at(2).get<double>()});
      stopper.restore(static_cast<int>(result.history.size()), extra.at("best_epoch").get<int>(),
                      extra.at("best_val_loss").get<double>(), extra.at("bad_epochs").get<int>());
      result.iterations = extra.at("iterations").get<std::size_t>();
      result.stopped_early = extra.at("stopped_early").get<bool>();
      for (const auto& [d, m] : extra.at("ep_draws").items())
        for (const auto& [idx, n] : m.items()) result.ep_draws[d][std::stoi(idx)] = n.get<std::size_t>();
      start_epoch = static_cast<int>(result.history.size()) + 1;
      const auto best_path = *options.run_dir / "best.ckpt";
      if (fs::exists(best_path)) {
        auto tmp = make_model(model->config(), 0);
        load_parameters(tmp, TensorArchive::load(best_path));
        best = snapshot(tmp);
      }
      log("resumed at epoch " + std::to_string(start_epoch));
    }
    nlohmann::ordered_json snap;
    snap["model"] = model->config().to_json();
    snap["train"] = cfg.to_json();
    snap["devices"] = devices;
    snap["train_windows"] = train_samples.size();
    snap["val_windows"] = val_samples.size();
    write_file_atomic(*options.run_dir / "config.json", snap.dump(2) + "\n");
  }
  if (best.params.empty()) best = snapshot(model);

  model->train();
  const auto micro = static_cast<std::size_t>(cfg.micro_batch);
  for (int epoch = start_epoch; epoch <= cfg.epochs && !result.stopped_early; ++epoch) {
    Rng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
    auto order = train_samples;
    rng.shuffle(order);
    if (cfg.samples_per_epoch > 0 && cfg.samples_per_epoch < order.size()) order.resize(cfg.samples_per_epoch);
    PairIterator it(data, order, static_cast<std::size_t>(cfg.batch_size), 0, false, store);
    it.start_epoch(0);

    double loss_sum = 0.0;
    std::size_t n_seen = 0;
    while (auto b = it.next()) {
      ++result.iterations;
      const auto bs = b->size();
      std::vector<const DeviceEmbedding*> embs;
      for (const auto& d : b->devices) {
        const auto& e = sample_train_embedding(pool, d, rng);
        ++result.ep_draws[d][e.pool_index];
        embs.push_back(&e);
      }
      opt.zero_grad();
      double batch_loss = 0.0;
      for (std::size_t s = 0; s < bs; s += micro) {
        const auto end = std::min(bs, s + micro);
        const auto x = segments_tensor(b->inputs, s, end);
        const auto y = segments_tensor(b->targets, s, end);
        const auto out = model->forward(x, embeddings_tensor(embs, s, end));
        const auto loss = (out - y).square().mean() * (static_cast<double>(end - s) / static_cast<double>(bs));
        const double lv = loss.item<double>();
        if (!std::isfinite(lv)) {
          std::string devs;
          for (std::size_t k = s; k < end; ++k) devs += (devs.empty() ? "" : ",") + b->devices[k];
          std::ostringstream msg;
          msg << "non-finite training loss at iteration " << result.iterations << " (epoch " << epoch << ", device "
              << devs << ", lr " << cfg.lr << ")";
          throw NonFiniteLossError(msg.str());
        }
        loss.backward();
        batch_loss += lv;
      }
      std::vector<torch::Tensor> ps;
      for (const auto& [name, p] : trainable) ps.push_back(p);
      torch::nn::utils::clip_grad_norm_(ps, cfg.grad_clip_norm);
      opt.step();
      loss_sum += batch_loss * static_cast<double>(bs);
      n_seen += bs;
    }

    const double train_loss = loss_sum / static_cast<double>(n_seen);
    const double val_loss = validation_loss(model, pool, data, val_samples, cfg.micro_batch, store);
    result.history.push_back({epoch, train_loss, val_loss});
    result.stopped_early = stopper.update(val_loss);
    if (stopper.improved()) best = snapshot(model);
    log("epoch " + std::to_string(epoch) + " train " + std::to_string(train_loss) + " val " +
        std::to_string(val_loss) + (stopper.improved() ? " *" : ""));

    if (options.run_dir) {
      if (stopper.improved()) write_checkpoint(*options.run_dir / "best.ckpt", epoch, false);
      write_checkpoint(*options.run_dir / "last.ckpt", epoch, true);
      write_file_atomic(*options.run_dir / "history.csv", history_csv(result.history));
    }
  }

  restore(model, best);
  for (auto& p : model->parameters()) p.set_requires_grad(true);
  result.best_epoch = stopper.best_epoch();
  result.best_val_loss = stopper.best();
  return result;
}

std::vector<SampleRef> select_few_shot_samples(const DatasetManifest& data, const std::string& device, double fraction,
                                               std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw std::invalid_argument("few-shot fraction must lie in (0, 1], got " + std::to_string(fraction));
  const auto all = enumerate_samples(data, Split::train, {device});
  if (all.empty()) throw std::invalid_argument("few-shot: device '" + device + "' has no training windows");
  const auto n = all.size();
  const auto k = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9));

  // Group windows by file (manifest order), then largest-remainder quotas.
  std::vector<std::vector<SampleRef>> files;
  for (const auto& s : all) {
    if (files.empty() || files.back().front().entry != s.entry) files.emplace_back();
    files.back().push_back(s);
  }
  std::vector<std::size_t> quota(files.size());
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t given = 0;
  for (std::size_t f = 0; f < files.size(); ++f) {
    const double exact = static_cast<double>(k) * static_cast<double>(files[f].size()) / static_cast<double>(n);
    quota[f] = static_cast<std::size_t>(std::floor(exact));
    given += quota[f];
    rem.emplace_back(exact - static_cast<double>(quota[f]), f);
  }
  std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; given < k; ++i, ++given) ++quota[rem[i].second];

  std::vector<SampleRef> out;
  for (std::size_t f = 0; f < files.size(); ++f) {
    auto w = files[f];
    Rng rng(derive_seed(data.entries[w.front().entry].file, static_cast<std::int64_t>(f), seed));
    rng.shuffle(w);
    w.resize(quota[f]);
    std::sort(w.begin(), w.end(), [](const SampleRef& a, const SampleRef& b) { return a.offset_s < b.offset_s; });
    out.insert(out.end(), w.begin(), w.end());
  }
  return out;
}

std::vector<std::string> checkpoint_train_devices(const fs::path& checkpoint) {
  const auto a = TensorArchive::load(checkpoint);
  const auto& extra = a.meta.value("extra", nlohmann::json::object());
  if (!extra.contains("train_devices"))
    throw ProtocolError("checkpoint " + checkpoint.string() + " does not record its training devices");
  return extra.at("train_devices").get<std::vector<std::string>>();
}

Predictor model_predictor(HybridModel model, int micro_batch) {
  return [model, micro_batch](const std::vector<AudioSegment>& inputs,
                              const std::vector<const DeviceEmbedding*>& embs) mutable {
    torch::NoGradGuard g;
    model->eval();
    std::vector<std::vector<double>> out;
    const auto micro = static_cast<std::size_t>(micro_batch);
    for (std::size_t s = 0; s < inputs.size(); s += micro) {
      const auto end = std::min(inputs.size(), s + micro);
      const auto y = model->forward(segments_tensor(inputs, s, end), embeddings_tensor(embs, s, end))
                         .to(torch::kDouble)
                         .contiguous();
      for (std::int64_t i = 0; i < y.size(0); ++i) {
        const double* p = y[i].data_ptr<double>();
        out.emplace_back(p, p + y.size(1));
      }
    }
    return out;
  };
}

FewShotResult few_shot_adapt(const fs::path& base_checkpoint, const std::string& target_device, double fraction,
                             const DatasetManifest& data, const EmbeddingPool& pool, const TrainConfig& cfg,
                             const TrainOptions& options) {
  const auto seen = checkpoint_train_devices(base_checkpoint);
  if (std::find(seen.begin(), seen.end(), target_device) != seen.end())
    throw ProtocolError("few-shot: base checkpoint was trained on target device '" + target_device +
                        "'; the target must be left out of base training");
  FewShotResult r;
  r.tuning_samples = select_few_shot_samples(data, target_device, fraction, cfg.seed);
  auto model = load_model(base_checkpoint);

  const EvalOptions eval{.batch_size = static_cast<std::size_t>(cfg.micro_batch), .store = options.store};
  r.before = evaluate_dataset(model_predictor(model, cfg.micro_batch), data, {target_device}, &pool, "base", eval);

  auto opts = options;
  opts.devices = {target_device};
  opts.train_samples = r.tuning_samples;
  opts.checkpoint_meta["train_devices"] = seen;
  opts.checkpoint_meta["few_shot"] = {{"target_device", target_device},
                                      {"fraction", fraction},
                                      {"tuning_windows", r.tuning_samples.size()}};
  r.training = train(model, pool, data, cfg, opts);

  std::ostringstream tag;
  tag << "few-shot " << fraction * 100.0 << "%";
  r.after = evaluate_dataset(model_predictor(model, cfg.micro_batch), data, {target_device}, &pool, tag.str(), eval);
  return r;
}

}  // namespace devstyle
