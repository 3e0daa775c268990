#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "devstyle/synth.hpp"
#include "devstyle/training.hpp"
#undef CHECK
#include "doctest.h"

using namespace devstyle;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("devstyle_test_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

// 44.1 kHz, 5 s windows, but narrow enough to train in seconds.
ModelConfig small_config() {
  ModelConfig c;
  c.n_layers = 4;
  c.base_channels = 2;
  c.transformer_depth = 1;
  c.heads = 2;
  c.model_dim = 8;
  c.stft = {512, 256};
  c.film_hidden = 8;
  return c;
}

struct Fixture {
  std::vector<DeviceProfile> bank;
  DatasetManifest data;
  EmbeddingPool pool;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture x;
    const auto dir = fresh_dir("train_data");
    x.bank = make_parametric_device_bank(3, 2);
    const auto inputs = generate_input_corpus(dir / "src", 4, 8.0, 3);
    auto ds = synthesize_paired_dataset(inputs, x.bank, dir / "out", {.seed = 3});
    x.data = build_splits(ds.manifest, {16.0 / 60, 8.0 / 60, 8.0 / 60}, 3);
    x.pool = build_pool(x.bank, 30, frc_encoder_provider(harman_target()), 3);
    return x;
  }();
  return f;
}

TrainConfig quick_config() {
  TrainConfig c;
  c.lr = 1e-3;
  c.epochs = 2;
  c.batch_size = 4;
  c.micro_batch = 4;
  c.samples_per_epoch = 8;
  c.val_samples = 4;
  c.seed = 5;
  return c;
}

}  // namespace

TEST_CASE("train config defaults") {
  const TrainConfig c;
  CHECK(c.lr == 5e-5);
  CHECK(c.weight_decay == 0.01);
  CHECK(c.beta1 == 0.9);
  CHECK(c.beta2 == 0.98);
  CHECK(c.eps == 1e-6);
  CHECK(c.epochs == 20);
  CHECK(c.batch_size == 32);
  CHECK(c.loss == "mse");
  CHECK(c.patience == 3);
  CHECK(c.grad_clip_norm == 5.0);

  CHECK(TrainConfig::from_json(nlohmann::json::parse(c.to_json().dump())).hash() == c.hash());
  CHECK_THROWS_WITH_AS(TrainConfig::from_json({{"learning_rate", 1}}), doctest::Contains("learning_rate"),
                       std::invalid_argument);
  CHECK_THROWS_AS(TrainConfig::from_json({{"lr", -1.0}}), std::invalid_argument);
  CHECK_THROWS_AS(TrainConfig::from_json({{"patience", 0}}), std::invalid_argument);
  CHECK(TrainConfig::from_json({{"epochs", 3}}).epochs == 3);
}

TEST_CASE("early stopping") {
  EarlyStopping es(2);
  const double losses[] = {1.0, 0.9, 0.95, 0.96};
  int stopped_at = 0;
  for (int i = 0; i < 4 && stopped_at == 0; ++i)
    if (es.update(losses[i])) stopped_at = i + 1;
  CHECK(stopped_at == 4);
  CHECK(es.best_epoch() == 2);
  CHECK(es.best() == 0.9);

  // The best value is always the running minimum.
  Rng rng(1);
  EarlyStopping p(3);
  double lo = 1e9;
  for (int i = 0; i < 50; ++i) {
    const double v = rng.uniform();
    lo = std::min(lo, v);
    p.update(v);
    CHECK(p.best() == lo);
  }
}

TEST_CASE("few-shot sample selection") {
  DatasetManifest m;
  m.devices = {"a", "b"};
  // 10 files of 100 windows each: 5 + 99 * 0.5 = 54.5 s.
  for (int f = 0; f < 10; ++f)
    for (const char* d : {"a", "b"}) {
      ManifestEntry e;
      e.file = "clip" + std::to_string(f) + ".wav";
      e.device = d;
      e.duration_s = 54.5;
      e.split = Split::train;
      m.entries.push_back(e);
    }
  const auto two = select_few_shot_samples(m, "a", 0.02, 1);
  CHECK(two.size() == 20);
  const auto five = select_few_shot_samples(m, "a", 0.05, 1);
  CHECK(five.size() == 50);
  std::map<std::size_t, int> per_file;
  for (const auto& s : two) {
    CHECK(m.entries[s.entry].device == "a");
    ++per_file[s.entry];
  }
  CHECK(per_file.size() == 10);
  for (const auto& [f, n] : per_file) CHECK(n == 2);
  CHECK((select_few_shot_samples(m, "a", 0.02, 1) == two));
  CHECK((select_few_shot_samples(m, "a", 0.02, 2) != two));
  CHECK(select_few_shot_samples(m, "a", 0.001, 1).size() == 1);
  CHECK_THROWS_AS(select_few_shot_samples(m, "a", 0.0, 1), std::invalid_argument);
  CHECK_THROWS_AS(select_few_shot_samples(m, "a", 1.5, 1), std::invalid_argument);
}

TEST_CASE("overfit a single batch") {
  const auto cfg = ModelConfig::miniature();
  auto model = make_model(cfg, 1);
  torch::manual_seed(2);
  const auto x = 0.3 * torch::randn({8, cfg.segment_samples()});
  // Target: a short fixed filter plus a gain.
  const auto k = torch::tensor({0.6f, 0.25f, -0.1f}).view({1, 1, 3});
  const auto y = torch::conv1d(torch::nn::functional::pad(x.unsqueeze(1), torch::nn::functional::PadFuncOptions({2, 0})), k)
                     .squeeze(1);
  const auto e = torch::randn({8, cfg.embedding_dim});
  torch::optim::AdamW opt(model->parameters(), torch::optim::AdamWOptions(3e-3).betas({0.9, 0.98}).eps(1e-6));
  double loss = 0;
  for (int step = 0; step < 500; ++step) {
    opt.zero_grad();
    auto l = (model->forward(x, e) - y).square().mean();
    l.backward();
    opt.step();
    loss = l.item<double>();
  }
  MESSAGE("final MSE " << loss);
  CHECK(loss < 1e-4);
}

TEST_CASE("train writes a run directory and resumes bit-identically") {
  const auto& fx = fixture();
  const auto dir = fresh_dir("train_run");
  auto cfg = quick_config();
  cfg.epochs = 3;

  auto full_model = make_model(small_config(), 9);
  const auto full = train(full_model, fx.pool, fx.data, cfg, {.run_dir = dir / "full"});
  REQUIRE(full.history.size() == 3);
  for (const char* f : {"config.json", "history.csv", "best.ckpt", "last.ckpt"}) CHECK(fs::exists(dir / "full" / f));
  CHECK(full.best_val_loss == std::min({full.history[0].val_loss, full.history[1].val_loss, full.history[2].val_loss}));
  CHECK(full.history[full.best_epoch - 1].val_loss == full.best_val_loss);
  // The returned model holds the best checkpoint's weights.
  CHECK(parameter_digest(full_model) == parameter_digest(load_model(dir / "full" / "best.ckpt")));
  CHECK(checkpoint_train_devices(dir / "full" / "best.ckpt") == std::vector<std::string>{"dev0", "dev1"});

  // Interrupted after two epochs, then resumed to three.
  auto part_cfg = cfg;
  part_cfg.epochs = 2;
  auto m1 = make_model(small_config(), 9);
  train(m1, fx.pool, fx.data, part_cfg, {.run_dir = dir / "part"});
  auto m2 = make_model(small_config(), 9);
  const auto resumed = train(m2, fx.pool, fx.data, cfg, {.run_dir = dir / "part", .resume = true});
  REQUIRE(resumed.history.size() == 3);
  for (int i = 0; i < 3; ++i) {
    CHECK(resumed.history[i].train_loss == full.history[i].train_loss);
    CHECK(resumed.history[i].val_loss == full.history[i].val_loss);
  }
  CHECK(slurp(dir / "part" / "history.csv") == slurp(dir / "full" / "history.csv"));
  CHECK(parameter_digest(m2) == parameter_digest(full_model));
  CHECK(parameter_digest(load_model(dir / "part" / "last.ckpt")) ==
        parameter_digest(load_model(dir / "full" / "last.ckpt")));

  auto other = cfg;
  other.lr = 2e-3;
  CHECK_THROWS_WITH(train(m2, fx.pool, fx.data, other, {.run_dir = dir / "part", .resume = true}),
                    doctest::Contains("different TrainConfig"));
}

TEST_CASE("training is reproducible and exercises the pool") {
  const auto& fx = fixture();
  auto cfg = quick_config();
  auto a = make_model(small_config(), 4);
  auto b = make_model(small_config(), 4);
  const auto ra = train(a, fx.pool, fx.data, cfg);
  const auto rb = train(b, fx.pool, fx.data, cfg);
  CHECK(parameter_digest(a) == parameter_digest(b));
  for (std::size_t i = 0; i < ra.history.size(); ++i) CHECK(ra.history[i].train_loss == rb.history[i].train_loss);
  for (const auto& [dev, draws] : ra.ep_draws) {
    std::size_t total = 0;
    for (const auto& [idx, n] : draws) {
      CHECK(idx >= 0);
      CHECK(idx < 30);
      total += n;
    }
    CHECK(draws.size() > 1);
    CHECK(total > 0);
  }
}

TEST_CASE("no_film keeps the generators at identity") {
  const auto& fx = fixture();
  auto cfg = quick_config();
  cfg.no_film = true;
  auto m = make_model(small_config(), 6);
  const auto before = m->film_e->fc1->weight.clone();
  train(m, fx.pool, fx.data, cfg);
  CHECK(torch::equal(before, m->film_e->fc1->weight));
  torch::NoGradGuard g;
  const auto x = 0.1 * torch::randn({1, small_config().segment_samples()});
  const auto y1 = m->forward(x, torch::randn({1, 4096}));
  const auto y2 = m->forward(x, torch::randn({1, 4096}));
  CHECK(torch::equal(y1, y2));
}

TEST_CASE("non-finite loss aborts with a diagnostic") {
  const auto& fx = fixture();
  auto m = make_model(small_config(), 7);
  {
    torch::NoGradGuard g;
    m->named_parameters()["head.bias"].fill_(std::nan(""));
  }
  CHECK_THROWS_WITH_AS(train(m, fx.pool, fx.data, quick_config()),
                       doctest::Contains("iteration 1 (epoch 1, device dev"), NonFiniteLossError);
  try {
    train(m, fx.pool, fx.data, quick_config());
  } catch (const NonFiniteLossError& e) {
    CHECK(std::string(e.what()).find("lr 0.001") != std::string::npos);
  }
}

TEST_CASE("few-shot adaptation protocol") {
  const auto& fx = fixture();
  const auto dir = fresh_dir("fewshot");
  auto cfg = quick_config();
  cfg.epochs = 1;

  auto leaky = make_model(small_config(), 8);
  train(leaky, fx.pool, fx.data, cfg, {.run_dir = dir / "leaky"});
  CHECK_THROWS_AS(few_shot_adapt(dir / "leaky" / "best.ckpt", "dev1", 0.05, fx.data, fx.pool, cfg), ProtocolError);

  auto base = make_model(small_config(), 8);
  train(base, fx.pool, fx.data, cfg, {.devices = {"dev0"}, .run_dir = dir / "base"});
  const auto r = few_shot_adapt(dir / "base" / "best.ckpt", "dev1", 0.5, fx.data, fx.pool, cfg,
                                {.run_dir = dir / "tuned"});
  const auto n_train = enumerate_samples(fx.data, Split::train, {"dev1"}).size();
  CHECK(r.tuning_samples.size() == (n_train + 1) / 2);
  CHECK(r.before.rows.size() == 1);
  CHECK(r.after.rows.size() == 1);
  CHECK(r.after.rows[0].device == "dev1");
  const auto seen = checkpoint_train_devices(dir / "tuned" / "best.ckpt");
  CHECK(std::set<std::string>(seen.begin(), seen.end()) == std::set<std::string>{"dev0", "dev1"});
}
