#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "devstyle/model.hpp"
#include "devstyle/rng.hpp"
#undef CHECK
#include "doctest.h"

using namespace devstyle;
namespace fs = std::filesystem;

namespace {

torch::Tensor noise(std::int64_t b, std::int64_t n, std::uint64_t seed, torch::Dtype dt = torch::kFloat) {
  torch::manual_seed(seed);
  return torch::randn({b, n}, torch::TensorOptions().dtype(dt));
}

// Exact energy seen by the analysis frames: reflect-padded signal weighted by the
// summed squared window covering each sample.
double framed_energy(const std::vector<double>& x, int n_fft, int hop) {
  const int pad = n_fft / 2;
  const auto n = static_cast<int>(x.size());
  std::vector<double> xp(x.size() + 2 * pad);
  for (int i = 0; i < static_cast<int>(xp.size()); ++i) {
    int j = i - pad;
    if (j < 0) j = -j;
    if (j >= n) j = 2 * (n - 1) - j;
    xp[i] = x[j];
  }
  const int frames = 1 + n / hop;
  double e = 0;
  for (int t = 0; t < frames; ++t)
    for (int k = 0; k < n_fft; ++k) {
      const double w = 0.5 - 0.5 * std::cos(2 * std::numbers::pi * k / n_fft);
      e += w * w * xp[t * hop + k] * xp[t * hop + k];
    }
  return e;
}

double two_sided_power(const torch::Tensor& spec) {
  auto p = (spec.select(1, 0).square() + spec.select(1, 1).square()).to(torch::kDouble);
  const auto f = p.size(1);
  return (2.0 * p.sum() - p.select(1, 0).sum() - p.select(1, f - 1).sum()).item<double>();
}

}  // namespace

TEST_CASE("stft round trip") {
  StftConfig cfg;
  const auto x = noise(2, 44100, 1);
  const auto spec = stft(x, cfg);
  CHECK(spec.sizes() == torch::IntArrayRef{2, 2, 1025, 44100 / 512 + 1});
  const auto y = istft(spec, cfg, 44100);
  const double rms = (y - x).square().mean().sqrt().item<double>();
  CHECK(rms < 1e-5);

  CHECK_THROWS_AS(stft(torch::zeros({1, 100}), cfg), std::invalid_argument);
  CHECK(istft(torch::zeros_like(spec), cfg, 44100).abs().max().item<double>() == 0.0);

  const auto a = stft(noise(1, 8192, 2, torch::kDouble), cfg);
  const auto b = stft(noise(1, 8192, 3, torch::kDouble), cfg);
  const auto lin = istft(a + b, cfg, 8192) - istft(a, cfg, 8192) - istft(b, cfg, 8192);
  CHECK(lin.abs().max().item<double>() < 1e-9);
  CHECK(istft(a, cfg, 9000).size(1) == 9000);
}

TEST_CASE("stft of a sinusoid") {
  StftConfig cfg;
  const int sr = 44100;
  auto x = torch::arange(sr, torch::kDouble) * (2 * std::numbers::pi * 1000.0 / sr);
  const auto spec = stft(x.sin(), cfg);
  const auto p = spec.select(1, 0).square() + spec.select(1, 1).square();
  // A Hann window spreads a sinusoid over its main lobe, so the nearest bin alone holds
  // about half the energy; it and its two neighbours hold the rest.
  const double f_bin = 1000.0 * cfg.n_fft / sr;
  const auto bin = static_cast<std::int64_t>(std::lround(f_bin));
  const auto lobe = p[0].narrow(0, bin - 1, 3);
  for (std::int64_t t = 2; t < p.size(2) - 2; t += 7) {
    const auto col = p[0].select(1, t);
    CHECK(lobe.select(1, t).sum().item<double>() / col.sum().item<double>() > 0.9);
    CHECK(col.argmax().item<std::int64_t>() == bin);
  }
}

TEST_CASE("stft parseval") {
  StftConfig cfg;
  Rng rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<double> x(30000 + 997 * trial);
    for (auto& v : x) v = rng.normal();
    const auto t = torch::from_blob(x.data(), {1, static_cast<std::int64_t>(x.size())}, torch::kDouble).clone();
    const double e_spec = two_sided_power(stft(t, cfg)) / cfg.n_fft;
    CHECK(e_spec == doctest::Approx(framed_energy(x, cfg.n_fft, cfg.hop)).epsilon(1e-9));
    // Overlap factor sum(w^2)/hop = 3N/8/hop for a Hann window.
    double ex = 0;
    for (double v : x) ex += v * v;
    CHECK(std::abs(e_spec / (0.375 * cfg.n_fft / cfg.hop) / ex - 1.0) < 0.01);
  }
}

TEST_CASE("film_apply") {
  torch::manual_seed(3);
  const auto x = torch::randn({2, 3, 5, 7}, torch::kDouble);
  const auto beta = torch::randn({2, 3, 5}, torch::kDouble);
  CHECK(torch::equal(film_apply(x, {torch::ones({2, 3, 5}, torch::kDouble), torch::zeros({2, 3, 5}, torch::kDouble)}), x));
  const auto y = film_apply(x, {torch::zeros({2, 3, 5}, torch::kDouble), beta});
  CHECK(torch::equal(y, beta.unsqueeze(-1).expand_as(x)));

  const FilmParams p{torch::randn({2, 3, 5}, torch::kDouble), beta};
  for (double a : {0.5, -2.0, 3.0}) {
    const auto d = film_apply(a * x, p) - a * film_apply(x, p);
    CHECK((d - (1 - a) * beta.unsqueeze(-1)).abs().max().item<double>() < 1e-12);
  }
  CHECK_THROWS_AS(film_apply(x, {torch::ones({2, 4, 5}), torch::zeros({2, 4, 5})}), std::invalid_argument);
  CHECK_THROWS_AS(film_apply(x, {torch::ones({2, 3, 6}), torch::zeros({2, 3, 6})}), std::invalid_argument);
  // Per-channel parameters broadcast over frequency.
  CHECK(film_apply(x, {torch::ones({2, 3, 1}), torch::zeros({2, 3, 1})}).sizes() == x.sizes());
}

TEST_CASE("film generator") {
  torch::manual_seed(1);
  FilmGenerator g(4096, 64, 16, 1025);
  const auto p = g(torch::randn({3, 4096}));
  CHECK(p.alpha.sizes() == torch::IntArrayRef{3, 16, 1025});
  CHECK(p.beta.sizes() == torch::IntArrayRef{3, 16, 1025});
  CHECK(torch::equal(p.alpha, torch::ones_like(p.alpha)));
  CHECK(torch::equal(p.beta, torch::zeros_like(p.beta)));
  CHECK_THROWS_WITH_AS(g(torch::randn({1, 4095})), doctest::Contains("4096"), std::invalid_argument);
}

TEST_CASE("model shapes and inertness at init") {
  const auto cfg = ModelConfig::toy();
  auto m = make_model(cfg, 7);
  torch::NoGradGuard g;
  const auto x = noise(2, cfg.segment_samples(), 5);
  const auto y1 = m->forward(x, torch::randn({2, 4096}));
  const auto y2 = m->forward(x, torch::randn({2, 4096}));
  CHECK(y1.sizes() == x.sizes());
  CHECK((y1 - y2).abs().max().item<double>() < 1e-6);
  // Zero-initialised last decoders and a pseudo-inverse head make the untrained model the identity.
  CHECK((y1 - x).square().mean().sqrt().item<double>() < 1e-4);
  CHECK_THROWS_AS(m->forward(x, torch::randn({3, 4096})), std::invalid_argument);

  // Other valid lengths are preserved too.
  for (std::int64_t len : {2048, 5001, 12345}) CHECK(m->forward(noise(1, len, 6), torch::randn({1, 4096})).size(1) == len);

  CHECK(make_model(cfg, 1)->parameter_count() == make_model(cfg, 2)->parameter_count());
  auto per_channel = cfg;
  per_channel.film_per_frequency = false;
  CHECK(make_model(per_channel, 1)->parameter_count() < m->parameter_count());
}

TEST_CASE("model config") {
  CHECK_NOTHROW(ModelConfig::full_scale().validate());
  CHECK_NOTHROW(ModelConfig::miniature().validate());
  auto bad = ModelConfig::toy();
  bad.n_layers = 6;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = ModelConfig::toy();
  bad.model_dim = 130;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  const auto c = ModelConfig::miniature();
  CHECK(ModelConfig::from_json(nlohmann::json::parse(c.to_json().dump())).to_json() == c.to_json());
}

TEST_CASE("embedding gradient flows after a step") {
  auto cfg = ModelConfig::miniature();
  auto m = make_model(cfg, 3);
  torch::optim::AdamW opt(m->parameters(), torch::optim::AdamWOptions(1e-2));
  const auto x = noise(4, cfg.segment_samples(), 9);
  const auto target = 0.5 * x;
  torch::manual_seed(10);
  auto e = torch::randn({4, cfg.embedding_dim});

  auto loss = (m->forward(x, e) - target).square().mean();
  opt.zero_grad();
  loss.backward();
  opt.step();

  auto ev = e.clone().requires_grad_(true);
  (m->forward(x, ev) - target).square().mean().backward();
  CHECK(ev.grad().abs().max().item<double>() > 0.0);
}

TEST_CASE("finite-difference gradient check") {
  auto cfg = ModelConfig::miniature();
  auto m = make_model(cfg, 11);
  m->to(torch::kDouble);
  torch::manual_seed(12);
  {
    torch::NoGradGuard g;
    for (auto& p : m->parameters()) p.add_(0.05 * torch::randn_like(p));
  }
  const auto x = noise(2, cfg.segment_samples(), 13, torch::kDouble);
  const auto target = torch::roll(x, 3, 1);
  const auto e = torch::randn({2, cfg.embedding_dim}, torch::kDouble);
  const auto loss_fn = [&] { return (m->forward(x, e) - target).square().sum(); };

  m->zero_grad();
  auto l0 = loss_fn();
  l0.backward();
  // Keys' biases have an exactly zero gradient (softmax shift invariance); the floor
  // keeps roundoff in such coordinates from dominating the relative error.
  const double floor = 1e-6 * std::max(1.0, l0.item<double>());

  auto named = m->named_parameters();
  std::vector<std::pair<std::string, torch::Tensor>> params;
  for (auto& p : named) params.emplace_back(p.key(), p.value());
  Rng rng(14);
  std::vector<std::size_t> picks;
  // Always include both FiLM generators.
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i].first.rfind("film_b.fc", 0) == 0 || params[i].first.rfind("film_e.fc", 0) == 0) picks.push_back(i);
  while (picks.size() < 64) picks.push_back(rng.below(params.size()));

  const double h = 1e-3;
  double worst = 0;
  std::string worst_name;
  double worst_a = 0, worst_n = 0;
  torch::NoGradGuard g;
  for (auto i : picks) {
    auto& [name, p] = params[i];
    auto flat = p.view(-1);
    const auto j = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(flat.numel())));
    const double analytic = p.grad().view(-1)[j].item<double>();
    const double orig = flat[j].item<double>();
    flat[j] = orig + h;
    const double lp = loss_fn().item<double>();
    flat[j] = orig - h;
    const double lm = loss_fn().item<double>();
    flat[j] = orig;
    const double numeric = (lp - lm) / (2 * h);
    const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
    if (rel > worst) {
      worst = rel;
      worst_name = name;
      worst_a = analytic;
      worst_n = numeric;
    }
  }
  MESSAGE("worst relative error " << worst << " at " << worst_name << " " << worst_a << " " << worst_n);
  CHECK(worst < 1e-4);
}

TEST_CASE("checkpoint round trip and determinism") {
  const auto cfg = ModelConfig::miniature();
  auto a = make_model(cfg, 21);
  auto b = make_model(cfg, 21);
  CHECK(parameter_digest(a) == parameter_digest(b));
  CHECK(parameter_digest(a) != parameter_digest(make_model(cfg, 22)));

  torch::NoGradGuard g;
  const auto x = noise(2, cfg.segment_samples(), 4);
  const auto e = torch::randn({2, cfg.embedding_dim});
  CHECK(torch::equal(a->forward(x, e), b->forward(x, e)));

  for (auto& p : a->parameters()) p.add_(0.01 * torch::randn_like(p));
  const auto path = fs::temp_directory_path() / "devstyle_test_model.ckpt";
  save_model(a, path, {{"epoch", 3}});
  nlohmann::json extra;
  auto c = load_model(path, &extra);
  CHECK(extra.at("epoch") == 3);
  CHECK(parameter_digest(c) == parameter_digest(a));
  CHECK(torch::equal(a->forward(x, e), c->forward(x, e)));

  std::ofstream(path, std::ios::binary | std::ios::trunc) << "garbage";
  CHECK_THROWS(load_model(path));
  fs::remove(path);
}
