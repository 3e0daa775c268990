#include <torch/torch.h>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "devstyle/io.hpp"
#include "devstyle/pipeline.hpp"

namespace fs = std::filesystem;
using namespace devstyle;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  bool quiet = false;
};

ExperimentConfig load_config(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : ExperimentConfig::load(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (c.out) cfg.out_dir = *c.out;
  cfg.validate();
  return cfg;
}

Logger make_logger(const Common& c) {
  if (c.quiet) return {};
  return [](const std::string& m) { std::cerr << m << "\n"; };
}

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "experiment config (JSON)")->check(CLI::ExistingFile);
  app->add_option("--seed", c.seed, "overrides the config seed");
  app->add_option("--out", c.out, "overrides the config output directory");
  app->add_flag("-q,--quiet", c.quiet, "no progress output");
}

std::string variant_name(int ep, bool no_film) { return no_film ? "no_film" : "EP-" + std::to_string(ep); }

void print_report(const MetricsReport& r) { std::cout << r.to_text_table() << std::flush; }

}  // namespace

int main(int argc, char** argv) {
  torch::set_num_threads(1);
  CLI::App app{"device-conditioned music transfer"};
  app.require_subcommand(1);

  Common c;
  std::optional<int> ep;
  bool flat = false;
  std::string checkpoint;
  std::vector<int> ep_numbers;
  bool no_film = false, no_harman = false;
  std::string target;

  auto* synth = app.add_subcommand("synth-data", "synthesize the paired dataset and splits");
  auto* frc = app.add_subcommand("render-frc", "render the bank's FRC graphs");
  auto* pool = app.add_subcommand("build-pool", "build a device embedding pool");
  auto* train = app.add_subcommand("train", "train on every device");
  auto* eval = app.add_subcommand("evaluate", "evaluate identity and a checkpoint on the test split");
  auto* fewshot = app.add_subcommand("fewshot", "leave-one-out base training and few-shot adaptation");
  auto* ablate = app.add_subcommand("ablate", "EP-number ablation plus the flagged conditions");
  auto* plot = app.add_subcommand("plot", "spectrograms, embedding scatter and loss curves");
  auto* run = app.add_subcommand("run", "the whole pipeline");
  for (auto* s : {synth, frc, pool, train, eval, fewshot, ablate, plot, run}) add_common(s, c);
  for (auto* s : {pool, train, eval, plot}) s->add_option("--ep", ep, "EP-number (default: config)");
  pool->add_flag("--flat", flat, "flat target instead of Harman");
  train->add_flag("--no-film", no_film, "keep FiLM generators at identity");
  eval->add_flag("--no-film", no_film, "evaluate the no_film run");
  eval->add_option("--checkpoint", checkpoint, "checkpoint (default: the trained run)");
  plot->add_option("--checkpoint", checkpoint, "checkpoint (default: the trained run)");
  fewshot->add_option("--target", target, "held-out device (default: config)");
  ablate->add_option("--ep-numbers", ep_numbers, "EP settings (default: config)")->delimiter(',');
  ablate->add_flag("--no-film", no_film, "add the no_film condition");
  ablate->add_flag("--no-harman", no_harman, "add the flat-target condition");

  CLI11_PARSE(app, argc, argv);

  try {
    auto cfg = load_config(c);
    const auto log = make_logger(c);
    const int n = ep.value_or(cfg.ep_number);

    if (synth->parsed()) {
      Pipeline p(cfg, log);
      const auto& m = p.synthesize();
      std::cout << m.entries.size() << " pairs, " << m.count_segments(Split::train) << " train / "
                << m.count_segments(Split::val) << " val / " << m.count_segments(Split::test) << " test windows\n";
    } else if (frc->parsed()) {
      Pipeline(cfg, log).render_frc_graphs();
    } else if (pool->parsed()) {
      Pipeline p(cfg, log);
      const auto& ps = p.pool(n, flat);
      std::cout << ps.devices.size() << " devices, EP-" << ps.ep_number << "\n";
    } else if (train->parsed()) {
      Pipeline p(cfg, log);
      auto tc = cfg.train;
      tc.seed = cfg.seed;
      tc.no_film = tc.no_film || no_film;
      std::cout << p.train(variant_name(n, tc.no_film), n, tc).string() << "\n";
    } else if (eval->parsed()) {
      Pipeline p(cfg, log);
      const auto v = variant_name(n, no_film || cfg.train.no_film);
      const auto ckpt = checkpoint.empty() ? cfg.out_dir / "runs" / v / "best.ckpt" : fs::path(checkpoint);
      if (!fs::exists(ckpt)) throw std::runtime_error("no checkpoint at " + ckpt.string() + " (run `train` first)");
      auto report = p.evaluate_identity();
      const auto model = p.evaluate(v, ckpt, n);
      write_file_atomic(cfg.out_dir / "report.json", model.to_json().dump(2) + "\n");
      report.append(model);
      write_file_atomic(cfg.out_dir / "report.txt", report.to_text_table());
      print_report(report);
    } else if (fewshot->parsed()) {
      if (!target.empty()) cfg.few_shot.target_device = target;
      if (cfg.few_shot.target_device.empty()) throw std::invalid_argument("few-shot needs a target device (--target)");
      print_report(run_few_shot(cfg, log).report);
    } else if (ablate->parsed()) {
      cfg.ablation.no_film = cfg.ablation.no_film || no_film;
      cfg.ablation.no_harman = cfg.ablation.no_harman || no_harman;
      if (ep_numbers.empty()) ep_numbers = cfg.ablation.ep_numbers;
      const auto r = ablation_suite(cfg, ep_numbers, log);
      if (!r.report.rows.empty()) print_report(r.report);
      for (const auto& f : r.failures) std::cerr << "failed: " << f << "\n";
      return r.failures.empty() ? 0 : 1;
    } else if (plot->parsed()) {
      Pipeline p(cfg, log);
      const auto v = variant_name(n, cfg.train.no_film);
      const auto ckpt = checkpoint.empty() ? cfg.out_dir / "runs" / v / "best.ckpt" : fs::path(checkpoint);
      p.render_frc_graphs();
      p.plot(ckpt, ckpt.parent_path() / "history.csv");
    } else if (run->parsed()) {
      run_pipeline(cfg, log);
      std::cout << read_file(cfg.out_dir / "report.txt") << std::flush;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
