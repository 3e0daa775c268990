#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "devstyle/datapipe.hpp"
#include "devstyle/synth.hpp"
#include "doctest.h"

using namespace devstyle;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("devstyle_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

DatasetManifest fake_manifest(int n_files, double duration_s, const std::vector<std::string>& devices) {
  DatasetManifest m;
  m.devices = devices;
  for (int i = 0; i < n_files; ++i)
    for (const auto& d : devices) {
      ManifestEntry e;
      e.file = "clip" + std::to_string(100 + i) + ".wav";
      e.device = d;
      e.input_path = "input/" + e.file;
      e.target_path = d + "/" + e.file;
      e.duration_s = duration_s;
      e.frames = static_cast<std::int64_t>(duration_s * 44100);
      m.entries.push_back(e);
    }
  m.recompute_segment_counts();
  return m;
}

}  // namespace

TEST_CASE("window_file") {
  CHECK(window_file(30.0).size() == 51);
  CHECK(window_file(30.0).back() == doctest::Approx(25.0));
  CHECK(window_file(4.0).empty());
  const auto one = window_file(5.0);
  REQUIRE(one.size() == 1);
  CHECK(one[0] == 0.0);
  CHECK(window_count(30.0) == static_cast<std::size_t>(std::floor((30.0 - 5.0) / 0.5)) + 1);
  CHECK_THROWS_AS(window_file(10.0, 0.0, 0.5), std::invalid_argument);
}

TEST_CASE("build_splits") {
  const std::vector<std::string> devs{"dev0", "dev1", "dev2"};
  const auto m = fake_manifest(20, 30.0, devs);

  SUBCASE("desk budgets on 20 x 30 s files give 12/3/5 files per device") {
    const auto s = build_splits(m, SplitSpec::desk(), 7);
    for (const auto& d : devs) {
      std::map<Split, int> n;
      for (const auto& e : s.entries)
        if (e.device == d) ++n[e.split];
      CHECK(n[Split::train] == 12);
      CHECK(n[Split::val] == 3);
      CHECK(n[Split::test] == 5);
      CHECK(n[Split::unassigned] == 0);
    }
    CHECK(s.segment_counts.at("train") == 3 * 12 * 51);
    CHECK(s.segment_counts.at("val") == 3 * 3 * 51);
    CHECK(s.segment_counts.at("test") == 3 * 5 * 51);
    s.validate();
  }
  SUBCASE("deterministic for a seed and file-disjoint") {
    const auto a = build_splits(m, SplitSpec::desk(), 7);
    const auto b = build_splits(m, SplitSpec::desk(), 7);
    const auto c = build_splits(m, SplitSpec::desk(), 8);
    bool differs = false;
    for (std::size_t i = 0; i < a.entries.size(); ++i) {
      CHECK(a.entries[i].split == b.entries[i].split);
      differs |= a.entries[i].split != c.entries[i].split;
    }
    CHECK(differs);
    // a file never spans two splits, and devices agree on assignment
    std::map<std::string, Split> by_file;
    for (const auto& e : a.entries) {
      const auto [it, fresh] = by_file.emplace(e.file, e.split);
      if (!fresh) CHECK(it->second == e.split);
    }
  }
  SUBCASE("insufficient audio reports per-device shortfall") {
    const auto small = fake_manifest(5, 30.0, devs);
    CHECK_THROWS_WITH_AS(build_splits(small, SplitSpec::desk(), 1), doctest::Contains("dev1"), InsufficientAudioError);
  }
  SUBCASE("full-scale budgets are the defaults") {
    const SplitSpec p;
    CHECK(p.train_minutes == 60.0);
    CHECK(p.val_minutes == 15.0);
    CHECK(p.test_minutes == 25.0);
  }
}

TEST_CASE("manifest JSON round trip and count validation") {
  auto m = build_splits(fake_manifest(20, 30.0, {"a", "b"}), SplitSpec::desk(), 3);
  m.synthesis_seed = 99;
  m.warnings.push_back("w");
  const auto dir = fresh_dir("manifest");
  m.save(dir / "manifest.json");
  const auto back = DatasetManifest::load(dir / "manifest.json");
  CHECK(back.to_json() == m.to_json());

  auto j = nlohmann::json::parse(slurp(dir / "manifest.json"));
  j["segment_counts"]["train"] = 1;
  std::ofstream(dir / "bad.json") << j.dump();
  CHECK_THROWS_WITH(DatasetManifest::load(dir / "bad.json"), doctest::Contains("recomputed"));
}

TEST_CASE("synthesize_paired_dataset") {
  const auto dir = fresh_dir("synth");
  const auto bank = make_parametric_device_bank(5, 3);
  const auto inputs = generate_input_corpus(dir / "src", 2, 6.0, 11);

  const auto ds = synthesize_paired_dataset(inputs, bank, dir / "out", {.seed = 11});
  CHECK(ds.manifest.entries.size() == 6);
  int wavs_in = 0, wavs_dev = 0;
  for (const auto& p : fs::recursive_directory_iterator(dir / "out")) {
    if (p.path().extension() != ".wav") continue;
    (p.path().parent_path().filename() == "input" ? wavs_in : wavs_dev)++;
  }
  CHECK(wavs_in == 2);
  CHECK(wavs_dev == 6);
  for (const auto& e : ds.manifest.entries) {
    const auto in = read_wav(dir / "out" / e.input_path);
    const auto out = read_wav(dir / "out" / e.target_path);
    CHECK(in.samples.size() == out.samples.size());
    CHECK(out.sample_rate_hz == 44100);
    CHECK(e.frames == static_cast<std::int64_t>(in.samples.size()));
  }

  SUBCASE("re-run is byte-identical") {
    synthesize_paired_dataset(inputs, bank, dir / "out2", {.seed = 11});
    CHECK(slurp(dir / "out/manifest.json") == slurp(dir / "out2/manifest.json"));
    for (const auto& e : ds.manifest.entries) {
      CHECK(slurp(dir / "out" / e.target_path) == slurp(dir / "out2" / e.target_path));
      CHECK(slurp(dir / "out" / e.input_path) == slurp(dir / "out2" / e.input_path));
    }
  }
  SUBCASE("corrupt inputs are skipped with a warning; other rates are resampled") {
    std::ofstream(dir / "src" / "broken.wav") << "definitely not audio";
    std::vector<double> tone(48000);
    for (std::size_t i = 0; i < tone.size(); ++i) tone[i] = 0.1 * std::sin(0.05 * static_cast<double>(i));
    write_wav(dir / "src" / "at48k.wav", tone, 48000, WavFormat::pcm16);
    auto more = inputs;
    more.push_back(dir / "src" / "broken.wav");
    more.push_back(dir / "src" / "at48k.wav");
    const auto d2 = synthesize_paired_dataset(more, bank, dir / "out3", {.seed = 11});
    REQUIRE(d2.manifest.warnings.size() == 1);
    CHECK(d2.manifest.warnings[0].find("broken.wav") != std::string::npos);
    CHECK(d2.manifest.entries.size() == 9);
    const auto re = read_wav(dir / "out3" / "input" / "at48k.wav");
    CHECK(re.sample_rate_hz == 44100);
    CHECK(re.samples.size() == 44100);
  }
}

TEST_CASE("pair iterator") {
  const auto dir = fresh_dir("pairs");
  const auto bank = make_parametric_device_bank(5, 2);
  const auto inputs = generate_input_corpus(dir / "src", 2, 30.0, 3);
  auto ds = synthesize_paired_dataset(inputs, bank, dir / "out", {.seed = 3});
  for (auto& e : ds.manifest.entries) e.split = Split::train;
  ds.manifest.recompute_segment_counts();
  const auto& m = ds.manifest;

  SUBCASE("batch sizes over 100 samples") {
    auto all = enumerate_samples(m, Split::train, {"dev0"});
    REQUIRE(all.size() == 102);
    all.resize(100);
    PairIterator it(m, all, 32, 1);
    std::vector<std::size_t> sizes;
    while (auto b = it.next()) sizes.push_back(b->size());
    CHECK(sizes == std::vector<std::size_t>{32, 32, 32, 4});
  }
  SUBCASE("input and target differ only by the device filter") {
    PairIterator it(m, Split::train, {"dev0", "dev1"}, 8, 5);
    int checked = 0;
    while (auto b = it.next()) {
      for (std::size_t i = 0; i < b->size(); ++i) {
        const auto& dev = b->devices[i] == "dev0" ? bank[0] : bank[1];
        const auto& in = b->inputs[i];
        const auto& tg = b->targets[i];
        REQUIRE(in.source_file.substr(6) == tg.source_file.substr(tg.source_file.find('/') + 1));
        CHECK(in.offset_s == tg.offset_s);
        const auto y = apply_device(in, dev);
        // Interior windows lack the filter's history from before the offset;
        // compare after one filter length.
        const std::size_t skip = in.offset_s == 0.0 ? 0 : dev.filter.taps.size();
        std::vector<double> diff;
        for (std::size_t k = skip; k < y.samples.size(); ++k) diff.push_back(y.samples[k] - tg.samples[k]);
        CHECK(rms(diff) < 1e-4);
        ++checked;
      }
      if (checked >= 24) break;
    }
    CHECK(checked >= 24);
  }
  SUBCASE("per-epoch shuffling is seeded") {
    PairIterator a(m, Split::train, {"dev0"}, 16, 42), b(m, Split::train, {"dev0"}, 16, 42), c(m, Split::train, {"dev0"}, 16, 43);
    CHECK(a.order() == b.order());
    CHECK(a.order() != c.order());
    const auto e0 = a.order();
    a.start_epoch(1);
    CHECK(a.order() != e0);
    b.start_epoch(1);
    CHECK(a.order() == b.order());
    auto sorted = a.order();
    std::sort(sorted.begin(), sorted.end(), [](const SampleRef& x, const SampleRef& y) {
      return std::tie(x.entry, x.offset_s) < std::tie(y.entry, y.offset_s);
    });
    CHECK(sorted == a.samples());
  }
  SUBCASE("missing target file names the file") {
    fs::remove(dir / "out" / "dev1" / "clip001.wav");
    CHECK_THROWS_WITH(PairIterator(m, Split::train, {"dev1"}, 4, 1), doctest::Contains("dev1/clip001.wav"));
  }
}
