#include "devstyle/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include "devstyle/rng.hpp"

namespace devstyle {

PairedDataset synthesize_paired_dataset(const std::vector<std::filesystem::path>& inputs,
                                        const std::vector<DeviceProfile>& bank, const std::filesystem::path& out_dir,
                                        const SynthOptions& options) {
  if (bank.empty()) throw std::invalid_argument("synthesize_paired_dataset: empty device bank");
  namespace fs = std::filesystem;
  fs::create_directories(out_dir / "input");
  for (const auto& d : bank) fs::create_directories(out_dir / d.name);

  DatasetManifest m;
  m.root = out_dir;
  m.sample_rate_hz = kDefaultSampleRate;
  m.synthesis_seed = options.seed;
  for (const auto& d : bank) m.devices.push_back(d.name);

  std::vector<fs::path> sorted = inputs;
  std::sort(sorted.begin(), sorted.end());
  std::set<std::string> taken;
  for (const auto& src : sorted) {
    const std::string name = src.stem().string() + ".wav";
    if (!taken.insert(name).second) {
      m.warnings.push_back("skipped " + src.string() + ": duplicate output name " + name);
      continue;
    }
    WavData wav;
    try {
      wav = read_wav(src);
    } catch (const std::exception& e) {
      m.warnings.push_back("skipped " + src.string() + ": " + e.what());
      continue;
    }
    if (wav.samples.empty()) {
      m.warnings.push_back("skipped " + src.string() + ": no samples");
      continue;
    }
    auto x = wav.sample_rate_hz == m.sample_rate_hz ? std::move(wav.samples)
                                                    : resample(wav.samples, wav.sample_rate_hz, m.sample_rate_hz);
    const std::string in_rel = "input/" + name;
    write_wav(out_dir / in_rel, x, m.sample_rate_hz, options.format);
    // Round-trip through the file encoding so targets are computed from
    // exactly the samples a reader will see.
    x = read_wav(out_dir / in_rel).samples;

    for (const auto& dev : bank) {
      if (dev.filter.sample_rate_hz != m.sample_rate_hz)
        throw std::invalid_argument("synthesize_paired_dataset: device '" + dev.name + "' filter is not 44.1 kHz");
      auto y = apply_fir(x, dev.filter);
      if (options.target_noise_snr_db) {
        Rng rng(derive_seed(dev.name + "/" + name, 0, options.seed));
        const double sigma = rms(y) * std::pow(10.0, -*options.target_noise_snr_db / 20.0);
        for (auto& v : y) v += sigma * rng.normal();
      }
      const std::string out_rel = dev.name + "/" + name;
      write_wav(out_dir / out_rel, y, m.sample_rate_hz, options.format);
      ManifestEntry e;
      e.file = name;
      e.device = dev.name;
      e.input_path = in_rel;
      e.target_path = out_rel;
      e.frames = static_cast<std::int64_t>(x.size());
      e.duration_s = static_cast<double>(x.size()) / m.sample_rate_hz;
      m.entries.push_back(std::move(e));
    }
  }
  m.recompute_segment_counts();
  m.save(out_dir / "manifest.json");
  return {out_dir, std::move(m), [&] {
            std::vector<std::string> names;
            for (const auto& d : bank) names.push_back(d.name);
            return names;
          }()};
}

std::vector<std::filesystem::path> generate_input_corpus(const std::filesystem::path& dir, int n_files,
                                                         double duration_s, std::uint64_t seed, int sample_rate_hz) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> out;
  for (int i = 0; i < n_files; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "clip%03d.wav", i);
    const auto path = dir / name;
    const auto x = generate_music_like(duration_s, sample_rate_hz, derive_seed("clip", i, seed));
    write_wav(path, x, sample_rate_hz, WavFormat::float32);
    out.push_back(path);
  }
  return out;
}

}  // namespace devstyle
