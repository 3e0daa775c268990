#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "devstyle/audio.hpp"
#include "devstyle/datapipe.hpp"
#include "devstyle/device.hpp"

namespace devstyle {

struct PairedDataset {
  std::filesystem::path root;
  DatasetManifest manifest;
  std::vector<std::string> devices;
};

struct SynthOptions {
  std::uint64_t seed = 0;
  WavFormat format = WavFormat::float32;
  // Additive white noise on device outputs at this SNR; off by default.
  std::optional<double> target_noise_snr_db;
};

// Writes <out>/input/<file>.wav and <out>/<device>/<file>.wav for every
// (file, device) plus <out>/manifest.json. Inputs are mixed down to mono and
// resampled to 44.1 kHz on ingest; unreadable files are skipped and listed in
// the manifest warnings.
PairedDataset synthesize_paired_dataset(const std::vector<std::filesystem::path>& inputs,
                                        const std::vector<DeviceProfile>& bank, const std::filesystem::path& out_dir,
                                        const SynthOptions& options = {});

// Hermetic source material: clipNNN.wav files from generate_music_like.
std::vector<std::filesystem::path> generate_input_corpus(const std::filesystem::path& dir, int n_files,
                                                         double duration_s, std::uint64_t seed,
                                                         int sample_rate_hz = kDefaultSampleRate);

}  // namespace devstyle
