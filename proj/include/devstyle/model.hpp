#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

namespace devstyle {

struct StftConfig {
  int n_fft = 2048;
  int hop = 512;
  int freq_bins() const { return n_fft / 2 + 1; }
};

struct ModelConfig {
  int n_layers = 4;
  int base_channels = 16;
  int transformer_depth = 2;
  int heads = 4;
  int model_dim = 128;
  StftConfig stft;
  int embedding_dim = 4096;
  int film_hidden = 512;
  int sample_rate_hz = 44100;
  double segment_s = 5.0;
  // FiLM parameters per (channel, frequency); per-channel only when false.
  bool film_per_frequency = true;

  static ModelConfig toy() { return {}; }
  static ModelConfig full_scale();
  // n_layers 1, base 4, n_fft 64: small enough for finite-difference checks.
  static ModelConfig miniature();

  void validate() const;
  std::int64_t segment_samples() const;
  // Channels of the last frequency-decoder layer (where the decoder-side FiLM acts).
  int decoder_channels() const { return base_channels; }

  nlohmann::ordered_json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

// Centered, Hann-windowed STFT of [L] or [B, L] as real/imag channels: [B, 2, F, T'].
torch::Tensor stft(const torch::Tensor& x, const StftConfig& cfg);
// Inverse with overlap-add normalisation, trimmed or padded to out_len: [B, out_len].
torch::Tensor istft(const torch::Tensor& spec, const StftConfig& cfg, std::int64_t out_len);

struct FilmParams {
  torch::Tensor alpha;  // [B, C, F] (F == 1 for per-channel modulation)
  torch::Tensor beta;
};

// y[b,c,f,t] = alpha[b,c,f] * x[b,c,f,t] + beta[b,c,f]
torch::Tensor film_apply(const torch::Tensor& x, const FilmParams& p);

// Two dense layers: L2-normalised embedding -> hidden (GELU) -> 2*C*F.
// The second layer starts at zero weight with bias alpha = 1, beta = 0.
class FilmGeneratorImpl : public torch::nn::Module {
 public:
  FilmGeneratorImpl(int embedding_dim, int hidden, int channels, int freq_bins);
  FilmParams forward(const torch::Tensor& e);
  void reset_to_identity();

  int channels() const { return channels_; }
  int freq_bins() const { return freq_bins_; }

  torch::nn::Linear fc1{nullptr}, fc2{nullptr};

 private:
  int embedding_dim_, channels_, freq_bins_;
};
TORCH_MODULE(FilmGenerator);

class AttentionImpl : public torch::nn::Module {
 public:
  AttentionImpl(int dim, int heads);
  torch::Tensor forward(const torch::Tensor& q_in, const torch::Tensor& kv_in);

 private:
  int heads_;
  torch::nn::Linear q{nullptr}, k{nullptr}, v{nullptr}, o{nullptr};
};
TORCH_MODULE(Attention);

// Self-attention within each domain, cross-attention between them, then feed-forward.
class CrossDomainBlockImpl : public torch::nn::Module {
 public:
  CrossDomainBlockImpl(int dim, int heads);
  std::pair<torch::Tensor, torch::Tensor> forward(torch::Tensor f, torch::Tensor t);

 private:
  torch::nn::LayerNorm norm_sf{nullptr}, norm_st{nullptr}, norm_cf{nullptr}, norm_ct{nullptr};
  torch::nn::LayerNorm norm_ff{nullptr}, norm_ft{nullptr};
  Attention self_f{nullptr}, self_t{nullptr}, cross_f{nullptr}, cross_t{nullptr};
  torch::nn::Sequential ffn_f{nullptr}, ffn_t{nullptr};
};
TORCH_MODULE(CrossDomainBlock);

class HybridModelImpl : public torch::nn::Module {
 public:
  explicit HybridModelImpl(const ModelConfig& cfg);

  // x: [B, L] waveforms; e: [B, embedding_dim]. Returns [B, L].
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& e);

  const ModelConfig& config() const { return cfg_; }
  std::int64_t parameter_count() const;
  // Parameters of the two FiLM generators.
  std::vector<torch::Tensor> film_parameters() const;
  bool is_film_parameter(const std::string& name) const { return name.rfind("film_", 0) == 0; }

  FilmGenerator film_b{nullptr}, film_e{nullptr};

 private:
  std::pair<torch::Tensor, torch::Tensor> bottleneck(const torch::Tensor& zf, const torch::Tensor& zt);

  ModelConfig cfg_;
  torch::nn::ModuleList f_enc{nullptr}, f_dec{nullptr}, t_enc{nullptr}, t_dec{nullptr};
  torch::nn::Conv2d skip_proj{nullptr}, head{nullptr};
  torch::nn::Linear tok_f_in{nullptr}, tok_f_out{nullptr}, tok_t_in{nullptr}, tok_t_out{nullptr};
  torch::nn::ModuleList blocks{nullptr};
};
TORCH_MODULE(HybridModel);

// Builds a model with deterministic initialisation from `seed`.
HybridModel make_model(const ModelConfig& cfg, std::uint64_t seed);

// Single-file archive:
//   "DVSTCKPT" | u32 version | u64 header_len | header JSON | tensor payloads
// The header holds the model config, caller metadata and, per tensor, its
// name, shape and byte offset into the payload (float32, little-endian).
struct TensorArchive {
  nlohmann::json meta;
  std::vector<std::pair<std::string, torch::Tensor>> tensors;

  void save(const std::filesystem::path& path) const;  // atomic
  static TensorArchive load(const std::filesystem::path& path);
  const torch::Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const;
};

void save_model(const HybridModel& model, const std::filesystem::path& path, const nlohmann::json& extra = {});
HybridModel load_model(const std::filesystem::path& path, nlohmann::json* extra = nullptr);
// Copies parameters and buffers from an archive into an existing model ("param/<name>").
void load_parameters(HybridModel& model, const TensorArchive& archive);
void store_parameters(const HybridModel& model, TensorArchive& archive);

// Content hash over names, shapes and float32 bytes of all parameters.
std::string parameter_digest(const HybridModel& model);

}  // namespace devstyle
