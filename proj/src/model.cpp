#include "devstyle/model.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "devstyle/io.hpp"

namespace devstyle {

namespace F = torch::nn::functional;

ModelConfig ModelConfig::full_scale() {
  ModelConfig c;
  c.n_layers = 5;
  c.base_channels = 48;
  c.transformer_depth = 5;
  c.heads = 8;
  c.model_dim = 384;
  return c;
}

ModelConfig ModelConfig::miniature() {
  ModelConfig c;
  c.n_layers = 1;
  c.base_channels = 4;
  c.transformer_depth = 1;
  c.heads = 2;
  c.model_dim = 8;
  c.stft = {64, 16};
  c.embedding_dim = 8;
  c.film_hidden = 8;
  c.sample_rate_hz = 8000;
  c.segment_s = 0.032;
  return c;
}

void ModelConfig::validate() const {
  const auto fail = [](const std::string& m) { throw std::invalid_argument("ModelConfig: " + m); };
  if (n_layers < 1 || base_channels < 1 || transformer_depth < 0 || heads < 1 || model_dim < 1 ||
      embedding_dim < 1 || film_hidden < 1 || sample_rate_hz < 1 || !(segment_s > 0))
    fail("all dimensions must be positive");
  if (stft.n_fft < 4 || (stft.n_fft & (stft.n_fft - 1)) != 0) fail("n_fft must be a power of two");
  if (stft.hop < 1 || stft.n_fft % stft.hop != 0) fail("hop must divide n_fft");
  if (model_dim % heads != 0) fail("model_dim must be divisible by heads");
  const std::int64_t stride = std::int64_t{1} << (2 * n_layers);
  if ((stft.n_fft / 2) % stride != 0) fail("n_fft/2 must be divisible by 4^n_layers");
  if (segment_samples() < stft.n_fft) fail("segment shorter than n_fft");
}

std::int64_t ModelConfig::segment_samples() const { return std::llround(segment_s * sample_rate_hz); }

nlohmann::ordered_json ModelConfig::to_json() const {
  return {{"n_layers", n_layers},
          {"base_channels", base_channels},
          {"transformer_depth", transformer_depth},
          {"heads", heads},
          {"model_dim", model_dim},
          {"stft", {{"n_fft", stft.n_fft}, {"hop", stft.hop}, {"window", "hann"}}},
          {"embedding_dim", embedding_dim},
          {"film_hidden", film_hidden},
          {"sample_rate_hz", sample_rate_hz},
          {"segment_s", segment_s},
          {"film_per_frequency", film_per_frequency}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.base_channels = j.at("base_channels").get<int>();
  c.transformer_depth = j.at("transformer_depth").get<int>();
  c.heads = j.at("heads").get<int>();
  c.model_dim = j.at("model_dim").get<int>();
  c.stft.n_fft = j.at("stft").at("n_fft").get<int>();
  c.stft.hop = j.at("stft").at("hop").get<int>();
  if (j.at("stft").value("window", "hann") != "hann") throw std::invalid_argument("ModelConfig: only hann windows");
  c.embedding_dim = j.at("embedding_dim").get<int>();
  c.film_hidden = j.at("film_hidden").get<int>();
  c.sample_rate_hz = j.at("sample_rate_hz").get<int>();
  c.segment_s = j.at("segment_s").get<double>();
  c.film_per_frequency = j.value("film_per_frequency", true);
  c.validate();
  return c;
}

torch::Tensor stft(const torch::Tensor& x, const StftConfig& cfg) {
  auto xb = x.dim() == 1 ? x.unsqueeze(0) : x;
  if (xb.dim() != 2) throw std::invalid_argument("stft: expected [L] or [B, L]");
  if (xb.size(1) < cfg.n_fft)
    throw std::invalid_argument("stft: input of " + std::to_string(xb.size(1)) + " samples is shorter than n_fft " +
                                std::to_string(cfg.n_fft));
  const auto window = torch::hann_window(cfg.n_fft, torch::TensorOptions().dtype(xb.dtype()));
  const auto spec = torch::stft(xb, cfg.n_fft, cfg.hop, cfg.n_fft, window, /*center=*/true, "reflect",
                                /*normalized=*/false, /*onesided=*/true, /*return_complex=*/true);
  return torch::view_as_real(spec).permute({0, 3, 1, 2}).contiguous();
}

torch::Tensor istft(const torch::Tensor& spec, const StftConfig& cfg, std::int64_t out_len) {
  if (spec.dim() != 4 || spec.size(1) != 2 || spec.size(2) != cfg.freq_bins())
    throw std::invalid_argument("istft: expected [B, 2, " + std::to_string(cfg.freq_bins()) + ", T]");
  const auto c = torch::view_as_complex(spec.permute({0, 2, 3, 1}).contiguous());
  const auto window = torch::hann_window(cfg.n_fft, torch::TensorOptions().dtype(spec.dtype()));
  return torch::istft(c, cfg.n_fft, cfg.hop, cfg.n_fft, window, /*center=*/true, /*normalized=*/false,
                      /*onesided=*/true, out_len, /*return_complex=*/false);
}

torch::Tensor film_apply(const torch::Tensor& x, const FilmParams& p) {
  if (x.dim() != 4) throw std::invalid_argument("film_apply: expected x of shape [B, C, F, T]");
  if (!p.alpha.defined() || !p.beta.defined() || p.alpha.sizes() != p.beta.sizes() || p.alpha.dim() != 3)
    throw std::invalid_argument("film_apply: alpha and beta must both be [B, C, F]");
  const bool batch_ok = p.alpha.size(0) == x.size(0) || p.alpha.size(0) == 1;
  const bool freq_ok = p.alpha.size(2) == x.size(2) || p.alpha.size(2) == 1;
  if (!batch_ok || p.alpha.size(1) != x.size(1) || !freq_ok)
    throw std::invalid_argument("film_apply: parameter shape [" + std::to_string(p.alpha.size(0)) + ", " +
                                std::to_string(p.alpha.size(1)) + ", " + std::to_string(p.alpha.size(2)) +
                                "] does not match features [" + std::to_string(x.size(0)) + ", " +
                                std::to_string(x.size(1)) + ", " + std::to_string(x.size(2)) + ", T]");
  return p.alpha.unsqueeze(-1) * x + p.beta.unsqueeze(-1);
}

FilmGeneratorImpl::FilmGeneratorImpl(int embedding_dim, int hidden, int channels, int freq_bins)
    : embedding_dim_(embedding_dim), channels_(channels), freq_bins_(freq_bins) {
  fc1 = register_module("fc1", torch::nn::Linear(embedding_dim, hidden));
  fc2 = register_module("fc2", torch::nn::Linear(hidden, 2 * channels * freq_bins));
  torch::NoGradGuard g;
  fc1->weight.normal_(0.0, 1.0);
  fc1->bias.zero_();
  reset_to_identity();
}

void FilmGeneratorImpl::reset_to_identity() {
  torch::NoGradGuard g;
  fc2->weight.zero_();
  fc2->bias.zero_();
  fc2->bias.narrow(0, 0, channels_ * freq_bins_).fill_(1.0);
}

FilmParams FilmGeneratorImpl::forward(const torch::Tensor& e) {
  if (e.dim() != 2 || e.size(1) != embedding_dim_)
    throw std::invalid_argument("film_generate: embedding must be [B, " + std::to_string(embedding_dim_) + "], got " +
                                (e.dim() == 2 ? "[B, " + std::to_string(e.size(1)) + "]" : "rank " +
                                 std::to_string(e.dim())));
  const auto en = e / (e.norm(2, 1, true) + 1e-12);
  const auto o = fc2(F::gelu(fc1(en)));
  const auto n = static_cast<std::int64_t>(channels_) * freq_bins_;
  return {o.narrow(1, 0, n).reshape({e.size(0), channels_, freq_bins_}),
          o.narrow(1, n, n).reshape({e.size(0), channels_, freq_bins_})};
}

AttentionImpl::AttentionImpl(int dim, int heads) : heads_(heads) {
  q = register_module("q", torch::nn::Linear(dim, dim));
  k = register_module("k", torch::nn::Linear(dim, dim));
  v = register_module("v", torch::nn::Linear(dim, dim));
  o = register_module("o", torch::nn::Linear(dim, dim));
}

torch::Tensor AttentionImpl::forward(const torch::Tensor& q_in, const torch::Tensor& kv_in) {
  const auto b = q_in.size(0), nq = q_in.size(1), nk = kv_in.size(1), d = q_in.size(2);
  const auto dh = d / heads_;
  const auto split = [&](const torch::Tensor& t, std::int64_t n) { return t.view({b, n, heads_, dh}).transpose(1, 2); };
  const auto qh = split(q(q_in), nq);
  const auto kh = split(k(kv_in), nk);
  const auto vh = split(v(kv_in), nk);
  return o(torch::scaled_dot_product_attention(qh, kh, vh).transpose(1, 2).reshape({b, nq, d}));
}

CrossDomainBlockImpl::CrossDomainBlockImpl(int dim, int heads) {
  const auto ln = [dim] { return torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})); };
  norm_sf = register_module("norm_sf", ln());
  norm_st = register_module("norm_st", ln());
  norm_cf = register_module("norm_cf", ln());
  norm_ct = register_module("norm_ct", ln());
  norm_ff = register_module("norm_ff", ln());
  norm_ft = register_module("norm_ft", ln());
  self_f = register_module("self_f", Attention(dim, heads));
  self_t = register_module("self_t", Attention(dim, heads));
  cross_f = register_module("cross_f", Attention(dim, heads));
  cross_t = register_module("cross_t", Attention(dim, heads));
  const auto ffn = [dim] {
    return torch::nn::Sequential(torch::nn::Linear(dim, 4 * dim), torch::nn::GELU(), torch::nn::Linear(4 * dim, dim));
  };
  ffn_f = register_module("ffn_f", ffn());
  ffn_t = register_module("ffn_t", ffn());
}

std::pair<torch::Tensor, torch::Tensor> CrossDomainBlockImpl::forward(torch::Tensor f, torch::Tensor t) {
  auto nf = norm_sf(f);
  auto nt = norm_st(t);
  f = f + self_f(nf, nf);
  t = t + self_t(nt, nt);
  nf = norm_cf(f);
  nt = norm_ct(t);
  auto f2 = f + cross_f(nf, nt);
  auto t2 = t + cross_t(nt, nf);
  f2 = f2 + ffn_f->forward(norm_ff(f2));
  t2 = t2 + ffn_t->forward(norm_ft(t2));
  return {f2, t2};
}

namespace {

torch::Tensor sinusoidal_positions(std::int64_t n, std::int64_t d, const torch::TensorOptions& opts) {
  auto pos = torch::arange(n, opts).unsqueeze(1);
  auto i = torch::arange(0, d, 2, opts);
  auto freq = torch::exp(i * (-std::log(10000.0) / static_cast<double>(d)));
  auto pe = torch::zeros({n, d}, opts);
  pe.index_put_({torch::indexing::Slice(), torch::indexing::Slice(0, torch::indexing::None, 2)}, torch::sin(pos * freq));
  const auto n_cos = d / 2;
  pe.index_put_({torch::indexing::Slice(), torch::indexing::Slice(1, torch::indexing::None, 2)},
                torch::cos(pos * freq.narrow(0, 0, n_cos)));
  return pe;
}

// [B, 4C, F, T] -> [B, C, 4F, T]
torch::Tensor interleave4_freq(const torch::Tensor& z) {
  const auto b = z.size(0), c = z.size(1) / 4, f = z.size(2), t = z.size(3);
  return z.view({b, c, 4, f, t}).permute({0, 1, 3, 2, 4}).reshape({b, c, 4 * f, t});
}

// [B, 4C, L] -> [B, C, 4L]
torch::Tensor interleave4_time(const torch::Tensor& z) {
  const auto b = z.size(0), c = z.size(1) / 4, l = z.size(2);
  return z.view({b, c, 4, l}).permute({0, 1, 3, 2}).reshape({b, c, 4 * l});
}

void zero_module(torch::nn::Module& m) {
  torch::NoGradGuard g;
  for (auto& p : m.parameters()) p.zero_();
}

}  // namespace

HybridModelImpl::HybridModelImpl(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const int L = cfg_.n_layers;
  const auto ch = [&](int i) { return cfg_.base_channels << i; };
  const int fbins = cfg_.stft.freq_bins();
  const int cd = cfg_.decoder_channels();

  f_enc = register_module("f_enc", torch::nn::ModuleList());
  f_dec = register_module("f_dec", torch::nn::ModuleList());
  t_enc = register_module("t_enc", torch::nn::ModuleList());
  t_dec = register_module("t_dec", torch::nn::ModuleList());
  for (int i = 0; i < L; ++i) {
    const int in = i == 0 ? 2 : ch(i - 1);
    f_enc->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(in, ch(i), {8, 1}).stride({4, 1}).padding({2, 0})));
    // Decoders upsample by 4 as sub-pixel convolutions (conv to 4x channels, then interleave).
    f_dec->push_back(
        torch::nn::Conv2d(torch::nn::Conv2dOptions(ch(i), 4 * (i == 0 ? cd : ch(i - 1)), {3, 1}).padding({1, 0})));
    t_enc->push_back(torch::nn::Conv1d(torch::nn::Conv1dOptions(i == 0 ? 1 : ch(i - 1), ch(i), 8).stride(4).padding(2)));
    t_dec->push_back(torch::nn::Conv1d(torch::nn::Conv1dOptions(ch(i), 4 * (i == 0 ? 1 : ch(i - 1)), 3).padding(1)));
  }
  zero_module(*f_dec[0]);
  zero_module(*t_dec[0]);

  const int film_f = cfg_.film_per_frequency ? fbins : 1;
  film_b = register_module("film_b", FilmGenerator(cfg_.embedding_dim, cfg_.film_hidden, 2, film_f));
  film_e = register_module("film_e", FilmGenerator(cfg_.embedding_dim, cfg_.film_hidden, cd, film_f));

  skip_proj = register_module("skip_proj", torch::nn::Conv2d(torch::nn::Conv2dOptions(2, cd, 1).bias(false)));
  head = register_module("head", torch::nn::Conv2d(torch::nn::Conv2dOptions(cd, 2, 1)));
  {
    // head = pinv(skip_proj) so the spectral path is the identity while the decoder output is zero.
    torch::NoGradGuard g;
    const auto p = skip_proj->weight.view({cd, 2});
    head->weight.copy_(torch::linalg_pinv(p.to(torch::kDouble)).to(p.dtype()).view({2, cd, 1, 1}));
    head->bias.zero_();
  }

  const int c_last = ch(L - 1);
  const int f_last = (fbins - 1) >> (2 * L);
  tok_f_in = register_module("tok_f_in", torch::nn::Linear(c_last * f_last, cfg_.model_dim));
  tok_f_out = register_module("tok_f_out", torch::nn::Linear(cfg_.model_dim, c_last * f_last));
  tok_t_in = register_module("tok_t_in", torch::nn::Linear(c_last, cfg_.model_dim));
  tok_t_out = register_module("tok_t_out", torch::nn::Linear(cfg_.model_dim, c_last));
  blocks = register_module("blocks", torch::nn::ModuleList());
  for (int i = 0; i < cfg_.transformer_depth; ++i) blocks->push_back(CrossDomainBlock(cfg_.model_dim, cfg_.heads));
}

std::pair<torch::Tensor, torch::Tensor> HybridModelImpl::bottleneck(const torch::Tensor& zf, const torch::Tensor& zt) {
  const auto b = zf.size(0), c = zf.size(1), fl = zf.size(2), tf = zf.size(3), tt = zt.size(2);
  const auto opts = zf.options();
  auto f = tok_f_in(zf.permute({0, 3, 1, 2}).reshape({b, tf, c * fl}));
  auto t = tok_t_in(zt.permute({0, 2, 1}));
  f = f + sinusoidal_positions(tf, cfg_.model_dim, opts);
  t = t + sinusoidal_positions(tt, cfg_.model_dim, opts);
  for (auto& m : *blocks) std::tie(f, t) = m->as<CrossDomainBlock>()->forward(f, t);
  const auto df = tok_f_out(f).reshape({b, tf, c, fl}).permute({0, 2, 3, 1});
  const auto dt = tok_t_out(t).permute({0, 2, 1});
  return {zf + df, zt + dt};
}

torch::Tensor HybridModelImpl::forward(const torch::Tensor& x, const torch::Tensor& e) {
  if (x.dim() != 2) throw std::invalid_argument("forward: x must be [B, samples]");
  if (e.dim() != 2 || e.size(0) != x.size(0))
    throw std::invalid_argument("forward: need one embedding per batch item (" + std::to_string(x.size(0)) +
                                " inputs, " + std::to_string(e.dim() == 2 ? e.size(0) : 0) + " embeddings)");
  const int L = cfg_.n_layers;
  const auto len = x.size(1);
  const auto fbins = cfg_.stft.freq_bins();

  // Spectral path.
  const auto spec = stft(x, cfg_.stft);
  const auto mu = spec.mean({1, 2, 3}, true);
  const auto sd = spec.std({1, 2, 3}, /*unbiased=*/false, true) + 1e-5;
  auto xn = film_apply((spec - mu) / sd, film_b(e));
  std::vector<torch::Tensor> skips_f;
  auto zf = xn.narrow(2, 0, fbins - 1);
  for (int i = 0; i < L; ++i) {
    zf = F::gelu(f_enc[i]->as<torch::nn::Conv2d>()->forward(zf));
    skips_f.push_back(zf);
  }

  // Waveform path.
  const std::int64_t stride = std::int64_t{1} << (2 * L);
  const auto padded = (len + stride - 1) / stride * stride;
  auto zt = F::pad(x.unsqueeze(1), F::PadFuncOptions({0, padded - len}));
  std::vector<torch::Tensor> skips_t;
  for (int i = 0; i < L; ++i) {
    zt = F::gelu(t_enc[i]->as<torch::nn::Conv1d>()->forward(zt));
    skips_t.push_back(zt);
  }

  std::tie(zf, zt) = bottleneck(zf, zt);

  for (int i = L - 1; i >= 0; --i) {
    zf = interleave4_freq(f_dec[i]->as<torch::nn::Conv2d>()->forward(zf + skips_f[static_cast<std::size_t>(i)]));
    zt = interleave4_time(t_dec[i]->as<torch::nn::Conv1d>()->forward(zt + skips_t[static_cast<std::size_t>(i)]));
    if (i > 0) {
      zf = F::gelu(zf);
      zt = F::gelu(zt);
    }
  }
  auto hf = F::pad(zf, F::PadFuncOptions({0, 0, 0, 1})) + skip_proj(xn);
  hf = film_apply(hf, film_e(e));
  const auto out_spec = head(hf) * sd + mu;
  return istft(out_spec, cfg_.stft, len) + zt.select(1, 0).narrow(1, 0, len);
}

std::int64_t HybridModelImpl::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : parameters()) n += p.numel();
  return n;
}

std::vector<torch::Tensor> HybridModelImpl::film_parameters() const {
  auto a = film_b->parameters();
  const auto b = film_e->parameters();
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

HybridModel make_model(const ModelConfig& cfg, std::uint64_t seed) {
  torch::manual_seed(seed);
  return HybridModel(cfg);
}

namespace {

constexpr char kMagic[8] = {'D', 'V', 'S', 'T', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kArchiveVersion = 1;

void put_le(std::string& out, std::uint64_t v, int bytes) {
  for (int k = 0; k < bytes; ++k) out += static_cast<char>((v >> (8 * k)) & 0xff);
}

std::uint64_t get_le(const std::string& s, std::size_t pos, int bytes) {
  std::uint64_t v = 0;
  for (int k = 0; k < bytes; ++k) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[pos + k])) << (8 * k);
  return v;
}

}  // namespace

void TensorArchive::save(const std::filesystem::path& path) const {
  nlohmann::json header;
  header["meta"] = meta;
  auto index = nlohmann::json::array();
  std::string payload;
  for (const auto& [name, t] : tensors) {
    const auto c = t.detach().to(torch::kCPU, torch::kFloat).contiguous();
    index.push_back({{"name", name}, {"shape", c.sizes().vec()}, {"dtype", "f32"}, {"offset", payload.size()}});
    append_f32_le(payload, std::span<const float>(c.data_ptr<float>(), static_cast<std::size_t>(c.numel())));
  }
  header["tensors"] = std::move(index);
  const std::string hj = header.dump();
  std::string out(kMagic, sizeof kMagic);
  put_le(out, kArchiveVersion, 4);
  put_le(out, hj.size(), 8);
  out += hj;
  out += payload;
  write_file_atomic(path, out);
}

TensorArchive TensorArchive::load(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  if (bytes.size() < 20 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
    throw std::runtime_error("checkpoint: " + path.string() + " is not a checkpoint archive");
  if (get_le(bytes, 8, 4) != kArchiveVersion) throw std::runtime_error("checkpoint: unsupported version");
  const auto hlen = get_le(bytes, 12, 8);
  if (20 + hlen > bytes.size()) throw std::runtime_error("checkpoint: truncated header");
  const auto header = nlohmann::json::parse(bytes.substr(20, hlen));
  const std::string_view payload(bytes.data() + 20 + hlen, bytes.size() - 20 - hlen);
  TensorArchive a;
  a.meta = header.at("meta");
  for (const auto& t : header.at("tensors")) {
    const auto shape = t.at("shape").get<std::vector<std::int64_t>>();
    std::int64_t n = 1;
    for (auto s : shape) n *= s;
    const auto off = t.at("offset").get<std::size_t>();
    if (off + 4 * static_cast<std::size_t>(n) > payload.size())
      throw std::runtime_error("checkpoint: truncated tensor " + t.at("name").get<std::string>());
    const auto vals = parse_f32_le(payload.substr(off, 4 * static_cast<std::size_t>(n)));
    a.tensors.emplace_back(t.at("name").get<std::string>(), torch::tensor(vals).reshape(shape).clone());
  }
  return a;
}

const torch::Tensor& TensorArchive::get(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw std::runtime_error("checkpoint: missing tensor " + name);
}

bool TensorArchive::has(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return true;
  return false;
}

void store_parameters(const HybridModel& model, TensorArchive& archive) {
  for (const auto& p : model->named_parameters()) archive.tensors.emplace_back("param/" + p.key(), p.value());
}

void load_parameters(HybridModel& model, const TensorArchive& archive) {
  torch::NoGradGuard g;
  for (auto& p : model->named_parameters()) {
    const auto& t = archive.get("param/" + p.key());
    if (t.sizes() != p.value().sizes()) throw std::runtime_error("checkpoint: shape mismatch for " + p.key());
    p.value().copy_(t);
  }
}

void save_model(const HybridModel& model, const std::filesystem::path& path, const nlohmann::json& extra) {
  TensorArchive a;
  a.meta = {{"config", model->config().to_json()}, {"extra", extra}};
  store_parameters(model, a);
  a.save(path);
}

HybridModel load_model(const std::filesystem::path& path, nlohmann::json* extra) {
  const auto a = TensorArchive::load(path);
  auto model = HybridModel(ModelConfig::from_json(a.meta.at("config")));
  load_parameters(model, a);
  if (extra) *extra = a.meta.value("extra", nlohmann::json::object());
  return model;
}

std::string parameter_digest(const HybridModel& model) {
  std::string buf;
  for (const auto& p : model->named_parameters()) {
    buf += p.key();
    for (auto s : p.value().sizes()) buf += ":" + std::to_string(s);
    const auto c = p.value().detach().to(torch::kFloat).contiguous();
    append_f32_le(buf, std::span<const float>(c.data_ptr<float>(), static_cast<std::size_t>(c.numel())));
  }
  return sha256_hex(buf);
}

}  // namespace devstyle
