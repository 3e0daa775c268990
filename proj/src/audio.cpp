#include "devstyle/audio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <numeric>

#include "devstyle/rng.hpp"

namespace devstyle {
namespace {

std::uint32_t rd_u32(const std::uint8_t* p) { return p[0] | (p[1] << 8) | (p[2] << 16) | (std::uint32_t(p[3]) << 24); }
std::uint16_t rd_u16(const std::uint8_t* p) { return static_cast<std::uint16_t>(p[0] | (p[1] << 8)); }

void wr_u32(std::vector<std::uint8_t>& o, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) o.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void wr_u16(std::vector<std::uint8_t>& o, std::uint16_t v) {
  o.push_back(static_cast<std::uint8_t>(v));
  o.push_back(static_cast<std::uint8_t>(v >> 8));
}

double sinc(double x) {
  if (x == 0.0) return 1.0;
  const double px = std::numbers::pi * x;
  return std::sin(px) / px;
}

}  // namespace

void AudioSegment::validate() const {
  if (sample_rate_hz <= 0) throw std::invalid_argument("AudioSegment: sample rate must be positive");
  for (const double s : samples)
    if (!std::isfinite(s)) throw std::invalid_argument("AudioSegment: non-finite sample in " + source_file);
}

double rms(std::span<const double> x) {
  if (x.empty()) return 0.0;
  double acc = 0.0;
  for (const double v : x) acc += v * v;
  return std::sqrt(acc / static_cast<double>(x.size()));
}

WavData read_wav(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw WavError("cannot open " + path.string());
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (buf.size() < 12 || std::memcmp(buf.data(), "RIFF", 4) != 0 || std::memcmp(buf.data() + 8, "WAVE", 4) != 0)
    throw WavError("not a RIFF/WAVE file: " + path.string());

  int format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const std::uint8_t* data = nullptr;
  std::size_t data_len = 0;
  std::size_t pos = 12;
  while (pos + 8 <= buf.size()) {
    const std::uint32_t len = rd_u32(buf.data() + pos + 4);
    const std::uint8_t* body = buf.data() + pos + 8;
    const std::size_t avail = buf.size() - pos - 8;
    if (std::memcmp(buf.data() + pos, "fmt ", 4) == 0) {
      if (len < 16 || avail < 16) throw WavError("truncated fmt chunk in " + path.string());
      format = rd_u16(body);
      channels = rd_u16(body + 2);
      rate = rd_u32(body + 4);
      bits = rd_u16(body + 14);
      if (format == 0xFFFE && len >= 26 && avail >= 26) format = rd_u16(body + 24);
    } else if (std::memcmp(buf.data() + pos, "data", 4) == 0) {
      data = body;
      data_len = std::min<std::size_t>(len, avail);
    }
    pos += 8 + len + (len & 1u);
  }
  if (format == 0 || channels <= 0 || rate == 0) throw WavError("missing or invalid fmt chunk in " + path.string());
  if (!data) throw WavError("missing data chunk in " + path.string());

  const bool is_float = format == 3;
  if (!(format == 1 && (bits == 16 || bits == 24 || bits == 32)) && !(is_float && (bits == 32 || bits == 64)))
    throw WavError("unsupported WAV encoding (format " + std::to_string(format) + ", " + std::to_string(bits) +
                   " bits) in " + path.string());
  const std::size_t bytes = static_cast<std::size_t>(bits) / 8;
  const std::size_t frames = data_len / (bytes * channels);

  WavData out;
  out.sample_rate_hz = static_cast<int>(rate);
  out.channels = channels;
  out.samples.resize(frames);
  for (std::size_t f = 0; f < frames; ++f) {
    double acc = 0.0;
    for (int ch = 0; ch < channels; ++ch) {
      const std::uint8_t* p = data + (f * channels + ch) * bytes;
      double v = 0.0;
      if (is_float && bits == 32) {
        float x;
        std::memcpy(&x, p, 4);
        v = x;
      } else if (is_float) {
        std::memcpy(&v, p, 8);
      } else if (bits == 16) {
        v = static_cast<std::int16_t>(rd_u16(p)) / 32768.0;
      } else if (bits == 24) {
        std::int32_t x = p[0] | (p[1] << 8) | (p[2] << 16);
        if (x & 0x800000) x -= 0x1000000;
        v = x / 8388608.0;
      } else {
        v = static_cast<std::int32_t>(rd_u32(p)) / 2147483648.0;
      }
      acc += v;
    }
    out.samples[f] = acc / channels;
    if (!std::isfinite(out.samples[f])) throw WavError("non-finite sample in " + path.string());
  }
  return out;
}

void write_wav(const std::filesystem::path& path, std::span<const double> samples, int sample_rate_hz,
               WavFormat format) {
  const std::uint16_t bits = format == WavFormat::float32 ? 32 : 16;
  const std::uint32_t data_len = static_cast<std::uint32_t>(samples.size() * (bits / 8));
  std::vector<std::uint8_t> o;
  o.reserve(44 + data_len);
  o.insert(o.end(), {'R', 'I', 'F', 'F'});
  wr_u32(o, 36 + data_len);
  o.insert(o.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  wr_u32(o, 16);
  wr_u16(o, format == WavFormat::float32 ? 3 : 1);
  wr_u16(o, 1);
  wr_u32(o, static_cast<std::uint32_t>(sample_rate_hz));
  wr_u32(o, static_cast<std::uint32_t>(sample_rate_hz) * (bits / 8));
  wr_u16(o, bits / 8);
  wr_u16(o, bits);
  o.insert(o.end(), {'d', 'a', 't', 'a'});
  wr_u32(o, data_len);
  for (const double s : samples) {
    if (format == WavFormat::float32) {
      const float f = static_cast<float>(s);
      std::uint32_t u;
      std::memcpy(&u, &f, 4);
      wr_u32(o, u);
    } else {
      const double c = std::clamp(s, -1.0, 32767.0 / 32768.0);
      wr_u16(o, static_cast<std::uint16_t>(static_cast<std::int16_t>(std::lround(c * 32768.0))));
    }
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw WavError("cannot create " + path.string());
  os.write(reinterpret_cast<const char*>(o.data()), static_cast<std::streamsize>(o.size()));
  if (!os) throw WavError("write failed for " + path.string());
}

namespace {

// Kaiser design: 60 dB stopband, transition width a tenth of the cutoff.
std::shared_ptr<const std::vector<double>> resample_filter(long up, long down) {
  static std::mutex mu;
  static std::map<std::pair<long, long>, std::shared_ptr<const std::vector<double>>> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto& slot = cache[{up, down}];
  if (slot) return slot;
  const double cutoff = 1.0 / (2.0 * static_cast<double>(std::max(up, down)));
  const double width = cutoff / 10.0;
  const double atten = 60.0;
  const long half = static_cast<long>(std::ceil((atten - 8.0) / (28.714 * width)));
  const double beta = 0.1102 * (atten - 8.7);
  const double i0b = std::cyl_bessel_i(0.0, beta);
  auto h = std::make_shared<std::vector<double>>(static_cast<std::size_t>(2 * half + 1));
  double sum = 0.0;
  for (long i = -half; i <= half; ++i) {
    const double r = static_cast<double>(i) / static_cast<double>(half);
    const double win = std::cyl_bessel_i(0.0, beta * std::sqrt(std::max(0.0, 1.0 - r * r))) / i0b;
    const double v = 2.0 * cutoff * sinc(2.0 * cutoff * static_cast<double>(i)) * win;
    (*h)[static_cast<std::size_t>(i + half)] = v;
    sum += v;
  }
  for (auto& v : *h) v *= static_cast<double>(up) / sum;
  slot = h;
  return slot;
}

}  // namespace

std::vector<double> resample(std::span<const double> x, int from_hz, int to_hz) {
  if (from_hz <= 0 || to_hz <= 0) throw std::invalid_argument("resample: rates must be positive");
  if (from_hz == to_hz) return {x.begin(), x.end()};
  const int g = std::gcd(from_hz, to_hz);
  const long up = to_hz / g, down = from_hz / g;
  const auto filter = resample_filter(up, down);
  const auto& h = *filter;
  const long half = static_cast<long>(h.size() / 2);

  const long n_in = static_cast<long>(x.size());
  const long n_out = (n_in * up + down - 1) / down;
  std::vector<double> y(static_cast<std::size_t>(n_out), 0.0);
  for (long m = 0; m < n_out; ++m) {
    // contributions from x[n] where 0 <= m*down - n*up + half <= 2*half
    const long t = m * down + half;
    long n_lo = (t - 2 * half + up - 1) / up;
    if (t - 2 * half < 0) n_lo = 0;
    const long n_hi = std::min(n_in - 1, t / up);
    double acc = 0.0;
    for (long n = std::max(0L, n_lo); n <= n_hi; ++n) acc += x[static_cast<std::size_t>(n)] * h[static_cast<std::size_t>(t - n * up)];
    y[static_cast<std::size_t>(m)] = acc;
  }
  return y;
}

std::vector<double> generate_music_like(double duration_s, int sample_rate_hz, std::uint64_t seed) {
  const auto n = static_cast<std::size_t>(std::llround(duration_s * sample_rate_hz));
  std::vector<double> out(n, 0.0);
  Rng rng(seed);
  const double fs = sample_rate_hz;
  const double nyquist = fs / 2.0;

  for (int voice = 0; voice < 2; ++voice) {
    std::size_t pos = 0;
    while (pos < n) {
      const auto len = static_cast<std::size_t>(rng.uniform(0.25, 1.0) * fs);
      const double f0 = 80.0 * std::pow(880.0 / 80.0, rng.uniform());
      const int partials = 4 + static_cast<int>(rng.below(5));
      const double level = rng.uniform(0.4, 1.0) * (voice == 0 ? 1.0 : 0.6);
      const double decay = rng.uniform(1.5, 6.0);
      std::vector<double> amp(partials), phase(partials);
      for (int k = 0; k < partials; ++k) {
        amp[k] = level * rng.uniform(0.3, 1.0) / (k + 1);
        phase[k] = rng.uniform(0.0, 2.0 * std::numbers::pi);
      }
      const std::size_t end = std::min(n, pos + len);
      for (std::size_t i = pos; i < end; ++i) {
        const double t = static_cast<double>(i - pos) / fs;
        const double env = std::min(1.0, t / 0.01) * std::exp(-decay * t);
        double s = 0.0;
        for (int k = 0; k < partials; ++k) {
          const double f = f0 * (k + 1);
          if (f >= nyquist) break;
          s += amp[k] * std::sin(2.0 * std::numbers::pi * f * t + phase[k]);
        }
        out[i] += env * s;
      }
      pos = end;
    }
  }

  // Noise bursts: a one-pole low-pass or high-pass on white noise.
  const auto bursts = static_cast<int>(duration_s * 3.0);
  for (int b = 0; b < bursts; ++b) {
    const auto start = static_cast<std::size_t>(rng.uniform() * static_cast<double>(n));
    const auto len = static_cast<std::size_t>(rng.uniform(0.05, 0.2) * fs);
    const bool high = rng.uniform() < 0.5;
    const double a = std::exp(-2.0 * std::numbers::pi * rng.uniform(500.0, 6000.0) / fs);
    const double level = rng.uniform(0.1, 0.4);
    double lp = 0.0;
    for (std::size_t i = start; i < std::min(n, start + len); ++i) {
      const double w = rng.uniform(-1.0, 1.0);
      lp = (1.0 - a) * w + a * lp;
      const double t = static_cast<double>(i - start) / fs;
      out[i] += level * std::exp(-25.0 * t) * (high ? w - lp : lp);
    }
  }

  double peak = 0.0;
  for (const double v : out) peak = std::max(peak, std::abs(v));
  if (peak > 0.0)
    for (auto& v : out) v *= 0.5 / peak;
  return out;
}

}  // namespace devstyle
