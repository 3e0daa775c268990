#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace devstyle {

// Seeded generator whose draws are identical across standard libraries:
// std::mt19937_64 is fully specified, the distributions on top of it are not,
// so the transforms live here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller (one value per call, no cached pair).
  double normal();

  // Uniform integer in [0, n); unbiased.
  std::uint64_t below(std::uint64_t n);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::string serialize() const;
  void deserialize(const std::string& state);

  bool operator==(const Rng& other) const { return engine_ == other.engine_; }

 private:
  std::mt19937_64 engine_;
};

// FNV-1a over bytes; used to derive sub-seeds from names and indices.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL);
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);
std::uint64_t derive_seed(std::string_view name, std::int64_t index, std::uint64_t seed);

}  // namespace devstyle
