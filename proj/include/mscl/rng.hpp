#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

namespace mscl {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Mixes a stream id into a base seed so derived generators are independent.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  return splitmix64(seed ^ splitmix64(stream + 0x632be59bd9b4e019ULL));
}

// Deterministic RNG. All distributions are built from raw mt19937_64 draws so
// sequences are reproducible across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), gen_(splitmix64(seed)) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return gen_(); }

  // Independent generator for a named substream; does not advance this one.
  Rng child(std::uint64_t stream) const { return Rng(mix_seed(seed_, stream)); }

  // Uniform in [0,1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n); n must be positive. Rejection sampling, unbiased.
  std::size_t uniform_index(std::size_t n) {
    const std::uint64_t bound = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = next_u64();
    while (x >= bound) x = next_u64();
    return static_cast<std::size_t>(x % n);
  }

  // Standard normal via Box-Muller; no caching so the draw count is fixed.
  double gaussian() {
    const double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0,1]
    const double u2 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;        // [0,1)
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[uniform_index(i)]);
    }
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 gen_;
};

}  // namespace mscl
