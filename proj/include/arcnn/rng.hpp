// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace arcnn {

inline uint64_t splitmix64(uint64_t& state) {
  state += 0x9e3779b97f4a7c15ull;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

/// Deterministic seed combinator for derived streams.
inline uint64_t mix_seed(uint64_t seed, uint64_t stream) {
  uint64_t s = seed ^ (stream * 0x9e3779b97f4a7c15ull + 0x2545f4914f6cdd1dull);
  return splitmix64(s);
}

inline uint64_t fnv1a64(std::string_view bytes) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

/// Seeded random source. All randomness in the project flows through this
/// class so runs are bit-reproducible for a fixed seed. Normal deviates use
/// Box-Muller on top of mt19937_64 instead of std::normal_distribution,
/// whose output is implementation-defined.
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed), engine_(seed) {}

  uint64_t raw() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi], inclusive.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int64_t>(engine_() % span);
  }

  /// Standard normal deviate (Box-Muller, no caching).
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }

  double normal(double mean, double stddev) {
    if (stddev <= 0.0) return mean;
    return mean + stddev * normal();
  }

  /// Independent stream derived from this source's seed (not its state).
  Rng derive(uint64_t stream) const { return Rng(mix_seed(seed_, stream)); }

  uint64_t seed() const { return seed_; }

 private:
  static constexpr double kPi = 3.14159265358979323846;
  uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace arcnn
