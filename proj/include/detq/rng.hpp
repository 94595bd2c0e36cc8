#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace detq {

// Deterministic RNG used everywhere instead of std distributions, so results
// do not depend on the standard library implementation.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ULL) {}

  uint64_t next_u64() {
    // splitmix64
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [lo, hi] inclusive
  int64_t uniform_int(int64_t lo, int64_t hi) {
    return lo + int64_t(uniform() * double(hi - lo + 1));
  }

  // Box-Muller; consumes two uniforms per pair, caches the second.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * M_PI * u2);
    have_spare_ = true;
    return r * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // zero-mean Laplace via inverse CDF
  double laplace(double scale) {
    double u = uniform() - 0.5;
    return -scale * (u < 0 ? -1.0 : 1.0) * std::log(1.0 - 2.0 * std::fabs(u));
  }

 private:
  uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Stable sub-seed derivation: mixes a master seed with a purpose tag and index
// so independent components never share streams.
inline uint64_t derive_seed(uint64_t master, std::string_view purpose, uint64_t index = 0) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : purpose) {
    h ^= uint64_t(uint8_t(c));
    h *= 0x100000001b3ULL;
  }
  Rng mix(master ^ h ^ (index * 0x2545f4914f6cdd1dULL + 0x632be59bd9b4e019ULL));
  return mix.next_u64();
}

}  // namespace detq
