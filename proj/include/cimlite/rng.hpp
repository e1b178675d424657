#pragma once

#include <cmath>
#include <cstdint>
#include <utility>

namespace cimlite {

// Deterministic generator used everywhere. splitmix64 core with explicit
// uniform/normal mappings, so results are identical across compilers and
// standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1) with 53-bit resolution
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; consumes two uniforms per pair, caches the second draw
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double sd) { return mean + sd * normal(); }

  // integer in [0, n)
  uint64_t below(uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

  bool bernoulli(double p) { return uniform() < p; }

 private:
  uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Stable derivation of independent streams from (run seed, indices), so that
// per-item work can be scheduled in any order without changing draws.
inline uint64_t derive_seed(uint64_t run_seed, uint64_t a, uint64_t b = 0) {
  uint64_t z = run_seed;
  auto mix = [&z](uint64_t v) {
    z ^= v + 0x9e3779b97f4a7c15ull + (z << 6) + (z >> 2);
    z *= 0xff51afd7ed558ccdull;
    z ^= z >> 33;
  };
  mix(a + 1);
  mix(b + 1);
  return z;
}

template <typename It>
void shuffle(It first, It last, Rng& rng) {
  auto n = static_cast<uint64_t>(last - first);
  for (uint64_t i = n; i > 1; --i) {
    uint64_t j = rng.below(i);
    std::swap(first[i - 1], first[j]);
  }
}

}  // namespace cimlite
