#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace varc {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::uint64_t rotl64(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace detail

// Deterministic, portable PRNG (xoshiro256++). Not a shared global: every
// consumer receives an explicit Rng, and independent streams are derived
// with split() so the draw order of one component cannot perturb another.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed) {
    std::uint64_t sm = seed;
    for (auto& word : s_) word = detail::splitmix64(sm);
  }

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next() {
    const std::uint64_t result = detail::rotl64(s_[0] + s_[3], 23) + s_[0];
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = detail::rotl64(s_[3], 45);
    return result;
  }

  // Unbiased integer in [0, bound) via rejection sampling.
  std::uint64_t next_below(std::uint64_t bound) {
    if (bound <= 1) return 0;
    const std::uint64_t threshold = (0ULL - bound) % bound;  // 2^64 mod bound
    for (;;) {
      const std::uint64_t r = next();
      if (r >= threshold) return r % bound;
    }
  }

  // Inclusive range.
  int uniform_int(int lo, int hi) {
    return lo + static_cast<int>(next_below(static_cast<std::uint64_t>(hi - lo) + 1));
  }

  float uniform_float() {  // [0, 1)
    return static_cast<float>(next() >> 40) * (1.0f / 16777216.0f);
  }

  double uniform_double() {  // [0, 1)
    return static_cast<double>(next() >> 11) * (1.0 / 9007199254740992.0);
  }

  bool bernoulli(float p) { return uniform_float() < p; }

  // Box-Muller; the pair is computed lazily and cached.
  float normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    double u1, u2;
    do {
      u1 = uniform_double();
    } while (u1 <= 1e-12);
    u2 = uniform_double();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * 3.14159265358979323846 * u2;
    cached_ = static_cast<float>(r * std::sin(a));
    has_cached_ = true;
    return static_cast<float>(r * std::cos(a));
  }

  // Normal clipped to +-clip standard deviations, then scaled.
  float trunc_normal(float stddev, float clip = 2.0f) {
    for (;;) {
      const float z = normal();
      if (z >= -clip && z <= clip) return z * stddev;
    }
  }

  // Independent child stream; a pure function of (seed, tag).
  Rng split(std::uint64_t tag) const {
    std::uint64_t h = seed_ ^ (0x9E3779B97F4A7C15ULL + tag * 0xC2B2AE3D27D4EB4FULL);
    return Rng(detail::splitmix64(h));
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = next_below(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::uint64_t s_[4];
  float cached_ = 0.0f;
  bool has_cached_ = false;
};

}  // namespace varc
