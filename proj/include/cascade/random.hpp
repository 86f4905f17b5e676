#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace cascade {

/// Counter-based generator: the n-th draw is splitmix64(seed + n * gamma).
/// Every stream is fully described by (seed, counter), so a generator can be
/// checkpointed and replayed on any platform.
class Rng {
 public:
  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;
  static constexpr std::uint64_t kMix1 = 0xBF58476D1CE4E5B9ULL;
  static constexpr std::uint64_t kMix2 = 0x94D049BB133111EBULL;

  explicit Rng(std::uint64_t seed = 0, std::uint64_t counter = 0)
      : seed_(seed), counter_(counter) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64() {
    std::uint64_t z = seed_ + (++counter_) * kGamma;
    z = (z ^ (z >> 30)) * kMix1;
    z = (z ^ (z >> 27)) * kMix2;
    return z ^ (z >> 31);
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n). Rejection sampling keeps it unbiased.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  /// Standard normal via Box-Muller (one value per call).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Independent stream derived from this generator's seed and a tag.
  Rng fork(std::uint64_t tag) const {
    Rng mixer(seed_ ^ (tag * kMix2), tag);
    return Rng(mixer.next_u64());
  }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_;
};

}  // namespace cascade
