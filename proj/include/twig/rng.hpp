#pragma once

#include <cstdint>

namespace twig {

// SplitMix64 (Steele, Lea & Flood). Constants:
//   increment   0x9E3779B97F4A7C15
//   mix 1       0xBF58476D1CE4E5B9 (shift 30)
//   mix 2       0x94D049BB133111EB (shift 27), final shift 31
// Integer-only, so streams are identical on every platform.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 bits of mantissa.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  // Uniform in [-a, a) scaled so the standard deviation equals `stddev`.
  double symmetric(double stddev);

  // Uniform integer in [0, bound), bound > 0 (rejection sampling, unbiased).
  std::uint64_t below(std::uint64_t bound);

 private:
  std::uint64_t state_;
};

// Derives an independent stream seed from (seed, tag).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag);

}  // namespace twig
