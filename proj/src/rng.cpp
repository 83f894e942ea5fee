#include "twig/rng.hpp"

#include <cmath>

namespace twig {

double SplitMix64::symmetric(double stddev) {
  // Var(U[-a,a)) = a^2/3.
  const double half_width = stddev * std::sqrt(3.0);
  return (2.0 * uniform() - 1.0) * half_width;
}

std::uint64_t SplitMix64::below(std::uint64_t bound) {
  const std::uint64_t limit = ~0ULL - (~0ULL % bound);
  std::uint64_t v = next();
  while (v >= limit) v = next();
  return v % bound;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  SplitMix64 mix(seed ^ (tag * 0xD1B54A32D192ED03ULL));
  mix.next();
  return mix.next();
}

}  // namespace twig
