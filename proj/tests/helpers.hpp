#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <vector>

#include "twig/model.hpp"
#include "twig/rng.hpp"

namespace testing_util {

inline twig::ModelConfig small_config(std::uint32_t layers = 4, std::uint32_t d = 16, std::uint32_t heads = 2,
                                      std::uint32_t vocab = 32, std::uint32_t max_positions = 96) {
  return {layers, d, heads, 4 * d, vocab, max_positions};
}

// Prompt ids in [0, V-1), so EOS never appears in a prompt.
inline std::vector<twig::TokenId> random_ids(std::size_t n, std::uint32_t vocab, std::uint64_t seed) {
  twig::SplitMix64 rng(seed);
  std::vector<twig::TokenId> ids(n);
  for (auto& id : ids) id = static_cast<twig::TokenId>(rng.below(vocab - 1));
  return ids;
}

inline std::shared_ptr<const twig::Model> shared_model(const twig::ModelConfig& cfg, std::uint64_t seed) {
  return std::make_shared<const twig::Model>(twig::init_model(cfg, seed));
}

inline std::vector<std::size_t> iota(std::size_t first, std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = first + i;
  return v;
}

}  // namespace testing_util
