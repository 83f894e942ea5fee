#pragma once

// A twig is T extra transformer blocks plus their own final norm and
// prediction head, grown from the output of trunk layer K. Together with the
// first K base layers it forms the shallow model; the base model itself is
// shared and never modified.

#include <cstdint>
#include <memory>
#include <optional>
#include <string_view>

#include "twig/model.hpp"

namespace twig {

enum class TwigInit {
  Random,       // fresh weights
  LastLayers,   // copies of base layers L-T+1..L
  LayersKtoKT,  // copies of base layers K+1..K+T
};

std::string_view to_string(TwigInit init);
// Accepts "random", "last-layers", "layers-k-to-kt"; throws ConfigError.
TwigInit parse_twig_init(std::string_view name);

struct TwigConfig {
  std::uint32_t trunk_depth = 0;  // K
  std::uint32_t num_layers = 1;   // T
  TwigInit init = TwigInit::LayersKtoKT;

  void validate(const ModelConfig& base) const;
};

struct TwigModel {
  std::shared_ptr<const Model> base;
  TwigConfig config;
  std::vector<LayerWeights> layers;
  LayerNormParams final_norm;
  Matrix head;

  std::size_t trunk_depth() const { return config.trunk_depth; }
  std::span<const LayerWeights> trunk_layers() const { return {base->layers.data(), config.trunk_depth}; }
  std::span<const LayerWeights> deep_layers() const {
    return {base->layers.data() + config.trunk_depth, base->layers.size() - config.trunk_depth};
  }
};

TwigModel attach_twig(std::shared_ptr<const Model> base, const TwigConfig& cfg, std::uint64_t seed);

struct ShallowOutput {
  Logits logits;  // last position only
  std::optional<AttentionMap> last_attention;
};

// Runs the twig blocks over layer-K latents. `twig_cache` must have T layers.
ShallowOutput shallow_forward(const TwigModel& tm, const Latents& trunk_latents, KvCache& twig_cache,
                              bool capture_last_attn, FlopCounter* flops = nullptr);

// Checksum of the twig parameters only.
std::uint64_t twig_checksum(const TwigModel& tm);

}  // namespace twig
