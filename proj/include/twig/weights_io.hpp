#pragma once

// "TWG1" weight container, little-endian:
//   magic "TWG1"
//   u32 L, d, H, d_ff, V, max_positions
//   f64 tensors in declaration order: embedding, positional, per layer
//   {W_q, W_k, W_v, W_o, ffn_in, ffn_out, attn_norm scale, attn_norm bias,
//   ffn_norm scale, ffn_norm bias}, final_norm scale, final_norm bias, head
// optionally followed by a twig section:
//   tag "twig", u32 K, T, init (0 random, 1 last-layers, 2 layers-k-to-kt),
//   T layers as above, twig final_norm scale, bias, twig head

#include <memory>
#include <optional>
#include <string>

#include "twig/model.hpp"
#include "twig/twig_model.hpp"

namespace twig {

void save_weights(const std::string& path, const Model& model, const TwigModel* twig = nullptr);

struct LoadedWeights {
  std::shared_ptr<const Model> base;
  std::optional<TwigModel> twig;
};

// Throws IoError on malformed or truncated files.
LoadedWeights load_weights(const std::string& path);

}  // namespace twig
