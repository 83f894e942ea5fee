#pragma once

// Minimal decoder-only transformer in f64.
//
// Block structure (pre-norm, no biases on projections):
//   h   = x + W_o * SA(LN_attn(x))
//   out = h + ffn_out * GELU(ffn_in * LN_ffn(h))
// SA is causal multi-head attention with per-head scale 1/sqrt(d/H). The
// causal mask compares absolute positions, so a pruned sequence keeps the
// original indices of its surviving tokens. GELU is the exact erf form.

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "twig/kv_cache.hpp"
#include "twig/tensor.hpp"

namespace twig {

using TokenId = std::int32_t;

inline constexpr double kLayerNormEps = 1e-5;

struct ModelConfig {
  std::uint32_t num_layers = 0;
  std::uint32_t hidden_dim = 0;
  std::uint32_t num_heads = 0;
  std::uint32_t ffn_dim = 0;
  std::uint32_t vocab_size = 0;
  std::uint32_t max_positions = 0;

  // Throws ConfigError.
  void validate() const;
  std::size_t head_dim() const { return hidden_dim / num_heads; }
  TokenId eos() const { return static_cast<TokenId>(vocab_size) - 1; }

  bool operator==(const ModelConfig&) const = default;
};

// Visual tokens occupy positions [0, num_visual); text tokens follow.
struct SequenceLayout {
  std::size_t num_visual = 0;
  std::size_t num_text = 0;

  std::size_t prompt_length() const { return num_visual + num_text; }
  void validate() const;
};

struct LayerNormParams {
  std::vector<double> scale;
  std::vector<double> bias;

  static LayerNormParams identity(std::size_t width);
  bool operator==(const LayerNormParams&) const = default;
};

struct LayerWeights {
  Matrix w_q, w_k, w_v, w_o;  // d x d
  Matrix ffn_in;              // d x d_ff
  Matrix ffn_out;             // d_ff x d
  LayerNormParams attn_norm;
  LayerNormParams ffn_norm;

  bool operator==(const LayerWeights&) const = default;
};

struct Model {
  ModelConfig config;
  Matrix embedding;   // V x d
  Matrix positional;  // max_positions x d
  std::vector<LayerWeights> layers;
  LayerNormParams final_norm;
  Matrix head;  // d x V
};

// Hidden states of a (possibly pruned) token sequence.
struct Latents {
  Matrix values;                       // rows x d
  std::vector<std::size_t> positions;  // strictly increasing absolute positions

  std::size_t size() const { return positions.size(); }
  Latents select(std::span<const std::size_t> rows) const;
  // Appends the rows of `other`; positions must continue increasing.
  void append(const Latents& other);
};

// Per-head attention probabilities, heads x queries x keys.
struct AttentionMap {
  std::size_t num_heads = 0;
  std::vector<std::size_t> query_positions;
  std::vector<std::size_t> key_positions;
  std::vector<double> probs;

  std::size_t num_queries() const { return query_positions.size(); }
  std::size_t num_keys() const { return key_positions.size(); }
  double at(std::size_t h, std::size_t q, std::size_t k) const {
    return probs[(h * num_queries() + q) * num_keys() + k];
  }
};

// One logit row per query position.
struct Logits {
  Matrix values;  // rows x V

  std::size_t rows() const { return values.rows(); }
  std::span<const double> row(std::size_t r) const { return values.row(r); }
  std::span<const double> last() const { return values.row(values.rows() - 1); }
};

struct LayerOutput {
  Latents latents;
  std::optional<AttentionMap> attention;
};

// Initializes weights from a SplitMix64 stream (see rng.hpp). Tensors are
// drawn in declaration order as uniform noise with standard deviation
//   projections (W_q, W_k, W_v, W_o, ffn_in, ffn_out): 0.02 / sqrt(d)
//   embedding: 1.0, positional: 0.1, head: 1 / sqrt(d)
// Layer norms start at scale 1, bias 0.
Model init_model(const ModelConfig& cfg, std::uint64_t seed);

// One block of fresh weights from its own stream; the twig's Random init
// uses this too.
LayerWeights init_layer(const ModelConfig& cfg, std::uint64_t seed);

Latents embed(const Model& model, std::span<const TokenId> token_ids, std::span<const std::size_t> positions);

// Contiguous positions [first, first + n).
std::vector<std::size_t> position_range(std::size_t first, std::size_t n);

std::vector<double> layer_norm_row(std::span<const double> x, const LayerNormParams& p);

// One transformer block. With a cache, the new keys/values are appended
// before attention so queries see cached and fresh keys alike; without one a
// scratch cache is used. Every cached position must precede x.positions.
LayerOutput layer_forward(const LayerWeights& layer, std::size_t num_heads, const Latents& x, LayerCache* cache,
                          bool capture, FlopCounter* flops = nullptr);

// Drops rows whose position is visual (< num_visual) before running the
// layer at relative index `before_layer`.
struct VisualWipe {
  std::size_t before_layer = 0;
  std::size_t num_visual = 0;
};

struct StackOptions {
  std::span<LayerCache> caches;  // empty, or one LayerCache per layer in the stack
  std::optional<VisualWipe> wipe;
  std::vector<std::size_t> capture;  // relative layer indices
  FlopCounter* flops = nullptr;
};

struct StackOutput {
  Latents latents;
  std::map<std::size_t, AttentionMap> attention;  // keyed by relative index
};

// Runs a contiguous run of layers.
StackOutput forward_stack(std::span<const LayerWeights> layers, std::size_t num_heads, Latents x,
                          const StackOptions& options = {});

// Rows of `x` whose position is not visual.
Latents drop_visual(const Latents& x, std::size_t num_visual);

// Final layer norm then the head projection.
Logits project_logits(const LayerNormParams& norm, const Matrix& head, const Matrix& latents);
Logits head_logits(const Model& model, const Latents& x);

// Lowest index among the maxima.
TokenId argmax(std::span<const double> logits);
// Largest softmax probability of a logit row.
double max_probability(std::span<const double> logits);

double gelu(double x);

std::uint64_t checksum(const LayerWeights& layer, std::uint64_t state = 0xcbf29ce484222325ULL);
std::uint64_t checksum(const Model& model);

}  // namespace twig
