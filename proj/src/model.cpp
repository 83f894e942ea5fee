#include "twig/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "twig/error.hpp"
#include "twig/rng.hpp"

namespace twig {

namespace {

void fill(Matrix& m, SplitMix64& rng, double stddev) {
  for (double& v : m.flat()) v = rng.symmetric(stddev);
}

Matrix random_matrix(std::size_t rows, std::size_t cols, SplitMix64& rng, double stddev) {
  Matrix m(rows, cols);
  fill(m, rng, stddev);
  return m;
}

void check_row_width(const Matrix& m, std::size_t rows, std::size_t cols, const char* name) {
  if (m.rows() != rows || m.cols() != cols) throw InternalError(std::string("shape mismatch in ") + name);
}

}  // namespace

void ModelConfig::validate() const {
  if (num_layers == 0 || hidden_dim == 0 || num_heads == 0 || ffn_dim == 0 || vocab_size == 0 || max_positions == 0) {
    throw ConfigError("model config: every field must be >= 1");
  }
  if (hidden_dim % num_heads != 0) throw ConfigError("model config: hidden_dim must be divisible by num_heads");
  if (vocab_size < 2) throw ConfigError("model config: vocab_size must leave room for EOS and one content token");
}

void SequenceLayout::validate() const {
  if (num_text == 0) throw InputError("layout: at least one text token is required");
}

LayerNormParams LayerNormParams::identity(std::size_t width) {
  return {std::vector<double>(width, 1.0), std::vector<double>(width, 0.0)};
}

Latents Latents::select(std::span<const std::size_t> rows) const {
  Latents out;
  out.values = values.select_rows(rows);
  out.positions.reserve(rows.size());
  for (auto r : rows) out.positions.push_back(positions.at(r));
  return out;
}

void Latents::append(const Latents& other) {
  if (!positions.empty() && !other.positions.empty() && other.positions.front() <= positions.back()) {
    throw InternalError("Latents::append: positions must increase");
  }
  for (std::size_t i = 0; i < other.size(); ++i) values.append_row(other.values.row(i));
  positions.insert(positions.end(), other.positions.begin(), other.positions.end());
}

LayerWeights init_layer(const ModelConfig& cfg, std::uint64_t seed) {
  SplitMix64 rng(seed);
  const std::size_t d = cfg.hidden_dim;
  const std::size_t dff = cfg.ffn_dim;
  const double scale = 0.02 / std::sqrt(static_cast<double>(d));
  LayerWeights w;
  w.w_q = random_matrix(d, d, rng, scale);
  w.w_k = random_matrix(d, d, rng, scale);
  w.w_v = random_matrix(d, d, rng, scale);
  w.w_o = random_matrix(d, d, rng, scale);
  w.ffn_in = random_matrix(d, dff, rng, scale);
  w.ffn_out = random_matrix(dff, d, rng, scale);
  w.attn_norm = LayerNormParams::identity(d);
  w.ffn_norm = LayerNormParams::identity(d);
  return w;
}

Model init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const std::size_t d = cfg.hidden_dim;
  SplitMix64 rng(seed);
  Model m;
  m.config = cfg;
  m.embedding = random_matrix(cfg.vocab_size, d, rng, 1.0);
  m.positional = random_matrix(cfg.max_positions, d, rng, 0.1);
  m.layers.reserve(cfg.num_layers);
  for (std::uint32_t l = 0; l < cfg.num_layers; ++l) m.layers.push_back(init_layer(cfg, rng.next()));
  m.final_norm = LayerNormParams::identity(d);
  m.head = random_matrix(d, cfg.vocab_size, rng, 1.0 / std::sqrt(static_cast<double>(d)));
  return m;
}

std::vector<std::size_t> position_range(std::size_t first, std::size_t n) {
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = first + i;
  return out;
}

Latents embed(const Model& model, std::span<const TokenId> token_ids, std::span<const std::size_t> positions) {
  if (token_ids.empty()) throw InputError("embed: empty token list");
  if (token_ids.size() != positions.size()) throw InputError("embed: ids and positions differ in length");
  const auto& cfg = model.config;
  Latents out;
  out.values = Matrix(token_ids.size(), cfg.hidden_dim);
  out.positions.assign(positions.begin(), positions.end());
  for (std::size_t i = 0; i < token_ids.size(); ++i) {
    if (token_ids[i] < 0 || static_cast<std::uint32_t>(token_ids[i]) >= cfg.vocab_size) {
      throw InputError("embed: token id " + std::to_string(token_ids[i]) + " out of range");
    }
    if (positions[i] >= cfg.max_positions) {
      throw InputError("embed: position " + std::to_string(positions[i]) + " exceeds max_positions");
    }
    if (i > 0 && positions[i] <= positions[i - 1]) throw InputError("embed: positions must be strictly increasing");
    auto e = model.embedding.row(static_cast<std::size_t>(token_ids[i]));
    auto p = model.positional.row(positions[i]);
    auto row = out.values.row(i);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] = e[c] + p[c];
  }
  return out;
}

std::vector<double> layer_norm_row(std::span<const double> x, const LayerNormParams& p) {
  const double n = static_cast<double>(x.size());
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= n;
  const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mean) * rstd * p.scale[i] + p.bias[i];
  return out;
}

namespace {

Matrix layer_norm(const Matrix& x, const LayerNormParams& p) {
  Matrix out(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto normed = layer_norm_row(x.row(r), p);
    std::copy(normed.begin(), normed.end(), out.row(r).begin());
  }
  return out;
}

}  // namespace

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

LayerOutput layer_forward(const LayerWeights& layer, std::size_t num_heads, const Latents& x, LayerCache* cache,
                          bool capture, FlopCounter* flops) {
  const std::size_t d = layer.w_q.rows();
  const std::size_t s_q = x.size();
  if (s_q == 0) throw InternalError("layer_forward: empty input");
  if (x.values.rows() != s_q || x.values.cols() != d) throw InternalError("layer_forward: latent shape mismatch");
  if (num_heads == 0 || d % num_heads != 0) throw InternalError("layer_forward: bad head count");
  check_row_width(layer.w_o, d, d, "w_o");
  check_row_width(layer.ffn_out, layer.ffn_in.cols(), d, "ffn_out");

  LayerCache scratch(d);
  LayerCache& kv = cache ? *cache : scratch;
  if (kv.width() != d) throw InternalError("layer_forward: cache width mismatch");
  if (!kv.empty() && kv.positions().back() >= x.positions.front()) {
    throw InternalError("layer_forward: cached positions must precede the query positions");
  }

  Matrix normed = layer_norm(x.values, layer.attn_norm);
  Matrix q = matmul(normed.view(), layer.w_q.view(), flops);
  Matrix k = matmul(normed.view(), layer.w_k.view(), flops);
  Matrix v = matmul(normed.view(), layer.w_v.view(), flops);
  kv.append(k, v, x.positions);

  const std::size_t s_kv = kv.length();
  const std::size_t dh = d / num_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto key_pos = kv.positions();

  LayerOutput result;
  if (capture) {
    AttentionMap map;
    map.num_heads = num_heads;
    map.query_positions = x.positions;
    map.key_positions.assign(key_pos.begin(), key_pos.end());
    map.probs.assign(num_heads * s_q * s_kv, 0.0);
    result.attention = std::move(map);
  }

  Matrix context(s_q, d);
  Matrix scores(s_q, s_kv);
  for (std::size_t h = 0; h < num_heads; ++h) {
    const auto qh = q.view().columns(h * dh, dh);
    const auto kh = kv.keys().view().columns(h * dh, dh);
    const auto vh = kv.values().view().columns(h * dh, dh);
    gemm(qh, kh.transposed(), scores.view(), flops);
    for (std::size_t i = 0; i < s_q; ++i) {
      auto row = scores.row(i);
      const std::size_t qpos = x.positions[i];
      double max_score = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < s_kv; ++j) {
        if (key_pos[j] <= qpos) max_score = std::max(max_score, row[j] * scale);
      }
      double total = 0.0;
      for (std::size_t j = 0; j < s_kv; ++j) {
        if (key_pos[j] <= qpos) {
          row[j] = std::exp(row[j] * scale - max_score);
          total += row[j];
        } else {
          row[j] = 0.0;
        }
      }
      for (std::size_t j = 0; j < s_kv; ++j) row[j] /= total;
      if (result.attention) {
        auto& probs = result.attention->probs;
        std::copy(row.begin(), row.end(), probs.begin() + static_cast<std::ptrdiff_t>((h * s_q + i) * s_kv));
      }
    }
    gemm(scores.view(), vh, context.view().columns(h * dh, dh), flops);
  }

  Matrix attn_out = matmul(context.view(), layer.w_o.view(), flops);
  Matrix hidden = x.values;
  for (std::size_t i = 0; i < hidden.flat().size(); ++i) hidden.flat()[i] += attn_out.flat()[i];

  Matrix ffn_normed = layer_norm(hidden, layer.ffn_norm);
  Matrix up = matmul(ffn_normed.view(), layer.ffn_in.view(), flops);
  for (double& u : up.flat()) u = gelu(u);
  Matrix down = matmul(up.view(), layer.ffn_out.view(), flops);
  for (std::size_t i = 0; i < hidden.flat().size(); ++i) hidden.flat()[i] += down.flat()[i];

  result.latents.values = std::move(hidden);
  result.latents.positions = x.positions;
  return result;
}

Latents drop_visual(const Latents& x, std::size_t num_visual) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x.positions[i] >= num_visual) rows.push_back(i);
  }
  return x.select(rows);
}

StackOutput forward_stack(std::span<const LayerWeights> layers, std::size_t num_heads, Latents x,
                          const StackOptions& options) {
  if (!options.caches.empty() && options.caches.size() != layers.size()) {
    throw InternalError("forward_stack: cache depth does not match the layer count");
  }
  StackOutput out;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (options.wipe && options.wipe->before_layer == l) x = drop_visual(x, options.wipe->num_visual);
    if (x.size() == 0) throw InternalError("forward_stack: no rows left after visual wipe");
    const bool capture = std::find(options.capture.begin(), options.capture.end(), l) != options.capture.end();
    LayerCache* cache = options.caches.empty() ? nullptr : &options.caches[l];
    auto step = layer_forward(layers[l], num_heads, x, cache, capture, options.flops);
    x = std::move(step.latents);
    if (step.attention) out.attention.emplace(l, std::move(*step.attention));
  }
  out.latents = std::move(x);
  return out;
}

Logits project_logits(const LayerNormParams& norm, const Matrix& head, const Matrix& latents) {
  if (latents.rows() == 0) throw InputError("head_logits: empty latents");
  Logits out;
  out.values = matmul(layer_norm(latents, norm).view(), head.view());
  return out;
}

Logits head_logits(const Model& model, const Latents& x) {
  return project_logits(model.final_norm, model.head, x.values);
}

TokenId argmax(std::span<const double> logits) {
  if (logits.empty()) throw InputError("argmax: empty logits");
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return static_cast<TokenId>(best);
}

double max_probability(std::span<const double> logits) {
  if (logits.empty()) throw InputError("max_probability: empty logits");
  const double top = logits[static_cast<std::size_t>(argmax(logits))];
  double total = 0.0;
  for (double l : logits) total += std::exp(l - top);
  return 1.0 / total;
}

std::uint64_t checksum(const LayerWeights& layer, std::uint64_t state) {
  for (const Matrix* m : {&layer.w_q, &layer.w_k, &layer.w_v, &layer.w_o, &layer.ffn_in, &layer.ffn_out}) {
    state = fnv1a(m->flat(), state);
  }
  for (const LayerNormParams* p : {&layer.attn_norm, &layer.ffn_norm}) {
    state = fnv1a(p->scale, state);
    state = fnv1a(p->bias, state);
  }
  return state;
}

std::uint64_t checksum(const Model& model) {
  std::uint64_t state = fnv1a(model.embedding.flat());
  state = fnv1a(model.positional.flat(), state);
  for (const auto& layer : model.layers) state = checksum(layer, state);
  state = fnv1a(model.final_norm.scale, state);
  state = fnv1a(model.final_norm.bias, state);
  return fnv1a(model.head.flat(), state);
}

}  // namespace twig
