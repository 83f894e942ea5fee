#include "twig/twig_model.hpp"

#include <cmath>
#include <string>

#include "twig/error.hpp"
#include "twig/rng.hpp"

namespace twig {

std::string_view to_string(TwigInit init) {
  switch (init) {
    case TwigInit::Random: return "random";
    case TwigInit::LastLayers: return "last-layers";
    case TwigInit::LayersKtoKT: return "layers-k-to-kt";
  }
  return "unknown";
}

TwigInit parse_twig_init(std::string_view name) {
  if (name == "random") return TwigInit::Random;
  if (name == "last-layers") return TwigInit::LastLayers;
  if (name == "layers-k-to-kt") return TwigInit::LayersKtoKT;
  throw ConfigError("unknown twig init strategy '" + std::string(name) + "'");
}

void TwigConfig::validate(const ModelConfig& base) const {
  if (num_layers < 1) throw ConfigError("twig config: T must be >= 1");
  if (trunk_depth >= base.num_layers) throw ConfigError("twig config: K must be < L");
  if (trunk_depth + num_layers > base.num_layers) throw ConfigError("twig config: K + T must be <= L");
}

TwigModel attach_twig(std::shared_ptr<const Model> base, const TwigConfig& cfg, std::uint64_t seed) {
  if (!base) throw ConfigError("attach_twig: null base model");
  cfg.validate(base->config);
  TwigModel tm;
  tm.config = cfg;
  const std::size_t T = cfg.num_layers;
  switch (cfg.init) {
    case TwigInit::LayersKtoKT:
      tm.layers.assign(base->layers.begin() + cfg.trunk_depth, base->layers.begin() + cfg.trunk_depth + T);
      tm.final_norm = base->final_norm;
      tm.head = base->head;
      break;
    case TwigInit::LastLayers:
      tm.layers.assign(base->layers.end() - static_cast<std::ptrdiff_t>(T), base->layers.end());
      tm.final_norm = base->final_norm;
      tm.head = base->head;
      break;
    case TwigInit::Random: {
      SplitMix64 rng(derive_seed(seed, 0x7769677ULL));
      for (std::size_t t = 0; t < T; ++t) tm.layers.push_back(init_layer(base->config, rng.next()));
      const std::size_t d = base->config.hidden_dim;
      tm.final_norm = LayerNormParams::identity(d);
      tm.head = Matrix(d, base->config.vocab_size);
      const double stddev = 1.0 / std::sqrt(static_cast<double>(d));
      for (double& v : tm.head.flat()) v = rng.symmetric(stddev);
      break;
    }
  }
  tm.base = std::move(base);
  return tm;
}

ShallowOutput shallow_forward(const TwigModel& tm, const Latents& trunk_latents, KvCache& twig_cache,
                              bool capture_last_attn, FlopCounter* flops) {
  if (twig_cache.num_layers() != tm.layers.size()) throw InternalError("shallow_forward: twig cache depth mismatch");
  StackOptions options;
  options.caches = twig_cache.layers();
  options.flops = flops;
  if (capture_last_attn) options.capture.push_back(tm.layers.size() - 1);
  auto out = forward_stack(tm.layers, tm.base->config.num_heads, trunk_latents, options);

  ShallowOutput result;
  Matrix last(1, out.latents.values.cols());
  auto src = out.latents.values.row(out.latents.size() - 1);
  std::copy(src.begin(), src.end(), last.row(0).begin());
  result.logits = project_logits(tm.final_norm, tm.head, last);
  if (capture_last_attn) result.last_attention = std::move(out.attention.at(tm.layers.size() - 1));
  return result;
}

std::uint64_t twig_checksum(const TwigModel& tm) {
  std::uint64_t state = 0xcbf29ce484222325ULL;
  for (const auto& layer : tm.layers) state = checksum(layer, state);
  state = fnv1a(tm.final_norm.scale, state);
  state = fnv1a(tm.final_norm.bias, state);
  return fnv1a(tm.head.flat(), state);
}

}  // namespace twig
