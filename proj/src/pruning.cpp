#include "twig/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "twig/error.hpp"

namespace twig {

void PruneConfig::validate(const SequenceLayout& layout, std::size_t num_layers) const {
  if (prune_layer > num_layers) throw ConfigError("prune config: K must be <= L");
  if (retained > layout.num_visual) throw ConfigError("prune config: R must be <= M");
  if (final_wipe_layer) {
    if (*final_wipe_layer <= prune_layer || *final_wipe_layer > num_layers) {
      throw ConfigError("prune config: FinalWipe layer must satisfy K < K_f <= L");
    }
  }
  if (selection_depth < prune_layer) throw ConfigError("prune config: selection depth D must be >= K");
  if (selection_depth > num_layers) throw ConfigError("prune config: selection depth D must be <= L");
}

std::vector<double> aggregate_attention(const AttentionMap& attention, const SequenceLayout& layout) {
  const std::size_t m = layout.num_visual;
  const std::size_t text_end = layout.prompt_length();
  std::vector<std::size_t> key_index(m, attention.num_keys());
  for (std::size_t j = 0; j < attention.num_keys(); ++j) {
    if (attention.key_positions[j] < m) key_index[attention.key_positions[j]] = j;
  }
  std::vector<std::size_t> text_rows;
  for (std::size_t i = 0; i < attention.num_queries(); ++i) {
    const auto p = attention.query_positions[i];
    if (p >= m && p < text_end) text_rows.push_back(i);
  }
  const bool keys_covered = std::none_of(key_index.begin(), key_index.end(),
                                         [&](std::size_t j) { return j == attention.num_keys(); });
  if (!keys_covered || text_rows.size() != layout.num_text) {
    throw InputError("aggregate_attention: layout exceeds the attention map's extent");
  }
  if (attention.num_heads == 0) throw InputError("aggregate_attention: attention map has no heads");

  std::vector<double> scores(m, 0.0);
  for (std::size_t v = 0; v < m; ++v) {
    double total = 0.0;
    for (std::size_t h = 0; h < attention.num_heads; ++h) {
      double head_sum = 0.0;
      for (auto i : text_rows) head_sum += attention.at(h, i, key_index[v]);
      total += head_sum;
    }
    scores[v] = total / static_cast<double>(attention.num_heads);
  }
  return scores;
}

std::vector<std::size_t> top_r_select(std::span<const double> scores, std::size_t retained) {
  if (retained > scores.size()) {
    throw InputError("top_r_select: R=" + std::to_string(retained) + " exceeds M=" + std::to_string(scores.size()));
  }
  for (double s : scores) {
    if (!std::isfinite(s)) throw InputError("top_r_select: non-finite score");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  order.resize(retained);
  std::sort(order.begin(), order.end());
  return order;
}

Latents prune_rows(const Latents& x, std::span<const std::size_t> kept_visual, std::size_t num_visual) {
  std::vector<bool> keep(num_visual, false);
  for (auto v : kept_visual) {
    if (v >= num_visual) throw InputError("prune_rows: kept index out of range");
    keep[v] = true;
  }
  std::vector<std::size_t> rows;
  rows.reserve(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const auto p = x.positions[i];
    if (p >= num_visual || keep[p]) rows.push_back(i);
  }
  return x.select(rows);
}

PrunedLatents prune_sequence(const Latents& x, const AttentionMap& attention, const SequenceLayout& layout,
                             std::size_t retained) {
  const std::size_t prompt = layout.prompt_length();
  if (x.size() < prompt) throw InputError("prune_sequence: latents do not cover the prompt");
  for (std::size_t i = 0; i < prompt; ++i) {
    if (x.positions[i] != i) throw InputError("prune_sequence: latents must hold the unpruned prompt");
  }
  PrunedLatents out;
  out.kept_visual = top_r_select(aggregate_attention(attention, layout), retained);
  out.latents = prune_rows(x, out.kept_visual, layout.num_visual);
  return out;
}

namespace {

// round-half-up(num / den) for num, den > 0 in exact integer arithmetic.
std::uint64_t round_half_up(std::uint64_t num, std::uint64_t den) { return (2 * num + den) / (2 * den); }

}  // namespace

std::uint64_t avg_retained(std::uint64_t m, std::uint64_t k, std::uint64_t r, std::uint64_t l) {
  if (l == 0 || k > l) throw InputError("avg_retained: requires 0 <= K <= L, L >= 1");
  if (r > m) throw InputError("avg_retained: requires R <= M");
  return round_half_up(m * k + r * (l - k), l);
}

std::uint64_t avg_retained_finalwipe(std::uint64_t m, std::uint64_t k, std::uint64_t r, std::uint64_t kf,
                                     std::uint64_t l) {
  if (kf <= k) throw InputError("avg_retained_finalwipe: requires K < K_f");
  if (kf > l) throw InputError("avg_retained_finalwipe: requires K_f <= L");
  if (r > m) throw InputError("avg_retained_finalwipe: requires R <= M");
  return round_half_up(m * k + r * (kf - k), l);
}

std::uint64_t solve_r(std::uint64_t target_rbar, std::uint64_t m, std::uint64_t k, std::uint64_t kf,
                      std::uint64_t l) {
  if (kf <= k || kf > l) throw DomainError("solve_r: requires K < K_f <= L");
  // Nearest R to the exact real solution, ties toward the lower R, clamped to [0, M].
  const std::uint64_t budget = target_rbar * l;
  const std::uint64_t base = m * k;
  const std::uint64_t w = kf - k;
  const std::uint64_t r = budget < base ? 0 : std::min(m, (2 * (budget - base) + w - 1) / (2 * w));
  if (avg_retained_finalwipe(m, k, r, kf, l) != target_rbar) {
    throw DomainError("solve_r: no R in [0, M] reaches the target average");
  }
  return r;
}

std::vector<LayerOccupancy> layer_occupancy(const SequenceLayout& layout, const PruneConfig& plan,
                                            std::size_t num_layers) {
  plan.validate(layout, num_layers);
  const std::size_t wipe = plan.final_wipe_layer.value_or(num_layers);
  std::vector<LayerOccupancy> out(num_layers);
  for (std::size_t l = 1; l <= num_layers; ++l) {
    std::size_t visual = l <= plan.prune_layer ? layout.num_visual : (l <= wipe ? plan.retained : 0);
    out[l - 1] = {visual, layout.num_text};
  }
  return out;
}

}  // namespace twig
