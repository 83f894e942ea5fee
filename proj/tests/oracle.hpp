#pragma once

// Straight-line reference implementations used as test oracles. Nothing here
// calls into the library's forward code; only the weight structs are shared.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <set>
#include <vector>

#include "twig/model.hpp"
#include "twig/twig_model.hpp"

namespace oracle {

using Rows = std::vector<std::vector<double>>;

inline std::vector<double> layer_norm(const std::vector<double>& x, const twig::LayerNormParams& p) {
  const std::size_t d = x.size();
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(d);
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(d);
  const double inv = 1.0 / std::sqrt(var + 1e-5);
  std::vector<double> out(d);
  for (std::size_t i = 0; i < d; ++i) out[i] = (x[i] - mean) * inv * p.scale[i] + p.bias[i];
  return out;
}

inline std::vector<double> vec_mat(const std::vector<double>& x, const twig::Matrix& w) {
  std::vector<double> out(w.cols(), 0.0);
  for (std::size_t j = 0; j < w.cols(); ++j) {
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * w(i, j);
    out[j] = acc;
  }
  return out;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

// probs[h][q][k] over all rows; key k is visible to query q iff pos[k] <= pos[q].
using Attention = std::vector<Rows>;

inline Rows block(const twig::LayerWeights& w, std::size_t heads, const Rows& x, const std::vector<std::size_t>& pos,
                  Attention* capture = nullptr) {
  const std::size_t n = x.size();
  const std::size_t d = x.empty() ? 0 : x[0].size();
  const std::size_t dh = d / heads;
  Rows q(n), k(n), v(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto a = layer_norm(x[i], w.attn_norm);
    q[i] = vec_mat(a, w.w_q);
    k[i] = vec_mat(a, w.w_k);
    v[i] = vec_mat(a, w.w_v);
  }
  if (capture) capture->assign(heads, Rows(n, std::vector<double>(n, 0.0)));
  Rows ctx(n, std::vector<double>(d, 0.0));
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> s(n, -std::numeric_limits<double>::infinity());
      double top = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) {
        if (pos[j] > pos[i]) continue;
        double dot = 0.0;
        for (std::size_t c = 0; c < dh; ++c) dot += q[i][h * dh + c] * k[j][h * dh + c];
        s[j] = dot / std::sqrt(static_cast<double>(dh));
        top = std::max(top, s[j]);
      }
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        s[j] = pos[j] > pos[i] ? 0.0 : std::exp(s[j] - top);
        total += s[j];
      }
      for (std::size_t j = 0; j < n; ++j) {
        const double p = s[j] / total;
        if (capture) (*capture)[h][i][j] = p;
        for (std::size_t c = 0; c < dh; ++c) ctx[i][h * dh + c] += p * v[j][h * dh + c];
      }
    }
  }
  Rows out(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto o = vec_mat(ctx[i], w.w_o);
    std::vector<double> hdn(d);
    for (std::size_t c = 0; c < d; ++c) hdn[c] = x[i][c] + o[c];
    auto f = vec_mat(layer_norm(hdn, w.ffn_norm), w.ffn_in);
    for (double& a : f) a = gelu(a);
    auto g = vec_mat(f, w.ffn_out);
    out[i].resize(d);
    for (std::size_t c = 0; c < d; ++c) out[i][c] = hdn[c] + g[c];
  }
  return out;
}

inline Rows embed(const twig::Model& m, const std::vector<twig::TokenId>& ids) {
  Rows x(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    x[i].resize(m.config.hidden_dim);
    for (std::size_t c = 0; c < m.config.hidden_dim; ++c) {
      x[i][c] = m.embedding(static_cast<std::size_t>(ids[i]), c) + m.positional(i, c);
    }
  }
  return x;
}

inline std::vector<double> logits(const twig::LayerNormParams& norm, const twig::Matrix& head,
                                  const std::vector<double>& row) {
  return vec_mat(layer_norm(row, norm), head);
}

struct Plan {
  std::size_t k = 0;                   // prune after layer k (1-based)
  std::vector<std::size_t> kept;       // visual indices kept
  std::optional<std::size_t> kf;       // layers above kf see no visual rows
  std::size_t num_visual = 0;
};

// Keeps rows whose position is >= num_visual or listed in `kept`.
inline void filter(Rows& x, std::vector<std::size_t>& pos, std::size_t num_visual, const std::set<std::size_t>& kept) {
  Rows nx;
  std::vector<std::size_t> np;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (pos[i] >= num_visual || kept.count(pos[i])) {
      nx.push_back(x[i]);
      np.push_back(pos[i]);
    }
  }
  x = std::move(nx);
  pos = std::move(np);
}

// Uncached pass of the full (optionally pruned) target; logits of the last row.
inline std::vector<double> target_last_logits(const twig::Model& m, const std::vector<twig::TokenId>& ids,
                                              const std::optional<Plan>& plan) {
  Rows x = embed(m, ids);
  std::vector<std::size_t> pos(ids.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i;
  for (std::size_t l = 1; l <= m.layers.size(); ++l) {
    if (plan && l == plan->k + 1) {
      filter(x, pos, plan->num_visual, std::set<std::size_t>(plan->kept.begin(), plan->kept.end()));
    }
    if (plan && plan->kf && l == *plan->kf + 1) filter(x, pos, plan->num_visual, {});
    x = block(m.layers[l - 1], m.config.num_heads, x, pos);
  }
  return logits(m.final_norm, m.head, x.back());
}

inline twig::TokenId argmax(const std::vector<double>& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return static_cast<twig::TokenId>(best);
}

// Greedy decoding by full recomputation at every step.
inline std::vector<twig::TokenId> greedy(const twig::Model& m, std::vector<twig::TokenId> ids, std::size_t max_tokens,
                                         bool ignore_eos, const std::optional<Plan>& plan,
                                         std::vector<std::vector<double>>* all_logits = nullptr) {
  std::vector<twig::TokenId> out;
  const twig::TokenId eos = static_cast<twig::TokenId>(m.config.vocab_size) - 1;
  while (out.size() < max_tokens) {
    auto z = target_last_logits(m, ids, plan);
    if (all_logits) all_logits->push_back(z);
    const auto t = argmax(z);
    out.push_back(t);
    ids.push_back(t);
    if (!ignore_eos && t == eos) break;
  }
  return out;
}

// Shallow path (trunk layers 1..K then the twig) over the full prompt;
// returns the last twig layer's attention.
inline Attention twig_attention(const twig::TwigModel& tm, const std::vector<twig::TokenId>& ids) {
  const twig::Model& m = *tm.base;
  Rows x = embed(m, ids);
  std::vector<std::size_t> pos(ids.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i;
  for (std::size_t l = 0; l < tm.config.trunk_depth; ++l) x = block(m.layers[l], m.config.num_heads, x, pos);
  Attention att;
  for (std::size_t t = 0; t < tm.layers.size(); ++t) {
    x = block(tm.layers[t], m.config.num_heads, x, pos, t + 1 == tm.layers.size() ? &att : nullptr);
  }
  return att;
}

// Mean over heads of the sum over text query rows of the attention on each
// visual key.
inline std::vector<double> aggregate(const Attention& att, std::size_t num_visual, std::size_t num_text) {
  std::vector<double> s(num_visual, 0.0);
  for (std::size_t j = 0; j < num_visual; ++j) {
    double over_heads = 0.0;
    for (const auto& head : att) {
      double col = 0.0;
      for (std::size_t i = num_visual; i < num_visual + num_text; ++i) col += head[i][j];
      over_heads += col;
    }
    s[j] = over_heads / static_cast<double>(att.size());
  }
  return s;
}

// Exhaustive R-subset search: maximal total score; among equal totals the
// lexicographically smallest index set wins.
inline std::vector<std::size_t> exhaustive_top_r(const std::vector<double>& scores, std::size_t r) {
  const std::size_t m = scores.size();
  std::vector<std::size_t> best;
  double best_total = -std::numeric_limits<double>::infinity();
  for (std::uint32_t mask = 0; mask < (1U << m); ++mask) {
    if (static_cast<std::size_t>(__builtin_popcount(mask)) != r) continue;
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < m; ++i) {
      if (mask & (1U << i)) idx.push_back(i);
    }
    // Totals summed in descending score order so equal multisets tie exactly.
    std::vector<double> vals;
    for (auto i : idx) vals.push_back(scores[i]);
    std::sort(vals.rbegin(), vals.rend());
    double total = 0.0;
    for (double v : vals) total += v;
    if (total > best_total || (total == best_total && idx < best)) {
      best_total = total;
      best = idx;
    }
  }
  return best;
}

}  // namespace oracle
