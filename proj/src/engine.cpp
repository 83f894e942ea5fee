#include "twig/engine.hpp"

#include <algorithm>
#include <string>

#include "twig/error.hpp"

namespace twig {

namespace {

void check_prompt(const Model& model, std::span<const TokenId> token_ids, const SequenceLayout& layout) {
  layout.validate();
  if (token_ids.size() != layout.prompt_length()) {
    throw InputError("prompt length " + std::to_string(token_ids.size()) + " does not match layout M+N=" +
                     std::to_string(layout.prompt_length()));
  }
  if (layout.prompt_length() > model.config.max_positions) throw InputError("prompt exceeds max_positions");
}

Logits last_row_logits(const LayerNormParams& norm, const Matrix& head, const Latents& x) {
  Matrix last(1, x.values.cols());
  auto src = x.values.row(x.size() - 1);
  std::copy(src.begin(), src.end(), last.row(0).begin());
  return project_logits(norm, head, last);
}

// Greedy continuation from the logits that predict the first response token.
Generation decode_loop(const Model& model, KvCache& cache, Logits first, std::size_t max_tokens,
                       const GenerateOptions& options) {
  Generation gen;
  Stopwatch clock;
  std::uint64_t checksum = fnv1a(first.last());
  TokenId token = argmax(first.last());
  gen.tokens.push_back(token);
  const TokenId eos = model.config.eos();
  while (gen.tokens.size() < max_tokens && (options.ignore_eos || token != eos)) {
    Logits logits = decode_step(model, cache, token);
    checksum = fnv1a(logits.last(), checksum);
    token = argmax(logits.last());
    gen.tokens.push_back(token);
  }
  gen.logit_checksum = checksum;
  if (options.timing) {
    options.timing->decode_seconds = clock.seconds();
    options.timing->tokens_generated = gen.tokens.size();
  }
  return gen;
}

std::span<LayerCache> layer_range(KvCache& cache, std::size_t first, std::size_t count) {
  return cache.layers().subspan(first, count);
}

}  // namespace

PrefillResult prefill(const Model& model, std::span<const TokenId> token_ids, const SequenceLayout& layout,
                      std::span<const std::size_t> capture_layers, FlopCounter* flops) {
  check_prompt(model, token_ids, layout);
  const std::size_t L = model.config.num_layers;
  PrefillResult result;
  result.cache = KvCache(L, model.config.hidden_dim);

  StackOptions options;
  options.caches = result.cache.layers();
  options.flops = flops;
  for (auto layer : capture_layers) {
    if (layer < 1 || layer > L) throw InputError("prefill: capture layer " + std::to_string(layer) + " out of range");
    options.capture.push_back(layer - 1);
  }
  auto x = embed(model, token_ids, position_range(0, token_ids.size()));
  auto out = forward_stack(model.layers, model.config.num_heads, std::move(x), options);
  for (auto& [rel, map] : out.attention) result.attention.emplace(rel + 1, std::move(map));
  result.last_logits = last_row_logits(model.final_norm, model.head, out.latents);
  result.cache.set_next_position(token_ids.size());
  return result;
}

Logits decode_step(const Model& model, KvCache& cache, TokenId token, FlopCounter* flops) {
  if (cache.num_layers() != model.config.num_layers) throw InternalError("decode_step: cache depth mismatch");
  if (cache.next_position() == 0) throw InputError("decode_step: cache is empty; run prefill first");
  const std::size_t position = cache.next_position();
  if (position >= model.config.max_positions) throw InputError("decode_step: position overflow");
  const TokenId ids[] = {token};
  const std::size_t positions[] = {position};
  StackOptions options;
  options.caches = cache.layers();
  options.flops = flops;
  auto out = forward_stack(model.layers, model.config.num_heads, embed(model, ids, positions), options);
  cache.set_next_position(position + 1);
  return head_logits(model, out.latents);
}

Generation greedy_generate(const Model& model, std::span<const TokenId> token_ids, const SequenceLayout& layout,
                           std::size_t max_tokens, const GenerateOptions& options) {
  if (max_tokens == 0) throw InputError("greedy_generate: max_S must be >= 1");
  Stopwatch clock;
  auto pre = prefill(model, token_ids, layout, {}, options.prefill_flops);
  if (options.timing) options.timing->prefill_seconds = clock.seconds();
  return decode_loop(model, pre.cache, std::move(pre.last_logits), max_tokens, options);
}

PrunedPrefill pruned_prefill(const Model& model, std::span<const TokenId> token_ids, const SequenceLayout& layout,
                             const PruneConfig& prune, std::optional<std::vector<std::size_t>> kept_visual,
                             FlopCounter* flops) {
  check_prompt(model, token_ids, layout);
  const std::size_t L = model.config.num_layers;
  prune.validate(layout, L);
  const std::size_t K = prune.prune_layer;
  const std::size_t M = layout.num_visual;
  const std::size_t heads = model.config.num_heads;

  PrunedPrefill result;
  result.cache = KvCache(L, model.config.hidden_dim);
  auto x = embed(model, token_ids, position_range(0, token_ids.size()));

  std::optional<AttentionMap> selection_map;
  StackOptions trunk_options;
  trunk_options.caches = layer_range(result.cache, 0, K);
  trunk_options.flops = flops;
  if (kept_visual) {
    std::vector<std::size_t> sorted = *kept_visual;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end() || (!sorted.empty() && sorted.back() >= M)) {
      throw InputError("pruned_prefill: kept indices must be distinct and < M");
    }
    result.kept_visual = std::move(sorted);
  } else {
    const std::size_t D = prune.selection_depth;
    if (D == 0) throw ConfigError("pruned_prefill: attention-guided selection needs D >= 1");
    if (D == K) {
      trunk_options.capture.push_back(K - 1);
    } else {
      StackOptions aux;
      aux.capture.push_back(D - 1);
      auto probe = forward_stack(std::span(model.layers).first(D), heads, x, aux);
      selection_map = std::move(probe.attention.at(D - 1));
    }
  }

  auto trunk = forward_stack(std::span(model.layers).first(K), heads, std::move(x), trunk_options);
  if (!kept_visual) {
    const AttentionMap& map = selection_map ? *selection_map : trunk.attention.at(K - 1);
    result.scores = aggregate_attention(map, layout);
    result.kept_visual = top_r_select(result.scores, prune.retained);
  }

  StackOptions deep_options;
  deep_options.caches = layer_range(result.cache, K, L - K);
  deep_options.flops = flops;
  if (prune.final_wipe_layer) deep_options.wipe = VisualWipe{*prune.final_wipe_layer - K, M};
  auto deep = forward_stack(std::span(model.layers).subspan(K), heads,
                            prune_rows(trunk.latents, result.kept_visual, M), deep_options);
  result.last_logits = last_row_logits(model.final_norm, model.head, deep.latents);
  result.cache.set_next_position(token_ids.size());
  return result;
}

Generation pruned_greedy_generate(const Model& model, std::span<const TokenId> token_ids, const SequenceLayout& layout,
                                  const PruneConfig& prune, std::span<const std::size_t> kept_visual,
                                  std::size_t max_tokens, const GenerateOptions& options) {
  if (max_tokens == 0) throw InputError("pruned_greedy_generate: max_S must be >= 1");
  Stopwatch clock;
  auto pre = pruned_prefill(model, token_ids, layout, prune,
                            std::vector<std::size_t>(kept_visual.begin(), kept_visual.end()), options.prefill_flops);
  if (options.timing) options.timing->prefill_seconds = clock.seconds();
  auto gen = decode_loop(model, pre.cache, std::move(pre.last_logits), max_tokens, options);
  gen.kept_visual = std::move(pre.kept_visual);
  return gen;
}

Generation fastv_generate(const Model& model, std::span<const TokenId> token_ids, const SequenceLayout& layout,
                          const PruneConfig& prune, std::size_t max_tokens, const GenerateOptions& options) {
  if (max_tokens == 0) throw InputError("fastv_generate: max_S must be >= 1");
  Stopwatch clock;
  auto pre = pruned_prefill(model, token_ids, layout, prune, std::nullopt, options.prefill_flops);
  if (options.timing) options.timing->prefill_seconds = clock.seconds();
  auto gen = decode_loop(model, pre.cache, std::move(pre.last_logits), max_tokens, options);
  gen.kept_visual = std::move(pre.kept_visual);
  return gen;
}

void SsdConfig::validate() const {
  if (max_drafts < 1) throw ConfigError("ssd config: delta must be >= 1");
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw ConfigError("ssd config: theta must lie in [0, 1]");
}

std::size_t GenerationTrace::total_drafted() const {
  std::size_t n = 0;
  for (const auto& it : iterations) n += it.drafted.size();
  return n;
}

std::size_t GenerationTrace::total_accepted() const {
  std::size_t n = 0;
  for (const auto& it : iterations) n += it.accepted;
  return n;
}

std::size_t GenerationTrace::total_corrections() const {
  std::size_t n = 0;
  for (const auto& it : iterations) n += it.correction ? 1 : 0;
  return n;
}

SsdSession::SsdSession(const TwigModel& tm, std::span<const TokenId> token_ids, const SequenceLayout& layout,
                       const PruneConfig& prune, const SessionOptions& options)
    : tm_(&tm), layout_(layout), prune_(prune), options_(options) {
  const Model& base = *tm.base;
  check_prompt(base, token_ids, layout);
  const std::size_t L = base.config.num_layers;
  const std::size_t K = tm.trunk_depth();
  const std::size_t T = tm.layers.size();
  prune.validate(layout, L);
  if (prune.prune_layer != K) throw ConfigError("ttp_prefill: pruning layer must equal the twig's trunk depth");
  if (prune.selection_depth != K + T) throw ConfigError("ttp_prefill: selection depth must be K+T");
  if (options.max_tokens == 0) throw InputError("ttp_prefill: max_S must be >= 1");

  const std::size_t d = base.config.hidden_dim;
  trunk_ = KvCache(K, d);
  twig_ = KvCache(T, d);
  deep_ = KvCache(L - K, d);
  buffer_.values = Matrix(0, d);

  const std::size_t P = token_ids.size();
  StackOptions trunk_options;
  trunk_options.caches = trunk_.layers();
  auto trunk = forward_stack(tm.trunk_layers(), base.config.num_heads, embed(base, token_ids, position_range(0, P)),
                             trunk_options);

  auto shallow = shallow_forward(tm, trunk.latents, twig_, /*capture_last_attn=*/true);
  kept_visual_ = top_r_select(aggregate_attention(*shallow.last_attention, layout), prune.retained);
  twig_next_ = std::move(shallow.logits);

  StackOptions deep_options;
  deep_options.caches = deep_.layers();
  if (prune.final_wipe_layer) deep_options.wipe = VisualWipe{*prune.final_wipe_layer - K, layout.num_visual};
  auto deep = forward_stack(tm.deep_layers(), base.config.num_heads,
                            prune_rows(trunk.latents, kept_visual_, layout.num_visual), deep_options);
  target_lead_ = argmax(last_row_logits(base.final_norm, base.head, deep.latents).last());

  next_position_ = P;
  trunk_.set_next_position(P);
  twig_.set_next_position(P);
  deep_.set_next_position(P);
}

TokenId SsdSession::first_draft() const { return argmax(twig_next_.last()); }

Logits SsdSession::feed_shallow(TokenId token) {
  const Model& base = *tm_->base;
  const TokenId ids[] = {token};
  const std::size_t positions[] = {next_position_};
  StackOptions options;
  options.caches = trunk_.layers();
  auto trunk = forward_stack(tm_->trunk_layers(), base.config.num_heads, embed(base, ids, positions), options);
  buffer_.append(trunk.latents);
  auto shallow = shallow_forward(*tm_, trunk.latents, twig_, false);
  ++next_position_;
  trunk_.set_next_position(next_position_);
  twig_.set_next_position(next_position_);
  return std::move(shallow.logits);
}

Draft SsdSession::draft(const SsdConfig& cfg) {
  cfg.validate();
  Draft out;
  if (finished_) return out;
  const std::size_t remaining = options_.max_tokens - committed_.size();
  const std::size_t cap = std::min(cfg.max_drafts, remaining);

  Logits logits;
  if (pending_) {
    logits = feed_shallow(*pending_);
    buffer_has_lead_ = true;
    pending_.reset();
  } else {
    logits = twig_next_;
  }
  const TokenId eos = tm_->base->config.eos();
  while (true) {
    const TokenId token = argmax(logits.last());
    const double confidence = max_probability(logits.last());
    out.tokens.push_back(token);
    logits = feed_shallow(token);
    if (out.tokens.size() >= cap) break;
    if (!options_.ignore_eos && token == eos) break;
    if (confidence < cfg.threshold) {
      out.early_exit = true;
      break;
    }
  }
  return out;
}

Verification SsdSession::verify(std::span<const TokenId> drafted) {
  if (finished_) throw InternalError("verify: session already finished");
  const std::size_t lead = buffer_has_lead_ ? 1 : 0;
  if (drafted.empty() || buffer_.size() != drafted.size() + lead) {
    throw InternalError("verify: buffered latents do not match the drafted tokens");
  }
  const Model& base = *tm_->base;
  const std::size_t K = tm_->trunk_depth();

  StackOptions options;
  options.caches = deep_.layers();
  if (prune_.final_wipe_layer) options.wipe = VisualWipe{*prune_.final_wipe_layer - K, layout_.num_visual};
  auto deep = forward_stack(tm_->deep_layers(), base.config.num_heads, buffer_, options);
  Logits logits = head_logits(base, deep.latents);
  ++target_forwards_;

  // targets[i] is the target's choice at the position drafted[i] occupies;
  // the final entry is the bonus after the last draft.
  std::vector<TokenId> targets;
  if (!buffer_has_lead_) targets.push_back(*target_lead_);
  for (std::size_t r = 0; r < logits.rows(); ++r) targets.push_back(argmax(logits.row(r)));

  Verification result;
  while (result.accepted < drafted.size() && drafted[result.accepted] == targets[result.accepted]) ++result.accepted;

  const TokenId eos = base.config.eos();
  for (std::size_t i = 0; i < result.accepted; ++i) {
    committed_.push_back(drafted[i]);
    if (!options_.ignore_eos && drafted[i] == eos) {
      finished_ = true;
      result.accepted = i + 1;
      break;
    }
  }
  if (!finished_ && committed_.size() < options_.max_tokens) {
    result.correction = targets[result.accepted];
    committed_.push_back(*result.correction);
    if (!options_.ignore_eos && *result.correction == eos) finished_ = true;
  }
  if (committed_.size() >= options_.max_tokens) finished_ = true;

  // Everything past the last accepted draft is provisional.
  const std::size_t fed = committed_.size() - (result.correction ? 1 : 0);
  const std::size_t keep_end = layout_.prompt_length() + fed;
  trunk_.truncate(keep_end);
  twig_.truncate(keep_end);
  deep_.truncate(keep_end);
  deep_.set_next_position(keep_end);
  next_position_ = keep_end;

  pending_ = result.correction;
  buffer_ = Latents{Matrix(0, base.config.hidden_dim), {}};
  buffer_has_lead_ = false;
  target_lead_.reset();
  return result;
}

SsdSession ttp_prefill(const TwigModel& tm, std::span<const TokenId> token_ids, const SequenceLayout& layout,
                       const PruneConfig& prune, const SessionOptions& options) {
  return SsdSession(tm, token_ids, layout, prune, options);
}

Draft draft_phase(SsdSession& session, const SsdConfig& cfg) { return session.draft(cfg); }

Verification verify_phase(SsdSession& session, std::span<const TokenId> drafted) { return session.verify(drafted); }

SsdResult ssd_generate(const TwigModel& tm, std::span<const TokenId> token_ids, const SequenceLayout& layout,
                       const PruneConfig& prune, const SsdConfig& ssd, std::size_t max_tokens,
                       const GenerateOptions& options) {
  ssd.validate();
  if (max_tokens == 0) throw InputError("ssd_generate: max_S must be >= 1");
  Stopwatch clock;
  SsdSession session(tm, token_ids, layout, prune, SessionOptions{max_tokens, options.ignore_eos});
  if (options.timing) options.timing->prefill_seconds = clock.seconds();
  clock.reset();

  SsdResult result;
  while (!session.finished()) {
    Draft draft = session.draft(ssd);
    Verification verdict = session.verify(draft.tokens);
    result.trace.iterations.push_back({std::move(draft.tokens), verdict.accepted, verdict.correction, draft.early_exit});
  }
  result.trace.target_forwards = session.target_forwards();
  result.tokens.assign(session.committed().begin(), session.committed().end());
  result.kept_visual.assign(session.kept_visual().begin(), session.kept_visual().end());
  if (options.timing) {
    options.timing->decode_seconds = clock.seconds();
    options.timing->tokens_generated = result.tokens.size();
  }
  return result;
}

}  // namespace twig
