#pragma once

// Inference: plain greedy decoding, pruned-target greedy decoding (FastV
// style), and self-speculative decoding on a twig model.
//
// Self-speculative decoding (SSD) session layout:
//   trunk cache  layers 1..K, unpruned, shared by the draft and target paths
//   twig cache   the T twig layers (draft path only)
//   deep cache   layers K+1..L of the target, built over the pruned prompt
// The draft path runs trunk + twig token by token and buffers each token's
// layer-K latent; verification pushes the whole buffer through the deep
// layers in one pass and rolls every cache back to the last committed token.
// Committed output is always exactly the target's greedy output.

#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "twig/kv_cache.hpp"
#include "twig/model.hpp"
#include "twig/pruning.hpp"
#include "twig/timing.hpp"
#include "twig/twig_model.hpp"

namespace twig {

struct PrefillResult {
  KvCache cache;
  Logits last_logits;
  std::map<std::size_t, AttentionMap> attention;  // keyed by 1-based layer
};

// Runs all L layers over the prompt. `capture_layers` are 1-based.
PrefillResult prefill(const Model& model, std::span<const TokenId> token_ids, const SequenceLayout& layout,
                      std::span<const std::size_t> capture_layers = {}, FlopCounter* flops = nullptr);

// Feeds one token at cache.next_position() through every layer.
Logits decode_step(const Model& model, KvCache& cache, TokenId token, FlopCounter* flops = nullptr);

struct GenerateOptions {
  bool ignore_eos = false;            // forced-length generation
  TimingReport* timing = nullptr;     // filled when set
  FlopCounter* prefill_flops = nullptr;
};

struct Generation {
  std::vector<TokenId> tokens;
  std::uint64_t logit_checksum = 0;  // FNV-1a over every next-token logit row
  std::vector<std::size_t> kept_visual;
};

// Stops after EOS (inclusive) or max_tokens.
Generation greedy_generate(const Model& model, std::span<const TokenId> token_ids, const SequenceLayout& layout,
                           std::size_t max_tokens, const GenerateOptions& options = {});

// Prefill of the pruned target: layers 1..K over the full prompt, layers
// K+1..L over the kept visual rows plus text, visual rows dropped above K_f.
// When `kept_visual` is absent the selection comes from layer D attention
// (from the same pass when D == K, else from an auxiliary unpruned pass).
struct PrunedPrefill {
  KvCache cache;
  Logits last_logits;
  std::vector<std::size_t> kept_visual;
  std::vector<double> scores;  // empty when kept_visual was supplied
};

PrunedPrefill pruned_prefill(const Model& model, std::span<const TokenId> token_ids, const SequenceLayout& layout,
                             const PruneConfig& prune, std::optional<std::vector<std::size_t>> kept_visual = {},
                             FlopCounter* flops = nullptr);

// Greedy decoding of the pruned target for a fixed kept set.
Generation pruned_greedy_generate(const Model& model, std::span<const TokenId> token_ids, const SequenceLayout& layout,
                                  const PruneConfig& prune, std::span<const std::size_t> kept_visual,
                                  std::size_t max_tokens, const GenerateOptions& options = {});

// FastV-style: select with layer-D attention, prune at K, then greedy.
Generation fastv_generate(const Model& model, std::span<const TokenId> token_ids, const SequenceLayout& layout,
                          const PruneConfig& prune, std::size_t max_tokens, const GenerateOptions& options = {});

struct SsdConfig {
  std::size_t max_drafts = 5;  // delta
  double threshold = 0.6;      // theta

  void validate() const;
};

struct IterationRecord {
  std::vector<TokenId> drafted;
  std::size_t accepted = 0;
  std::optional<TokenId> correction;
  bool early_exit = false;
};

struct GenerationTrace {
  std::vector<IterationRecord> iterations;
  std::size_t target_forwards = 0;  // deep-path verification passes

  std::size_t total_drafted() const;
  std::size_t total_accepted() const;
  std::size_t total_corrections() const;
};

struct SessionOptions {
  std::size_t max_tokens = std::numeric_limits<std::size_t>::max();
  bool ignore_eos = false;
};

struct Draft {
  std::vector<TokenId> tokens;
  bool early_exit = false;  // stopped because max probability < theta
};

struct Verification {
  std::size_t accepted = 0;
  std::optional<TokenId> correction;
};

class SsdSession {
 public:
  SsdSession(const TwigModel& tm, std::span<const TokenId> token_ids, const SequenceLayout& layout,
             const PruneConfig& prune, const SessionOptions& options = {});

  Draft draft(const SsdConfig& cfg);
  Verification verify(std::span<const TokenId> drafted);

  bool finished() const { return finished_; }
  std::span<const TokenId> committed() const { return committed_; }
  std::span<const std::size_t> kept_visual() const { return kept_visual_; }
  std::size_t target_forwards() const { return target_forwards_; }
  // Shallow path's prediction for the first response token.
  TokenId first_draft() const;

  const KvCache& trunk_cache() const { return trunk_; }
  const KvCache& twig_cache() const { return twig_; }
  const KvCache& deep_cache() const { return deep_; }
  const Latents& buffered_latents() const { return buffer_; }
  std::optional<TokenId> pending_token() const { return pending_; }
  const TwigModel& model() const { return *tm_; }
  const SequenceLayout& layout() const { return layout_; }
  const PruneConfig& prune_config() const { return prune_; }

 private:
  Logits feed_shallow(TokenId token);

  const TwigModel* tm_;
  SequenceLayout layout_;
  PruneConfig prune_;
  SessionOptions options_;
  KvCache trunk_;
  KvCache twig_;
  KvCache deep_;
  std::vector<std::size_t> kept_visual_;
  Latents buffer_;                      // layer-K latents not yet seen by the deep layers
  bool buffer_has_lead_ = false;        // buffer_[0] is the last committed token
  std::optional<TokenId> target_lead_;  // target's prediction for the first draft, from prefill
  Logits twig_next_;                    // twig logits after the last fed token
  std::optional<TokenId> pending_;      // committed, not yet fed
  std::vector<TokenId> committed_;
  std::size_t next_position_ = 0;
  std::size_t target_forwards_ = 0;
  bool finished_ = false;
};

// Twig-guided prefill: selection uses the last twig layer's attention.
SsdSession ttp_prefill(const TwigModel& tm, std::span<const TokenId> token_ids, const SequenceLayout& layout,
                       const PruneConfig& prune, const SessionOptions& options = {});

Draft draft_phase(SsdSession& session, const SsdConfig& cfg);
Verification verify_phase(SsdSession& session, std::span<const TokenId> drafted);

struct SsdResult {
  std::vector<TokenId> tokens;
  GenerationTrace trace;
  std::vector<std::size_t> kept_visual;
};

SsdResult ssd_generate(const TwigModel& tm, std::span<const TokenId> token_ids, const SequenceLayout& layout,
                       const PruneConfig& prune, const SsdConfig& ssd, std::size_t max_tokens,
                       const GenerateOptions& options = {});

}  // namespace twig
