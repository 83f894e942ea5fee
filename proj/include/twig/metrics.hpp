#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "twig/engine.hpp"
#include "twig/model.hpp"
#include "twig/pruning.hpp"
#include "twig/timing.hpp"
#include "twig/twig_model.hpp"

namespace twig {

// FLOPs of one block (multiply-add = 2):
//   8*s_q*d^2 (Q,K,V,O) + 4*s_q*s_kv*d (scores, weighted sum) + 4*s_q*d*d_ff (FFN)
std::uint64_t flops_layer(std::uint64_t d, std::uint64_t d_ff, std::uint64_t s_q, std::uint64_t s_kv);

// Prefill FLOPs summed over layers with the occupancy schedule of `prune`
// (every layer sees the full prompt when absent).
std::uint64_t flops_prefill(const ModelConfig& cfg, const SequenceLayout& layout,
                            const std::optional<PruneConfig>& prune = std::nullopt);

// Accepted / drafted over the whole trace. Throws InputError with no drafts.
double tok_ar(const GenerationTrace& trace);

// Ratio of tokens per second, accelerated over baseline. Throws
// MeasurementError on a zero duration.
double rel_spd(const TimingReport& base, const TimingReport& accel);
// Macro average: per-sample speeds are averaged before taking the ratio.
double rel_spd(std::span<const TimingReport> base, std::span<const TimingReport> accel);

struct ScalingPoint {
  std::size_t response_length = 0;
  TimingReport timing;  // medians over repetitions

  double decode_fraction() const { return timing.decode_seconds / timing.total_seconds(); }
};

// Forced-length greedy generation at every S; one discarded warmup run, then
// the median of `repetitions` timed runs.
std::vector<ScalingPoint> bench_decode_scaling(const Model& model, std::span<const TokenId> token_ids,
                                               const SequenceLayout& layout, std::span<const std::size_t> lengths,
                                               std::size_t repetitions = 3);

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r_squared = 0.0;
};

LinearFit linear_fit(std::span<const double> xs, std::span<const double> ys);

enum class BenchMode { Greedy, FastV, TwigSsd };

struct BenchConfig {
  std::string id;
  BenchMode mode = BenchMode::Greedy;
  std::optional<PruneConfig> prune;
  SsdConfig ssd;
};

struct BenchRow {
  std::string config_id;
  std::size_t response_length = 0;
  double prefill_seconds = 0.0;
  double decode_seconds = 0.0;
  std::size_t tokens = 0;
  std::optional<double> tok_ar;
  std::size_t target_forwards = 0;
  std::uint64_t flops_prefill_pruned = 0;
  std::uint64_t flops_prefill_full = 0;
};

// Runs every config at every S (forced length). Configs fan out over up to
// `threads` workers, one session each; row order is configs x lengths.
std::vector<BenchRow> bench_sweep(const TwigModel& tm, std::span<const TokenId> token_ids,
                                  const SequenceLayout& layout, std::span<const BenchConfig> configs,
                                  std::span<const std::size_t> lengths, std::size_t repetitions,
                                  std::size_t threads);

std::string bench_csv_header();
std::string to_csv(const BenchRow& row);

}  // namespace twig
