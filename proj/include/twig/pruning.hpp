#pragma once

// Visual-token pruning: attention aggregation, Top-R selection, sequence
// pruning, and the retained-token arithmetic for single-layer pruning with an
// optional FinalWipe (all visual tokens dropped above layer K_f).
//
// Layer numbers in PruneConfig are 1-based depths: K = 2 means pruning is
// applied to the output of the second layer, so layers 3.. see the pruned
// sequence.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "twig/model.hpp"

namespace twig {

struct PruneConfig {
  std::size_t prune_layer = 0;                 // K
  std::size_t retained = 0;                    // R
  std::optional<std::size_t> final_wipe_layer;  // K_f
  std::size_t selection_depth = 0;             // D, whose attention guides selection

  // Throws ConfigError.
  void validate(const SequenceLayout& layout, std::size_t num_layers) const;
};

struct LayerOccupancy {
  std::size_t visual = 0;
  std::size_t text = 0;
  bool operator==(const LayerOccupancy&) const = default;
};

// Mean over heads of the attention mass that text queries put on each
// visual key. Result has length num_visual.
std::vector<double> aggregate_attention(const AttentionMap& attention, const SequenceLayout& layout);

// Indices of the R largest scores, ties toward the lower index, ascending.
std::vector<std::size_t> top_r_select(std::span<const double> scores, std::size_t retained);

struct PrunedLatents {
  Latents latents;
  std::vector<std::size_t> kept_visual;
};

// Keeps the visual rows listed in `kept_visual` (indices into 0..M-1) and every
// non-visual row, preserving order and absolute positions.
Latents prune_rows(const Latents& x, std::span<const std::size_t> kept_visual, std::size_t num_visual);

PrunedLatents prune_sequence(const Latents& x, const AttentionMap& attention, const SequenceLayout& layout,
                             std::size_t retained);

// round-half-up((M*K + R*(L-K)) / L)
std::uint64_t avg_retained(std::uint64_t m, std::uint64_t k, std::uint64_t r, std::uint64_t l);
// round-half-up((M*K + R*(K_f-K)) / L)
std::uint64_t avg_retained_finalwipe(std::uint64_t m, std::uint64_t k, std::uint64_t r, std::uint64_t kf,
                                     std::uint64_t l);
// Inverse of avg_retained_finalwipe; throws DomainError when infeasible.
std::uint64_t solve_r(std::uint64_t target_rbar, std::uint64_t m, std::uint64_t k, std::uint64_t kf, std::uint64_t l);

// (visual, text) tokens processed by each of the L layers.
std::vector<LayerOccupancy> layer_occupancy(const SequenceLayout& layout, const PruneConfig& plan,
                                            std::size_t num_layers);

}  // namespace twig
