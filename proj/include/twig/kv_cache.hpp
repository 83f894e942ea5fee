#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "twig/tensor.hpp"

namespace twig {

// Keys and values of one layer, tagged with absolute positions.
class LayerCache {
 public:
  LayerCache() = default;
  explicit LayerCache(std::size_t width) : keys_(0, width), values_(0, width) {}

  std::size_t length() const { return positions_.size(); }
  bool empty() const { return positions_.empty(); }
  std::size_t width() const { return keys_.cols(); }

  const Matrix& keys() const { return keys_; }
  const Matrix& values() const { return values_; }
  std::span<const std::size_t> positions() const { return positions_; }

  // Positions must continue strictly increasing.
  void append(const Matrix& keys, const Matrix& values, std::span<const std::size_t> positions);

  // Drops every entry whose position is >= n.
  void truncate(std::size_t n);

 private:
  Matrix keys_;
  Matrix values_;
  std::vector<std::size_t> positions_;
};

// One LayerCache per layer of some contiguous layer range, plus the position
// the next fed token will occupy.
class KvCache {
 public:
  KvCache() = default;
  KvCache(std::size_t num_layers, std::size_t width) : layers_(num_layers, LayerCache(width)) {}

  std::size_t num_layers() const { return layers_.size(); }
  LayerCache& layer(std::size_t i) { return layers_.at(i); }
  const LayerCache& layer(std::size_t i) const { return layers_.at(i); }
  std::span<LayerCache> layers() { return layers_; }

  std::size_t next_position() const { return next_position_; }
  void set_next_position(std::size_t p) { next_position_ = p; }

  // Removes all entries with position >= n in every layer, exactly.
  void truncate(std::size_t n);

 private:
  std::vector<LayerCache> layers_;
  std::size_t next_position_ = 0;
};

}  // namespace twig
