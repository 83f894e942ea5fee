#include "twig/kv_cache.hpp"

#include <algorithm>

#include "twig/error.hpp"

namespace twig {

void LayerCache::append(const Matrix& keys, const Matrix& values, std::span<const std::size_t> positions) {
  if (keys.rows() != positions.size() || values.rows() != positions.size() || keys.cols() != width() ||
      values.cols() != width()) {
    throw InternalError("LayerCache::append: shape mismatch");
  }
  for (std::size_t i = 0; i < positions.size(); ++i) {
    const bool ordered = i == 0 ? (positions_.empty() || positions_.back() < positions[0]) : positions[i - 1] < positions[i];
    if (!ordered) throw InternalError("LayerCache::append: positions must be strictly increasing");
  }
  for (std::size_t i = 0; i < positions.size(); ++i) {
    keys_.append_row(keys.row(i));
    values_.append_row(values.row(i));
  }
  positions_.insert(positions_.end(), positions.begin(), positions.end());
}

void LayerCache::truncate(std::size_t n) {
  auto keep = static_cast<std::size_t>(std::lower_bound(positions_.begin(), positions_.end(), n) - positions_.begin());
  positions_.resize(keep);
  keys_.resize_rows(keep);
  values_.resize_rows(keep);
}

void KvCache::truncate(std::size_t n) {
  for (auto& layer : layers_) layer.truncate(n);
  next_position_ = std::min(next_position_, n);
}

}  // namespace twig
