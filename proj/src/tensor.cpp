#include "twig/tensor.hpp"

#include <bit>
#include <cassert>

#include "twig/error.hpp"

namespace twig {

void Matrix::append_row(std::span<const double> values) {
  if (rows_ == 0 && cols_ == 0) cols_ = values.size();
  if (values.size() != cols_) throw InternalError("append_row: width mismatch");
  data_.insert(data_.end(), values.begin(), values.end());
  ++rows_;
}

void Matrix::resize_rows(std::size_t n) {
  if (n > rows_) throw InternalError("resize_rows: cannot grow");
  rows_ = n;
  data_.resize(rows_ * cols_);
}

Matrix Matrix::select_rows(std::span<const std::size_t> indices) const {
  Matrix out(indices.size(), cols_);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows_) throw InternalError("select_rows: index out of range");
    auto src = row(indices[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

void gemm(ConstMatrixView a, ConstMatrixView b, MatrixView out, FlopCounter* counter) {
  if (a.cols != b.rows || out.rows != a.rows || out.cols != b.cols) throw InternalError("gemm: shape mismatch");
  const std::size_t inner = a.cols;
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t j = 0; j < b.cols; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < inner; ++p) acc += a(i, p) * b(p, j);
      out(i, j) = acc;
    }
  }
  if (counter) counter->add(2ULL * a.rows * b.cols * inner);
}

Matrix matmul(ConstMatrixView a, ConstMatrixView b, FlopCounter* counter) {
  Matrix out(a.rows, b.cols);
  gemm(a, b, out.view(), counter);
  return out;
}

void gemm_accumulate(ConstMatrixView a, ConstMatrixView b, MatrixView out) {
  if (a.cols != b.rows || out.rows != a.rows || out.cols != b.cols) {
    throw InternalError("gemm_accumulate: shape mismatch");
  }
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t p = 0; p < a.cols; ++p) {
      const double aip = a(i, p);
      if (aip == 0.0) continue;
      for (std::size_t j = 0; j < b.cols; ++j) out(i, j) += aip * b(p, j);
    }
  }
}

std::uint64_t fnv1a(std::span<const double> values, std::uint64_t state) {
  for (double v : values) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    for (int byte = 0; byte < 8; ++byte) {
      state ^= (bits >> (8 * byte)) & 0xffU;
      state *= 0x100000001b3ULL;
    }
  }
  return state;
}

}  // namespace twig
