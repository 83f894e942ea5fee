#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace twig {

// Counts floating-point operations issued through gemm(). One multiply-add
// counts as two FLOPs.
struct FlopCounter {
  std::uint64_t flops = 0;
  void add(std::uint64_t n) { flops += n; }
};

// Read-only strided 2-D view. Transposes and column slices are expressed
// through the strides, never by copying.
struct ConstMatrixView {
  const double* data = nullptr;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t row_stride = 0;
  std::size_t col_stride = 1;

  double operator()(std::size_t r, std::size_t c) const { return data[r * row_stride + c * col_stride]; }
  ConstMatrixView transposed() const { return {data, cols, rows, col_stride, row_stride}; }
  ConstMatrixView columns(std::size_t first, std::size_t count) const {
    return {data + first * col_stride, rows, count, row_stride, col_stride};
  }
};

struct MatrixView {
  double* data = nullptr;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t row_stride = 0;
  std::size_t col_stride = 1;

  double& operator()(std::size_t r, std::size_t c) const { return data[r * row_stride + c * col_stride]; }
  MatrixView transposed() const { return {data, cols, rows, col_stride, row_stride}; }
  MatrixView columns(std::size_t first, std::size_t count) const {
    return {data + first * col_stride, rows, count, row_stride, col_stride};
  }
  operator ConstMatrixView() const { return {data, rows, cols, row_stride, col_stride}; }
};

// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> flat() { return data_; }
  std::span<const double> flat() const { return data_; }

  ConstMatrixView view() const { return {data_.data(), rows_, cols_, cols_, 1}; }
  MatrixView view() { return {data_.data(), rows_, cols_, cols_, 1}; }

  void append_row(std::span<const double> values);
  // Keeps rows [0, n).
  void resize_rows(std::size_t n);
  Matrix select_rows(std::span<const std::size_t> indices) const;

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// out = a * b. Every element is accumulated in ascending inner-index order, so
// a row of the result depends only on the matching row of `a`: the same row
// computed alone or inside a batch is bit-identical.
void gemm(ConstMatrixView a, ConstMatrixView b, MatrixView out, FlopCounter* counter = nullptr);
Matrix matmul(ConstMatrixView a, ConstMatrixView b, FlopCounter* counter = nullptr);

// out += a * b, uncounted. Used by the training backward pass.
void gemm_accumulate(ConstMatrixView a, ConstMatrixView b, MatrixView out);

// FNV-1a over the IEEE bit patterns; stable checksum for weights and logits.
std::uint64_t fnv1a(std::span<const double> values, std::uint64_t state = 0xcbf29ce484222325ULL);

}  // namespace twig
