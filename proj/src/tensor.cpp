// SPDX-License-Identifier: Apache-2.0
#include "pvflow/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace pvflow {

Tensor::Tensor(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    fail(ErrorCode::ShapeError, "tensor data length " + std::to_string(data_.size()) + " != " +
                                    std::to_string(rows) + "x" + std::to_string(cols));
  }
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

std::string Tensor::shape_string() const { return std::to_string(rows_) + "x" + std::to_string(cols_); }

Tensor Tensor::transposed() const {
  Tensor t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  return t;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b)) {
    fail(ErrorCode::ShapeError, std::string(what) + ": " + a.shape_string() + " vs " + b.shape_string());
  }
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace pvflow
