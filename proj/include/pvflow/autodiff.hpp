// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <vector>

#include "pvflow/tensor.hpp"

namespace pvflow::ad {

class Tape;

/// One value in the computation graph. Nodes created without a tape drop their
/// parents and closures as soon as the value is computed, so inference does not
/// keep the whole graph alive.
struct Node {
  Tensor value;
  Tensor grad;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> forward;
  std::function<void(Node&)> backward;
  Tape* tape = nullptr;
  bool requires_grad = false;
  const char* op = "leaf";

  Tensor& grad_buffer();
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  bool defined() const noexcept { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  /// Empty tensor when no gradient reached this node.
  const Tensor& grad() const { return node_->grad; }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }
  Tape* tape() const { return node_ ? node_->tape : nullptr; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Untracked value.
Var constant(Tensor value);

/// Records every op whose inputs live on it, in creation order, and runs
/// reverse-mode accumulation over that order. Single writer.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);

  /// d(loss)/d(node) for every recorded node that requires grad. Gradients
  /// accumulate across calls until zero_grad(). Throws UnrecordedNode if loss
  /// was not produced on this tape or is not 1x1.
  void backward(const Var& loss);
  void zero_grad();

  /// Recomputes every recorded op from the current leaf values. Returns true
  /// when every recomputed value is bit-identical to the stored one.
  bool replay();

  std::size_t size() const noexcept { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  void record(std::shared_ptr<Node> node) { nodes_.push_back(std::move(node)); }

 private:
  std::vector<std::shared_ptr<Node>> nodes_;
};

/// Precision of the forward dense products when no tape is recording.
enum class Precision { F64, F32 };
void set_forward_precision(Precision p);
Precision forward_precision();

/// Generic op constructor used by every op below.
Var make_op(const char* name, const std::vector<Var>& inputs, std::function<void(Node&)> forward,
            std::function<void(Node&)> backward);

// Compressed sparse rows: output row r = sum_k weight[k] * x[index[k]] for k in [offsets[r], offsets[r+1]).
struct SparseRows {
  std::size_t input_rows = 0;
  std::vector<std::size_t> offsets{0};
  std::vector<std::size_t> index;
  std::vector<double> weight;

  std::size_t output_rows() const { return offsets.size() - 1; }
  void push(std::size_t i, double w) {
    index.push_back(i);
    weight.push_back(w);
  }
  void end_row() { offsets.push_back(index.size()); }
};

// ---- elementwise ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var exp(const Var& a);
Var leaky_relu(const Var& x, double slope);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }

// ---- broadcasting ----
Var add_row(const Var& a, const Var& row);  // row is 1 x cols
Var add_col(const Var& a, const Var& col);  // col is rows x 1

// ---- dense products ----
/// y = x w^T + b. b may be an undefined Var.
Var linear(const Var& x, const Var& w, const Var& b = {});
/// a b^T
inline Var matmul_nt(const Var& a, const Var& b) { return linear(a, b); }
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);

// ---- normalization / activations ----
Var instance_norm(const Var& x, double eps = 1e-5);
Var softmax_rows(const Var& x);
Var logsumexp_rows(const Var& x);  // rows x 1
Var logsumexp_cols(const Var& x);  // 1 x cols
Var normalize_rows_l2(const Var& x);
/// Rows divided by their sum. Rows whose sum is not positive become uniform
/// (constant, no gradient); their indices are appended to zero_rows if given.
Var normalize_rows_l1(const Var& x, std::vector<std::size_t>* zero_rows = nullptr);

// ---- reductions ----
Var sum(const Var& x);
Var mean(const Var& x);

// ---- structural ----
Var sparse_rows(const Var& x, std::shared_ptr<const SparseRows> map);
/// Rows come in consecutive groups of `group`; elementwise max per group.
/// Ties go to the lowest row in the group.
Var group_max(const Var& x, std::size_t group);
Var concat_cols(const std::vector<Var>& parts);
Var slice_cols(const Var& x, std::size_t begin, std::size_t count);

// ---- domain ops ----
/// Multi-head softmax attention restricted to each index set in `windows`.
/// q, k, v are M x D over all items; output row of an item depends only on
/// items in its own window. Items outside every window get zero rows.
Var window_attention(const Var& q, const Var& k, const Var& v,
                     std::shared_ptr<const std::vector<std::vector<std::size_t>>> windows, std::size_t heads);
/// min_j |x_i - targets_j|^2 as rows x 1; targets are constant.
Var nearest_sq_dist(const Var& x, std::shared_ptr<const Tensor> targets);

}  // namespace pvflow::ad
