// SPDX-License-Identifier: Apache-2.0
#include "pvflow/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <string>

#include "pvflow/parallel.hpp"
#include "pvflow/simd/kernels.hpp"

namespace pvflow::ad {

Tensor& Node::grad_buffer() {
  if (grad.empty() && !value.empty()) grad = Tensor::zeros_like(value);
  return grad;
}

Var constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = "constant";
  return Var(std::move(node));
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->tape = this;
  node->requires_grad = requires_grad;
  node->op = "leaf";
  nodes_.push_back(node);
  return Var(std::move(node));
}

void Tape::backward(const Var& loss) {
  if (!loss.defined() || loss.tape() != this) fail(ErrorCode::UnrecordedNode, "loss was not recorded on this tape");
  if (loss.rows() != 1 || loss.cols() != 1) {
    fail(ErrorCode::UnrecordedNode, "loss must be a 1x1 scalar, got " + loss.value().shape_string());
  }
  if (!loss.requires_grad()) return;
  // Intermediate gradients belong to one sweep; only leaves accumulate.
  for (auto& n : nodes_)
    if (n->backward) n->grad = Tensor();
  loss.node()->grad_buffer()[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& n = **it;
    if (n.backward && n.requires_grad && !n.grad.empty()) n.backward(n);
  }
}

void Tape::zero_grad() {
  for (auto& n : nodes_) n->grad = Tensor();
}

bool Tape::replay() {
  bool identical = true;
  for (auto& n : nodes_) {
    if (!n->forward) continue;
    Tensor previous = std::move(n->value);
    n->forward(*n);
    if (!(previous == n->value)) identical = false;
  }
  return identical;
}

namespace {
std::atomic<Precision> g_precision{Precision::F64};
}

void set_forward_precision(Precision p) { g_precision.store(p); }
Precision forward_precision() { return g_precision.load(); }

Var make_op(const char* name, const std::vector<Var>& inputs, std::function<void(Node&)> forward,
            std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->op = name;
  Tape* tape = nullptr;
  for (const Var& in : inputs) {
    if (in.defined()) {
      if (in.tape() != nullptr) {
        if (tape != nullptr && tape != in.tape()) {
          fail(ErrorCode::UnrecordedNode, std::string(name) + ": inputs recorded on different tapes");
        }
        tape = in.tape();
      }
      node->requires_grad = node->requires_grad || in.requires_grad();
    }
    node->parents.push_back(in.node());
  }
  forward(*node);
  if (!node->value.all_finite()) fail(ErrorCode::NonFinite, std::string(name) + " produced a non-finite value");
  if (tape != nullptr) {
    node->tape = tape;
    node->forward = std::move(forward);
    node->backward = std::move(backward);
    tape->record(node);
  } else {
    node->parents.clear();
  }
  return Var(std::move(node));
}

namespace {

const Tensor& in(Node& n, std::size_t i) { return n.parents[i]->value; }

// Returns nullptr when input i needs no gradient.
Tensor* gin(Node& n, std::size_t i) {
  Node* p = n.parents[i].get();
  return (p != nullptr && p->requires_grad) ? &p->grad_buffer() : nullptr;
}

void require_shape(const Tensor& a, const Tensor& b, const char* op) { require_same_shape(a, b, op); }

// Below this many multiply-adds the product runs on the calling thread.
constexpr std::size_t kParallelWork = 1u << 18;

std::size_t min_parallel_for(std::size_t rows, std::size_t work) {
  return work < kParallelWork ? rows + 1 : 2;
}

void gemm_nt_rows(const Tensor& x, const Tensor& w, Tensor& y) {
  const std::size_t rows = x.rows(), cin = x.cols(), cout = w.rows();
  const auto& k = simd::kernels();
  parallel_for(
      rows,
      [&](std::size_t b, std::size_t e) {
        k.gemm_nt(x.data() + b * cin, w.data(), y.data() + b * cout, e - b, cin, cout);
      },
      min_parallel_for(rows, rows * cin * cout));
}

void gemm_nt_rows_f32(const Tensor& x, const Tensor& w, Tensor& y) {
  const std::size_t rows = x.rows(), cin = x.cols(), cout = w.rows();
  std::vector<float> xf(x.storage().begin(), x.storage().end());
  std::vector<float> wf(w.storage().begin(), w.storage().end());
  std::vector<float> yf(rows * cout);
  const auto& k = simd::kernels();
  parallel_for(
      rows,
      [&](std::size_t b, std::size_t e) {
        k.gemm_nt_f32(xf.data() + b * cin, wf.data(), yf.data() + b * cout, e - b, cin, cout);
      },
      min_parallel_for(rows, rows * cin * cout));
  std::copy(yf.begin(), yf.end(), y.data());
}

}  // namespace

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
  require_shape(a.value(), b.value(), "add");
  return make_op(
      "add", {a, b},
      [](Node& n) {
        const Tensor &x = in(n, 0), &y = in(n, 1);
        n.value = x;
        for (std::size_t i = 0; i < x.size(); ++i) n.value[i] += y[i];
      },
      [](Node& n) {
        for (std::size_t p = 0; p < 2; ++p)
          if (Tensor* g = gin(n, p))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i];
      });
}

Var sub(const Var& a, const Var& b) {
  require_shape(a.value(), b.value(), "sub");
  return make_op(
      "sub", {a, b},
      [](Node& n) {
        const Tensor &x = in(n, 0), &y = in(n, 1);
        n.value = x;
        for (std::size_t i = 0; i < x.size(); ++i) n.value[i] -= y[i];
      },
      [](Node& n) {
        if (Tensor* g = gin(n, 0))
          for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i];
        if (Tensor* g = gin(n, 1))
          for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= n.grad[i];
      });
}

Var mul(const Var& a, const Var& b) {
  require_shape(a.value(), b.value(), "mul");
  return make_op(
      "mul", {a, b},
      [](Node& n) {
        const Tensor &x = in(n, 0), &y = in(n, 1);
        n.value = x;
        for (std::size_t i = 0; i < x.size(); ++i) n.value[i] *= y[i];
      },
      [](Node& n) {
        const Tensor &x = in(n, 0), &y = in(n, 1);
        if (Tensor* g = gin(n, 0))
          for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i] * y[i];
        if (Tensor* g = gin(n, 1))
          for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i] * x[i];
      });
}

Var scale(const Var& a, double s) {
  return make_op(
      "scale", {a},
      [s](Node& n) {
        n.value = in(n, 0);
        for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] *= s;
      },
      [s](Node& n) {
        if (Tensor* g = gin(n, 0))
          for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += s * n.grad[i];
      });
}

Var add_scalar(const Var& a, double s) {
  return make_op(
      "add_scalar", {a},
      [s](Node& n) {
        n.value = in(n, 0);
        for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] += s;
      },
      [](Node& n) {
        if (Tensor* g = gin(n, 0))
          for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i];
      });
}

Var exp(const Var& a) {
  return make_op(
      "exp", {a},
      [](Node& n) {
        n.value = in(n, 0);
        for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = std::exp(n.value[i]);
      },
      [](Node& n) {
        if (Tensor* g = gin(n, 0))
          for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i] * n.value[i];
      });
}

Var leaky_relu(const Var& x, double slope) {
  return make_op(
      "leaky_relu", {x},
      [slope](Node& n) {
        n.value = in(n, 0);
        for (std::size_t i = 0; i < n.value.size(); ++i)
          if (n.value[i] < 0.0) n.value[i] *= slope;
      },
      [slope](Node& n) {
        const Tensor& x0 = in(n, 0);
        if (Tensor* g = gin(n, 0))
          for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += x0[i] >= 0.0 ? n.grad[i] : slope * n.grad[i];
      });
}

// ---------------------------------------------------------------- broadcasting

Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    fail(ErrorCode::ShapeError, "add_row: " + a.value().shape_string() + " + " + row.value().shape_string());
  }
  return make_op(
      "add_row", {a, row},
      [](Node& n) {
        const Tensor &x = in(n, 0), &r = in(n, 1);
        n.value = x;
        for (std::size_t i = 0; i < x.rows(); ++i)
          for (std::size_t j = 0; j < x.cols(); ++j) n.value(i, j) += r[j];
      },
      [](Node& n) {
        if (Tensor* g = gin(n, 0))
          for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i];
        if (Tensor* g = gin(n, 1))
          for (std::size_t i = 0; i < n.grad.rows(); ++i)
            for (std::size_t j = 0; j < n.grad.cols(); ++j) (*g)[j] += n.grad(i, j);
      });
}

Var add_col(const Var& a, const Var& col) {
  if (col.cols() != 1 || col.rows() != a.rows()) {
    fail(ErrorCode::ShapeError, "add_col: " + a.value().shape_string() + " + " + col.value().shape_string());
  }
  return make_op(
      "add_col", {a, col},
      [](Node& n) {
        const Tensor &x = in(n, 0), &c = in(n, 1);
        n.value = x;
        for (std::size_t i = 0; i < x.rows(); ++i)
          for (std::size_t j = 0; j < x.cols(); ++j) n.value(i, j) += c[i];
      },
      [](Node& n) {
        if (Tensor* g = gin(n, 0))
          for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i];
        if (Tensor* g = gin(n, 1))
          for (std::size_t i = 0; i < n.grad.rows(); ++i)
            for (std::size_t j = 0; j < n.grad.cols(); ++j) (*g)[i] += n.grad(i, j);
      });
}

// ---------------------------------------------------------------- dense products

Var linear(const Var& x, const Var& w, const Var& b) {
  if (x.cols() != w.cols()) {
    fail(ErrorCode::ShapeError, "linear: input " + x.value().shape_string() + " vs weight " + w.value().shape_string());
  }
  if (b.defined() && (b.rows() != 1 || b.cols() != w.rows())) {
    fail(ErrorCode::ShapeError, "linear: bias " + b.value().shape_string() + " for " + std::to_string(w.rows()) +
                                    " outputs");
  }
  const bool fast = forward_precision() == Precision::F32 && x.tape() == nullptr && w.tape() == nullptr;
  return make_op(
      "linear", {x, w, b},
      [fast](Node& n) {
        const Tensor &xv = in(n, 0), &wv = in(n, 1);
        n.value = Tensor(xv.rows(), wv.rows());
        if (fast)
          gemm_nt_rows_f32(xv, wv, n.value);
        else
          gemm_nt_rows(xv, wv, n.value);
        if (n.parents[2]) {
          const Tensor& bv = in(n, 2);
          for (std::size_t i = 0; i < n.value.rows(); ++i)
            for (std::size_t o = 0; o < n.value.cols(); ++o) n.value(i, o) += bv[o];
        }
      },
      [](Node& n) {
        const Tensor &xv = in(n, 0), &wv = in(n, 1);
        const std::size_t rows = xv.rows(), cin = xv.cols(), cout = wv.rows();
        const auto& k = simd::kernels();
        const std::size_t minp = min_parallel_for(rows, rows * cin * cout);
        if (Tensor* gx = gin(n, 0)) {
          parallel_for(
              rows,
              [&](std::size_t bgn, std::size_t end) {
                for (std::size_t i = bgn; i < end; ++i)
                  for (std::size_t o = 0; o < cout; ++o) {
                    const double g = n.grad(i, o);
                    if (g != 0.0) k.axpy(g, wv.data() + o * cin, gx->data() + i * cin, cin);
                  }
              },
              minp);
        }
        if (Tensor* gw = gin(n, 1)) {
          parallel_for(
              cout,
              [&](std::size_t bgn, std::size_t end) {
                for (std::size_t o = bgn; o < end; ++o)
                  for (std::size_t i = 0; i < rows; ++i) {
                    const double g = n.grad(i, o);
                    if (g != 0.0) k.axpy(g, xv.data() + i * cin, gw->data() + o * cin, cin);
                  }
              },
              minp);
        }
        if (n.parents[2]) {
          if (Tensor* gb = gin(n, 2))
            for (std::size_t i = 0; i < rows; ++i)
              for (std::size_t o = 0; o < cout; ++o) (*gb)[o] += n.grad(i, o);
        }
      });
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) {
    fail(ErrorCode::ShapeError, "matmul: " + a.value().shape_string() + " * " + b.value().shape_string());
  }
  return make_op(
      "matmul", {a, b},
      [](Node& n) {
        const Tensor &av = in(n, 0), &bv = in(n, 1);
        const std::size_t rows = av.rows(), inner = av.cols(), cols = bv.cols();
        n.value = Tensor(rows, cols);
        const auto& k = simd::kernels();
        parallel_for(
            rows,
            [&](std::size_t bgn, std::size_t end) {
              for (std::size_t i = bgn; i < end; ++i)
                for (std::size_t j = 0; j < inner; ++j) {
                  const double s = av(i, j);
                  if (s != 0.0) k.axpy(s, bv.data() + j * cols, n.value.data() + i * cols, cols);
                }
            },
            min_parallel_for(rows, rows * inner * cols));
      },
      [](Node& n) {
        const Tensor &av = in(n, 0), &bv = in(n, 1);
        const std::size_t rows = av.rows(), inner = av.cols(), cols = bv.cols();
        const auto& k = simd::kernels();
        if (Tensor* ga = gin(n, 0))
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < inner; ++j)
              (*ga)(i, j) += k.dot(n.grad.data() + i * cols, bv.data() + j * cols, cols);
        if (Tensor* gb = gin(n, 1))
          for (std::size_t j = 0; j < inner; ++j)
            for (std::size_t i = 0; i < rows; ++i) {
              const double s = av(i, j);
              if (s != 0.0) k.axpy(s, n.grad.data() + i * cols, gb->data() + j * cols, cols);
            }
      });
}

Var transpose(const Var& a) {
  return make_op(
      "transpose", {a}, [](Node& n) { n.value = in(n, 0).transposed(); },
      [](Node& n) {
        if (Tensor* g = gin(n, 0))
          for (std::size_t i = 0; i < n.grad.rows(); ++i)
            for (std::size_t j = 0; j < n.grad.cols(); ++j) (*g)(j, i) += n.grad(i, j);
      });
}

// ---------------------------------------------------------------- normalization

Var instance_norm(const Var& x, double eps) {
  if (x.rows() == 0) fail(ErrorCode::ShapeError, "instance_norm on an empty tensor");
  // per-channel 1/sigma, kept for the backward pass
  auto inv_sigma = std::make_shared<std::vector<double>>();
  return make_op(
      "instance_norm", {x},
      [eps, inv_sigma](Node& n) {
        const Tensor& xv = in(n, 0);
        const std::size_t rows = xv.rows(), cols = xv.cols();
        n.value = Tensor(rows, cols);
        inv_sigma->assign(cols, 0.0);
        for (std::size_t c = 0; c < cols; ++c) {
          double m = 0.0;
          for (std::size_t i = 0; i < rows; ++i) m += xv(i, c);
          m /= static_cast<double>(rows);
          double var = 0.0;
          for (std::size_t i = 0; i < rows; ++i) {
            const double d = xv(i, c) - m;
            var += d * d;
          }
          var /= static_cast<double>(rows);
          const double is = 1.0 / std::sqrt(var + eps);
          (*inv_sigma)[c] = is;
          for (std::size_t i = 0; i < rows; ++i) n.value(i, c) = (xv(i, c) - m) * is;
        }
      },
      [inv_sigma](Node& n) {
        Tensor* gx = gin(n, 0);
        if (gx == nullptr) return;
        const std::size_t rows = n.value.rows(), cols = n.value.cols();
        const double inv_n = 1.0 / static_cast<double>(rows);
        for (std::size_t c = 0; c < cols; ++c) {
          double mg = 0.0, mgy = 0.0;
          for (std::size_t i = 0; i < rows; ++i) {
            mg += n.grad(i, c);
            mgy += n.grad(i, c) * n.value(i, c);
          }
          mg *= inv_n;
          mgy *= inv_n;
          const double is = (*inv_sigma)[c];
          for (std::size_t i = 0; i < rows; ++i) (*gx)(i, c) += is * (n.grad(i, c) - mg - n.value(i, c) * mgy);
        }
      });
}

Var softmax_rows(const Var& x) {
  return make_op(
      "softmax_rows", {x},
      [](Node& n) {
        const Tensor& xv = in(n, 0);
        n.value = Tensor(xv.rows(), xv.cols());
        for (std::size_t i = 0; i < xv.rows(); ++i) {
          const auto r = xv.row(i);
          const double m = *std::max_element(r.begin(), r.end());
          double s = 0.0;
          for (std::size_t j = 0; j < r.size(); ++j) {
            n.value(i, j) = std::exp(r[j] - m);
            s += n.value(i, j);
          }
          for (std::size_t j = 0; j < r.size(); ++j) n.value(i, j) /= s;
        }
      },
      [](Node& n) {
        Tensor* gx = gin(n, 0);
        if (gx == nullptr) return;
        for (std::size_t i = 0; i < n.value.rows(); ++i) {
          double dotgy = 0.0;
          for (std::size_t j = 0; j < n.value.cols(); ++j) dotgy += n.grad(i, j) * n.value(i, j);
          for (std::size_t j = 0; j < n.value.cols(); ++j) (*gx)(i, j) += n.value(i, j) * (n.grad(i, j) - dotgy);
        }
      });
}

Var logsumexp_rows(const Var& x) {
  return make_op(
      "logsumexp_rows", {x},
      [](Node& n) {
        const Tensor& xv = in(n, 0);
        const std::size_t cols = xv.cols();
        n.value = Tensor(xv.rows(), 1);
        const auto& k = simd::kernels();
        std::vector<double> e(cols);
        for (std::size_t i = 0; i < xv.rows(); ++i) {
          const auto r = xv.row(i);
          const double m = *std::max_element(r.begin(), r.end());
          k.exp_sub(r.data(), m, e.data(), cols);
          double s = 0.0;
          for (double v : e) s += v;
          n.value[i] = m + std::log(s);
        }
      },
      [](Node& n) {
        Tensor* gx = gin(n, 0);
        if (gx == nullptr) return;
        const Tensor& xv = in(n, 0);
        const std::size_t cols = xv.cols();
        const auto& k = simd::kernels();
        std::vector<double> e(cols);
        for (std::size_t i = 0; i < xv.rows(); ++i) {
          const double g = n.grad[i];
          if (g == 0.0) continue;
          k.exp_sub(xv.data() + i * cols, n.value[i], e.data(), cols);
          k.axpy(g, e.data(), gx->data() + i * cols, cols);
        }
      });
}

Var logsumexp_cols(const Var& x) {
  return make_op(
      "logsumexp_cols", {x},
      [](Node& n) {
        const Tensor& xv = in(n, 0);
        const std::size_t rows = xv.rows(), cols = xv.cols();
        std::vector<double> m(cols, -std::numeric_limits<double>::infinity());
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < cols; ++j) m[j] = std::max(m[j], xv(i, j));
        const auto& k = simd::kernels();
        std::vector<double> s(cols, 0.0), e(cols);
        for (std::size_t i = 0; i < rows; ++i) {
          k.exp_sub_each(xv.data() + i * cols, m.data(), e.data(), cols);
          for (std::size_t j = 0; j < cols; ++j) s[j] += e[j];
        }
        n.value = Tensor(1, cols);
        for (std::size_t j = 0; j < cols; ++j) n.value[j] = m[j] + std::log(s[j]);
      },
      [](Node& n) {
        Tensor* gx = gin(n, 0);
        if (gx == nullptr) return;
        const Tensor& xv = in(n, 0);
        const std::size_t cols = xv.cols();
        const auto& k = simd::kernels();
        std::vector<double> e(cols);
        for (std::size_t i = 0; i < xv.rows(); ++i) {
          k.exp_sub_each(xv.data() + i * cols, n.value.data(), e.data(), cols);
          double* gi = gx->data() + i * cols;
          for (std::size_t j = 0; j < cols; ++j) gi[j] += n.grad[j] * e[j];
        }
      });
}

Var normalize_rows_l2(const Var& x) {
  auto inv_norm = std::make_shared<std::vector<double>>();
  return make_op(
      "normalize_rows_l2", {x},
      [inv_norm](Node& n) {
        const Tensor& xv = in(n, 0);
        n.value = Tensor(xv.rows(), xv.cols());
        inv_norm->assign(xv.rows(), 0.0);
        const auto& k = simd::kernels();
        for (std::size_t i = 0; i < xv.rows(); ++i) {
          const double n2 = k.dot(xv.data() + i * xv.cols(), xv.data() + i * xv.cols(), xv.cols());
          if (n2 <= 1e-24) continue;  // zero row stays zero
          const double s = 1.0 / std::sqrt(n2);
          (*inv_norm)[i] = s;
          for (std::size_t j = 0; j < xv.cols(); ++j) n.value(i, j) = xv(i, j) * s;
        }
      },
      [inv_norm](Node& n) {
        Tensor* gx = gin(n, 0);
        if (gx == nullptr) return;
        for (std::size_t i = 0; i < n.value.rows(); ++i) {
          const double s = (*inv_norm)[i];
          if (s == 0.0) continue;
          double gy = 0.0;
          for (std::size_t j = 0; j < n.value.cols(); ++j) gy += n.grad(i, j) * n.value(i, j);
          for (std::size_t j = 0; j < n.value.cols(); ++j) (*gx)(i, j) += s * (n.grad(i, j) - n.value(i, j) * gy);
        }
      });
}

Var normalize_rows_l1(const Var& x, std::vector<std::size_t>* zero_rows) {
  auto inv_sum = std::make_shared<std::vector<double>>();
  Var out = make_op(
      "normalize_rows_l1", {x},
      [inv_sum](Node& n) {
        const Tensor& xv = in(n, 0);
        n.value = Tensor(xv.rows(), xv.cols());
        inv_sum->assign(xv.rows(), 0.0);
        for (std::size_t i = 0; i < xv.rows(); ++i) {
          double s = 0.0;
          for (double v : xv.row(i)) s += v;
          if (!(s > 0.0)) {
            for (std::size_t j = 0; j < xv.cols(); ++j) n.value(i, j) = 1.0 / static_cast<double>(xv.cols());
            continue;
          }
          (*inv_sum)[i] = 1.0 / s;
          for (std::size_t j = 0; j < xv.cols(); ++j) n.value(i, j) = xv(i, j) / s;
        }
      },
      [inv_sum](Node& n) {
        Tensor* gx = gin(n, 0);
        if (gx == nullptr) return;
        for (std::size_t i = 0; i < n.value.rows(); ++i) {
          const double s = (*inv_sum)[i];
          if (s == 0.0) continue;
          double gy = 0.0;
          for (std::size_t j = 0; j < n.value.cols(); ++j) gy += n.grad(i, j) * n.value(i, j);
          for (std::size_t j = 0; j < n.value.cols(); ++j) (*gx)(i, j) += s * (n.grad(i, j) - gy);
        }
      });
  if (zero_rows != nullptr)
    for (std::size_t i = 0; i < inv_sum->size(); ++i)
      if ((*inv_sum)[i] == 0.0) zero_rows->push_back(i);
  return out;
}

// ---------------------------------------------------------------- reductions

Var sum(const Var& x) {
  return make_op(
      "sum", {x},
      [](Node& n) {
        double s = 0.0;
        for (double v : in(n, 0).storage()) s += v;
        n.value = Tensor(1, 1, s);
      },
      [](Node& n) {
        if (Tensor* g = gin(n, 0))
          for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[0];
      });
}

Var mean(const Var& x) {
  const double inv = 1.0 / static_cast<double>(std::max<std::size_t>(1, x.value().size()));
  return scale(sum(x), inv);
}

// ---------------------------------------------------------------- structural

Var sparse_rows(const Var& x, std::shared_ptr<const SparseRows> map) {
  if (map->input_rows != x.rows()) {
    fail(ErrorCode::ShapeError, "sparse_rows: map expects " + std::to_string(map->input_rows) + " rows, got " +
                                    std::to_string(x.rows()));
  }
  return make_op(
      "sparse_rows", {x},
      [map](Node& n) {
        const Tensor& xv = in(n, 0);
        const std::size_t cols = xv.cols();
        n.value = Tensor(map->output_rows(), cols);
        for (std::size_t r = 0; r < map->output_rows(); ++r) {
          double* out = n.value.data() + r * cols;
          for (std::size_t k = map->offsets[r]; k < map->offsets[r + 1]; ++k) {
            const double w = map->weight[k];
            const double* src = xv.data() + map->index[k] * cols;
            for (std::size_t c = 0; c < cols; ++c) out[c] += w * src[c];
          }
        }
      },
      [map](Node& n) {
        Tensor* gx = gin(n, 0);
        if (gx == nullptr) return;
        const std::size_t cols = n.value.cols();
        for (std::size_t r = 0; r < map->output_rows(); ++r) {
          const double* g = n.grad.data() + r * cols;
          for (std::size_t k = map->offsets[r]; k < map->offsets[r + 1]; ++k) {
            const double w = map->weight[k];
            double* dst = gx->data() + map->index[k] * cols;
            for (std::size_t c = 0; c < cols; ++c) dst[c] += w * g[c];
          }
        }
      });
}

Var group_max(const Var& x, std::size_t group) {
  if (group == 0 || x.rows() % group != 0) {
    fail(ErrorCode::ShapeError, "group_max: " + std::to_string(x.rows()) + " rows not divisible by group " +
                                    std::to_string(group));
  }
  auto argmax = std::make_shared<std::vector<std::size_t>>();
  return make_op(
      "group_max", {x},
      [group, argmax](Node& n) {
        const Tensor& xv = in(n, 0);
        const std::size_t out_rows = xv.rows() / group, cols = xv.cols();
        n.value = Tensor(out_rows, cols);
        argmax->assign(out_rows * cols, 0);
        for (std::size_t i = 0; i < out_rows; ++i) {
          for (std::size_t c = 0; c < cols; ++c) {
            std::size_t best = i * group;
            double bv = xv(best, c);
            for (std::size_t k = 1; k < group; ++k) {
              const double v = xv(i * group + k, c);
              if (v > bv) {
                bv = v;
                best = i * group + k;
              }
            }
            n.value(i, c) = bv;
            (*argmax)[i * cols + c] = best;
          }
        }
      },
      [argmax](Node& n) {
        Tensor* gx = gin(n, 0);
        if (gx == nullptr) return;
        const std::size_t cols = n.value.cols();
        for (std::size_t i = 0; i < n.value.rows(); ++i)
          for (std::size_t c = 0; c < cols; ++c) (*gx)((*argmax)[i * cols + c], c) += n.grad(i, c);
      });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) fail(ErrorCode::ShapeError, "concat_cols of nothing");
  for (const Var& p : parts)
    if (p.rows() != parts.front().rows()) {
      fail(ErrorCode::ShapeError, "concat_cols: row mismatch " + p.value().shape_string() + " vs " +
                                      parts.front().value().shape_string());
    }
  return make_op(
      "concat_cols", parts,
      [](Node& n) {
        const std::size_t rows = in(n, 0).rows();
        std::size_t total = 0;
        for (std::size_t p = 0; p < n.parents.size(); ++p) total += in(n, p).cols();
        n.value = Tensor(rows, total);
        std::size_t off = 0;
        for (std::size_t p = 0; p < n.parents.size(); ++p) {
          const Tensor& part = in(n, p);
          for (std::size_t i = 0; i < rows; ++i)
            std::copy(part.row(i).begin(), part.row(i).end(), n.value.data() + i * total + off);
          off += part.cols();
        }
      },
      [](Node& n) {
        const std::size_t rows = n.value.rows(), total = n.value.cols();
        std::size_t off = 0;
        for (std::size_t p = 0; p < n.parents.size(); ++p) {
          const std::size_t cols = in(n, p).cols();
          if (Tensor* g = gin(n, p))
            for (std::size_t i = 0; i < rows; ++i)
              for (std::size_t c = 0; c < cols; ++c) (*g)(i, c) += n.grad[i * total + off + c];
          off += cols;
        }
      });
}

Var slice_cols(const Var& x, std::size_t begin, std::size_t count) {
  if (begin + count > x.cols()) {
    fail(ErrorCode::ShapeError, "slice_cols [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                                    ") of " + x.value().shape_string());
  }
  return make_op(
      "slice_cols", {x},
      [begin, count](Node& n) {
        const Tensor& xv = in(n, 0);
        n.value = Tensor(xv.rows(), count);
        for (std::size_t i = 0; i < xv.rows(); ++i)
          for (std::size_t c = 0; c < count; ++c) n.value(i, c) = xv(i, begin + c);
      },
      [begin, count](Node& n) {
        if (Tensor* g = gin(n, 0))
          for (std::size_t i = 0; i < n.value.rows(); ++i)
            for (std::size_t c = 0; c < count; ++c) (*g)(i, begin + c) += n.grad(i, c);
      });
}

// ---------------------------------------------------------------- attention

namespace {

// Attention weights of one (window, head) block: m x m, row-stochastic.
void window_scores(const Tensor& q, const Tensor& k, const std::vector<std::size_t>& idx, std::size_t off,
                   std::size_t dh, double scale, std::vector<double>& a) {
  const std::size_t m = idx.size();
  const auto& kern = simd::kernels();
  a.assign(m * m, 0.0);
  for (std::size_t r = 0; r < m; ++r) {
    const double* qr = q.data() + idx[r] * q.cols() + off;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < m; ++c) {
      const double s = scale * kern.dot(qr, k.data() + idx[c] * k.cols() + off, dh);
      a[r * m + c] = s;
      mx = std::max(mx, s);
    }
    double z = 0.0;
    for (std::size_t c = 0; c < m; ++c) {
      a[r * m + c] = std::exp(a[r * m + c] - mx);
      z += a[r * m + c];
    }
    for (std::size_t c = 0; c < m; ++c) a[r * m + c] /= z;
  }
}

}  // namespace

Var window_attention(const Var& q, const Var& k, const Var& v,
                     std::shared_ptr<const std::vector<std::vector<std::size_t>>> windows, std::size_t heads) {
  require_shape(q.value(), k.value(), "window_attention q/k");
  require_shape(q.value(), v.value(), "window_attention q/v");
  if (heads == 0 || q.cols() % heads != 0) {
    fail(ErrorCode::ShapeError, "window_attention: width " + std::to_string(q.cols()) + " not divisible by " +
                                    std::to_string(heads) + " heads");
  }
  for (const auto& w : *windows)
    for (std::size_t i : w)
      if (i >= q.rows()) fail(ErrorCode::ShapeError, "window_attention: window index out of range");
  const std::size_t dh = q.cols() / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  return make_op(
      "window_attention", {q, k, v},
      [windows, heads, dh, scale](Node& n) {
        const Tensor &qv = in(n, 0), &kv = in(n, 1), &vv = in(n, 2);
        const std::size_t cols = qv.cols();
        n.value = Tensor(qv.rows(), cols);
        parallel_for(
            windows->size(),
            [&](std::size_t bgn, std::size_t end) {
              std::vector<double> a;
              for (std::size_t w = bgn; w < end; ++w) {
                const auto& idx = (*windows)[w];
                const std::size_t m = idx.size();
                for (std::size_t h = 0; h < heads; ++h) {
                  const std::size_t off = h * dh;
                  window_scores(qv, kv, idx, off, dh, scale, a);
                  for (std::size_t r = 0; r < m; ++r) {
                    double* out = n.value.data() + idx[r] * cols + off;
                    for (std::size_t c = 0; c < m; ++c) {
                      const double wgt = a[r * m + c];
                      const double* src = vv.data() + idx[c] * cols + off;
                      for (std::size_t d = 0; d < dh; ++d) out[d] += wgt * src[d];
                    }
                  }
                }
              }
            },
            8);
      },
      [windows, heads, dh, scale](Node& n) {
        const Tensor &qv = in(n, 0), &kv = in(n, 1), &vv = in(n, 2);
        Tensor* gq = gin(n, 0);
        Tensor* gk = gin(n, 1);
        Tensor* gv = gin(n, 2);
        const std::size_t cols = qv.cols();
        const auto& kern = simd::kernels();
        parallel_for(
            windows->size(),
            [&](std::size_t bgn, std::size_t end) {
              std::vector<double> a, da;
              for (std::size_t w = bgn; w < end; ++w) {
                const auto& idx = (*windows)[w];
                const std::size_t m = idx.size();
                for (std::size_t h = 0; h < heads; ++h) {
                  const std::size_t off = h * dh;
                  window_scores(qv, kv, idx, off, dh, scale, a);
                  da.assign(m * m, 0.0);
                  for (std::size_t r = 0; r < m; ++r) {
                    const double* go = n.grad.data() + idx[r] * cols + off;
                    for (std::size_t c = 0; c < m; ++c) {
                      da[r * m + c] = kern.dot(go, vv.data() + idx[c] * cols + off, dh);
                      if (gv != nullptr) kern.axpy(a[r * m + c], go, gv->data() + idx[c] * cols + off, dh);
                    }
                  }
                  // softmax backward, scores -> dS in place of da
                  for (std::size_t r = 0; r < m; ++r) {
                    double dot = 0.0;
                    for (std::size_t c = 0; c < m; ++c) dot += a[r * m + c] * da[r * m + c];
                    for (std::size_t c = 0; c < m; ++c) da[r * m + c] = a[r * m + c] * (da[r * m + c] - dot) * scale;
                  }
                  for (std::size_t r = 0; r < m; ++r)
                    for (std::size_t c = 0; c < m; ++c) {
                      const double ds = da[r * m + c];
                      if (ds == 0.0) continue;
                      if (gq != nullptr) kern.axpy(ds, kv.data() + idx[c] * cols + off, gq->data() + idx[r] * cols + off, dh);
                      if (gk != nullptr) kern.axpy(ds, qv.data() + idx[r] * cols + off, gk->data() + idx[c] * cols + off, dh);
                    }
                }
              }
            },
            8);
      });
}

Var nearest_sq_dist(const Var& x, std::shared_ptr<const Tensor> targets) {
  if (x.cols() != 3 || targets->cols() != 3 || targets->rows() == 0) {
    fail(ErrorCode::ShapeError, "nearest_sq_dist expects N x 3 points and a non-empty M x 3 target set");
  }
  // structure-of-arrays copy of the targets for the distance kernel
  auto soa = std::make_shared<std::vector<double>>(targets->rows() * 3);
  const std::size_t m = targets->rows();
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t c = 0; c < 3; ++c) (*soa)[c * m + j] = (*targets)(j, c);
  auto nearest = std::make_shared<std::vector<std::size_t>>();
  return make_op(
      "nearest_sq_dist", {x},
      [soa, m, nearest](Node& n) {
        const Tensor& xv = in(n, 0);
        n.value = Tensor(xv.rows(), 1);
        nearest->assign(xv.rows(), 0);
        const auto& k = simd::kernels();
        std::vector<double> d(m);
        for (std::size_t i = 0; i < xv.rows(); ++i) {
          k.sq_dist3(xv(i, 0), xv(i, 1), xv(i, 2), soa->data(), soa->data() + m, soa->data() + 2 * m, d.data(), m);
          const auto it = std::min_element(d.begin(), d.end());
          n.value[i] = *it;
          (*nearest)[i] = static_cast<std::size_t>(it - d.begin());
        }
      },
      [targets, nearest](Node& n) {
        Tensor* gx = gin(n, 0);
        if (gx == nullptr) return;
        const Tensor& xv = in(n, 0);
        for (std::size_t i = 0; i < xv.rows(); ++i) {
          const std::size_t j = (*nearest)[i];
          for (std::size_t c = 0; c < 3; ++c) (*gx)(i, c) += 2.0 * (xv(i, c) - (*targets)(j, c)) * n.grad[i];
        }
      });
}

}  // namespace pvflow::ad
