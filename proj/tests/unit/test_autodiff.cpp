// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"
#include "../oracles.hpp"
#include "pvflow/gradcheck.hpp"

using namespace pvflow;

TEST_CASE("backward through a small graph") {
  ad::Tape tape;
  const ad::Var x = tape.leaf(Tensor(1, 2, {2.0, -3.0}));
  const ad::Var y = ad::sum(ad::mul(x, x));  // x0^2 + x1^2
  tape.backward(y);
  CHECK(y.value()[0] == 13.0);
  CHECK(x.grad()[0] == 4.0);
  CHECK(x.grad()[1] == -6.0);

  tape.backward(y);  // accumulates
  CHECK(x.grad()[0] == 8.0);
  tape.zero_grad();
  tape.backward(y);
  CHECK(x.grad()[1] == -6.0);
}

TEST_CASE("backward rejects losses that were not recorded") {
  ad::Tape tape, other;
  const ad::Var c = ad::sum(ad::constant(Tensor(2, 2, 1.0)));
  try {
    tape.backward(c);
    FAIL("expected UnrecordedNode");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::UnrecordedNode);
  }
  const ad::Var x = other.leaf(Tensor(1, 1, 1.0));
  CHECK_THROWS_AS(tape.backward(ad::sum(x)), Error);
  const ad::Var y = tape.leaf(Tensor(2, 1, 1.0));
  CHECK_THROWS_AS(tape.backward(y), Error);  // not 1x1
}

TEST_CASE("replay reproduces every recorded value") {
  ad::Tape tape;
  const ad::Var x = tape.leaf(oracle::random_tensor(6, 4, 3));
  const ad::Var w = tape.leaf(oracle::random_tensor(5, 4, 4));
  const ad::Var y = ad::softmax_rows(ad::leaky_relu(ad::instance_norm(ad::linear(x, w)), 0.1));
  tape.backward(ad::sum(y));
  CHECK(tape.replay());
}

TEST_CASE("non-finite op results are reported") {
  const ad::Var big = ad::constant(Tensor(1, 1, 1000.0));
  try {
    ad::exp(big);
    FAIL("expected NonFinite");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NonFinite);
  }
}

TEST_CASE("ops against direct formulas") {
  const Tensor a = oracle::random_tensor(3, 4, 1), b = oracle::random_tensor(4, 5, 2);
  CHECK(max_abs_diff(ad::matmul(ad::constant(a), ad::constant(b)).value(), oracle::matmul(a, b)) < 1e-14);

  const Tensor lse = ad::logsumexp_rows(ad::constant(a)).value();
  for (std::size_t i = 0; i < 3; ++i) {
    double s = 0.0;
    for (double v : a.row(i)) s += std::exp(v);
    CHECK(lse(i, 0) == doctest::Approx(std::log(s)).epsilon(1e-14));
  }
  const Tensor lsec = ad::logsumexp_cols(ad::constant(a)).value();
  for (std::size_t j = 0; j < 4; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < 3; ++i) s += std::exp(a(i, j));
    CHECK(lsec(0, j) == doctest::Approx(std::log(s)).epsilon(1e-14));
  }

  const Tensor g = ad::group_max(ad::constant(Tensor(4, 1, {1, 5, 5, 2})), 2).value();
  CHECK(g == Tensor(2, 1, {5, 5}));

  std::vector<std::size_t> zero_rows;
  const Tensor n1 = ad::normalize_rows_l1(ad::constant(Tensor(2, 2, {1, 3, 0, 0})), &zero_rows).value();
  CHECK(n1 == Tensor(2, 2, {0.25, 0.75, 0.5, 0.5}));
  CHECK(zero_rows == std::vector<std::size_t>{1});

  const Tensor cat = ad::concat_cols({ad::constant(Tensor(1, 1, {1})), ad::constant(Tensor(1, 2, {2, 3}))}).value();
  CHECK(cat == Tensor(1, 3, {1, 2, 3}));
  CHECK(ad::slice_cols(ad::constant(cat), 1, 2).value() == Tensor(1, 2, {2, 3}));
}

TEST_CASE("window attention keeps windows independent") {
  const Tensor x = oracle::random_tensor(6, 4, 9);
  auto windows = std::make_shared<const std::vector<std::vector<std::size_t>>>(
      std::vector<std::vector<std::size_t>>{{0, 1, 2}, {3, 4}});
  const ad::Var q = ad::constant(x);
  const Tensor out = ad::window_attention(q, q, q, windows, 2).value();
  Tensor x2 = x;
  x2(4, 0) += 1.0;  // change an item in the second window
  const ad::Var q2 = ad::constant(x2);
  const Tensor out2 = ad::window_attention(q2, q2, q2, windows, 2).value();
  for (std::size_t c = 0; c < 4; ++c) {
    for (std::size_t i = 0; i < 3; ++i) CHECK(out(i, c) == out2(i, c));
    CHECK(out(5, c) == 0.0);  // item 5 is in no window
  }
  // A single-item window attends only to itself.
  auto solo = std::make_shared<const std::vector<std::vector<std::size_t>>>(
      std::vector<std::vector<std::size_t>>{{2}});
  const Tensor self = ad::window_attention(q, q, q, solo, 1).value();
  for (std::size_t c = 0; c < 4; ++c) CHECK(self(2, c) == doctest::Approx(x(2, c)));
}

TEST_CASE("grad check accepts correct and rejects wrong gradients") {
  GradCheckOptions opts;
  const auto ok = grad_check(
      "softmax", [](const std::vector<ad::Var>& v) { return ad::sum(ad::mul(ad::softmax_rows(v[0]), v[1])); },
      {oracle::random_tensor(3, 5, 1), oracle::random_tensor(3, 5, 2)}, opts);
  CHECK(ok.passed);
  CHECK(ok.max_rel_error < 1e-6);

  const auto bad = grad_check(
      "wrong_exp",
      [](const std::vector<ad::Var>& v) {
        return ad::sum(ad::make_op(
            "wrong_exp", {v[0]},
            [](ad::Node& n) {
              n.value = n.parents[0]->value;
              for (auto& x : n.value.storage()) x = std::exp(x);
            },
            [](ad::Node& n) {
              Tensor& g = n.parents[0]->grad_buffer();
              for (std::size_t i = 0; i < g.size(); ++i) g[i] += 1.01 * n.grad[i] * n.value[i];
            }));
      },
      {oracle::random_tensor(2, 3, 5)}, opts);
  CHECK_FALSE(bad.passed);
  CHECK(bad.max_rel_error > 1e-3);
}

TEST_CASE("relative error uses the floor for tiny gradients") {
  CHECK(gradient_rel_error(1e-12, 0.0, 1e-6) < 1e-5);
  CHECK(gradient_rel_error(1.0, 1.1, 1e-6) == doctest::Approx(0.1 / 1.1));
}
