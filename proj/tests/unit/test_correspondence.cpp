// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"
#include "../oracles.hpp"
#include "pvflow/metrics.hpp"

using namespace pvflow;

TEST_CASE("matching cost is one minus cosine") {
  const Tensor a(2, 2, {1, 0, 0, 0}), b(2, 2, {1, 0, 0, 2});
  const Tensor c = matching_cost(a, b);
  CHECK(c(0, 0) == doctest::Approx(0.0));
  CHECK(c(0, 1) == doctest::Approx(1.0));
  CHECK(c(1, 0) == 1.0);  // zero-norm row
  const Tensor fa = oracle::random_tensor(5, 4, 1), fb = oracle::random_tensor(6, 4, 2);
  const Tensor ad_cost = matching_cost(ad::constant(fa), ad::constant(fb)).value();
  CHECK(max_abs_diff(ad_cost, matching_cost(fa, fb)) < 1e-14);
}

TEST_CASE("sinkhorn agrees with a long double kernel-domain oracle") {
  for (std::size_t n : {2u, 5u, 17u}) {
    const Tensor cost = oracle::random_tensor(n, n, n, 0.0, 2.0);
    SinkhornOptions o;
    o.epsilon = 0.05;
    o.max_iters = 40;
    o.unroll = true;
    const TransportPlan p = sinkhorn(cost, o);
    CHECK(p.iterations == 40);
    const auto ref = oracle::sinkhorn_ld(cost, 0.05, 40);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) CHECK(std::abs(p.values(i, j) - static_cast<double>(ref[i][j])) < 1e-12);
  }
}

TEST_CASE("sinkhorn reports convergence honestly") {
  const Tensor cost = oracle::random_tensor(20, 20, 3, 0.0, 2.0);
  SinkhornOptions o;
  o.max_iters = 3;
  const TransportPlan few = sinkhorn(cost, o);
  CHECK_FALSE(few.converged);
  CHECK(few.marginal_error > o.tol_marg);
  o.max_iters = 5000;
  const TransportPlan many = sinkhorn(cost, o);
  CHECK(many.converged);
  CHECK(max_marginal_error(many.values) <= 1e-6);
  CHECK(many.iterations < 5000);
}

TEST_CASE("sinkhorn on the tape matches the tensor version and differentiates") {
  const Tensor cost = oracle::random_tensor(6, 6, 5, 0.0, 2.0);
  SinkhornOptions o;
  o.epsilon = 0.1;
  o.max_iters = 25;
  o.unroll = true;
  ad::Tape tape;
  const ad::Var c = tape.leaf(cost);
  const SinkhornResult r = sinkhorn(c, o);
  CHECK(max_abs_diff(r.plan.value(), sinkhorn(cost, o).values) == 0.0);

  const Tensor w = oracle::random_tensor(6, 6, 7);
  tape.backward(ad::sum(ad::mul(r.plan, ad::constant(w))));
  const Tensor g = c.grad();
  const double h = 1e-6;
  for (std::size_t k : {0u, 7u, 20u, 35u}) {
    Tensor up = cost, dn = cost;
    up[k] += h;
    dn[k] -= h;
    auto value = [&](const Tensor& t) {
      const Tensor p = sinkhorn(t, o).values;
      double s = 0.0;
      for (std::size_t i = 0; i < p.size(); ++i) s += p[i] * w[i];
      return s;
    };
    CHECK(g[k] == doctest::Approx((value(up) - value(dn)) / (2 * h)).epsilon(1e-5));
  }
}

TEST_CASE("soft correspondences are plan-weighted barycenters") {
  PointCloud t;
  t.positions = {{0, 0, 0}, {2, 0, 0}};
  const Tensor plan(2, 2, {0.25, 0.25, 0.0, 0.0});
  std::vector<std::size_t> zero_rows;
  const Tensor c = soft_correspondence(plan, t, &zero_rows);
  CHECK(c(0, 0) == doctest::Approx(1.0));
  CHECK(c(1, 0) == doctest::Approx(1.0));  // uniform fallback
  CHECK(zero_rows == std::vector<std::size_t>{1});
}

TEST_CASE("refinement objective and gradient agree") {
  const PointCloud src = oracle::random_cloud(25, 4);
  const Tensor corr = oracle::random_tensor(25, 3, 5, 0.0, 2.0), flow = oracle::random_tensor(25, 3, 6);
  const NeighborGraph g = knn(src, 4);
  const Tensor grad = refinement_gradient(src, corr, flow, g, 3.0);
  for (std::size_t k : {0u, 11u, 40u, 74u}) {
    Tensor up = flow, dn = flow;
    up[k] += 1e-6;
    dn[k] -= 1e-6;
    const double fd =
        (refinement_objective(src, corr, up, g, 3.0) - refinement_objective(src, corr, dn, g, 3.0)) / 2e-6;
    CHECK(grad[k] == doctest::Approx(fd).epsilon(1e-6));
  }
}

TEST_CASE("refinement never increases the objective") {
  const PointCloud src = oracle::random_cloud(40, 8);
  const Tensor corr = oracle::random_tensor(40, 3, 9, 0.0, 2.0);
  FlowField init;
  init.vectors = Tensor(40, 3);
  const RefineResult r = refine_flow(src, corr, init, knn(src, 6), RefineOptions{});
  for (std::size_t i = 1; i < r.objective.size(); ++i) CHECK(r.objective[i] <= r.objective[i - 1]);
  CHECK(r.flow.stage == FlowStage::Refined);
  CHECK(r.objective.size() == r.accepted_steps + 1);
}

TEST_CASE("estimate rejects clouds of different sizes") {
  const PipelineConfig pc;
  const ParamStore params = init_params(pc.model.param_shapes(), 1);
  try {
    estimate(oracle::random_cloud(30, 1), oracle::random_cloud(31, 2), params, pc);
    FAIL("expected UnequalSizes");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::UnequalSizes);
  }
}

TEST_CASE("estimate on a tiny cloud uses the neighbor fallback") {
  PipelineConfig pc;
  const ParamStore params = init_params(pc.model.param_shapes(), 1);
  const PointCloud s = oracle::random_cloud(6, 1);
  PointCloud t = s;
  for (auto& p : t.positions) p.x += 0.1;
  const EstimateResult r = estimate(s, t, params, pc);
  CHECK(r.refined.size() == 6);
  CHECK(r.refined.vectors.all_finite());
  CHECK(r.initial.stage == FlowStage::Initial);
}
