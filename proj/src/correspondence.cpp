// SPDX-License-Identifier: Apache-2.0
#include "pvflow/correspondence.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "pvflow/parallel.hpp"
#include "pvflow/simd/kernels.hpp"

namespace pvflow {

ad::Var matching_cost(const ad::Var& source_features, const ad::Var& target_features) {
  if (source_features.cols() != target_features.cols()) {
    fail(ErrorCode::ShapeError, "matching_cost: feature widths differ");
  }
  const ad::Var cos = ad::matmul_nt(ad::normalize_rows_l2(source_features), ad::normalize_rows_l2(target_features));
  return ad::add_scalar(ad::scale(cos, -1.0), 1.0);
}

Tensor matching_cost(const Tensor& source_features, const Tensor& target_features) {
  Tensor c = matching_cost(ad::constant(source_features), ad::constant(target_features)).value();
  for (auto& v : c.storage()) v = std::max(v, 0.0);  // rounding can leave -1e-16 on exact matches
  return c;
}

double max_marginal_error(const Tensor& plan) {
  const std::size_t n = plan.rows(), m = plan.cols();
  double err = 0.0;
  std::vector<double> col(m, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      row += plan(i, j);
      col[j] += plan(i, j);
    }
    err = std::max(err, std::abs(row - 1.0 / static_cast<double>(n)));
  }
  for (double c : col) err = std::max(err, std::abs(c - 1.0 / static_cast<double>(m)));
  return err;
}

namespace {

// Potentials after every iteration, kept for the backward pass.
struct SinkhornTrace {
  Tensor log_kernel;  // -cost / epsilon
  std::vector<std::vector<double>> f, g;
  std::size_t iterations = 0;
  bool converged = false;
  double marginal_error = 0.0;
};

// out_i = lse_j(L_ij + g_j)
void row_lse(const Tensor& L, const std::vector<double>& g, std::vector<double>& out) {
  const std::size_t m = L.cols();
  const auto& k = simd::kernels();
  parallel_for(L.rows(), [&](std::size_t b, std::size_t e) {
    std::vector<double> t(m);
    for (std::size_t i = b; i < e; ++i) {
      const double* li = L.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) t[j] = li[j] + g[j];
      const double mx = *std::max_element(t.begin(), t.end());
      k.exp_sub(t.data(), mx, t.data(), m);
      double s = 0.0;
      for (double v : t) s += v;
      out[i] = mx + std::log(s);
    }
  });
}

// out_j = lse_i(L_ij + f_i); columns are split across workers, rows summed in order.
void col_lse(const Tensor& L, const std::vector<double>& f, std::vector<double>& out) {
  const std::size_t n = L.rows(), m = L.cols();
  const auto& k = simd::kernels();
  parallel_for(m, [&](std::size_t b, std::size_t e) {
    const std::size_t w = e - b;
    std::vector<double> mx(w, -std::numeric_limits<double>::infinity()), s(w, 0.0), t(w);
    for (std::size_t i = 0; i < n; ++i) {
      const double* li = L.data() + i * m + b;
      for (std::size_t j = 0; j < w; ++j) mx[j] = std::max(mx[j], li[j] + f[i]);
    }
    for (std::size_t i = 0; i < n; ++i) {
      const double* li = L.data() + i * m + b;
      for (std::size_t j = 0; j < w; ++j) t[j] = li[j] + f[i];
      k.exp_sub_each(t.data(), mx.data(), t.data(), w);
      for (std::size_t j = 0; j < w; ++j) s[j] += t[j];
    }
    for (std::size_t j = 0; j < w; ++j) out[b + j] = mx[j] + std::log(s[j]);
  });
}

void sinkhorn_forward(const Tensor& cost, const SinkhornOptions& o, SinkhornTrace& tr, Tensor& plan) {
  const std::size_t n = cost.rows(), m = cost.cols();
  const double log_a = -std::log(static_cast<double>(n));
  const double log_b = -std::log(static_cast<double>(m));
  tr = SinkhornTrace{};
  tr.log_kernel = Tensor(n, m);
  for (std::size_t i = 0; i < cost.size(); ++i) tr.log_kernel[i] = -cost[i] / o.epsilon;
  std::vector<double> f(n, 0.0), g(m, 0.0), lse_r(n), lse_c(m);
  for (std::size_t it = 0;; ++it) {
    row_lse(tr.log_kernel, g, lse_r);
    if (it > 0) {
      // Columns match exactly after each g update; the row marginal of (f, g)
      // is exp(f_i + lse_i), read off the next f update for free.
      double err = 0.0;
      for (std::size_t i = 0; i < n; ++i) err = std::max(err, std::abs(std::exp(f[i] + lse_r[i]) - 1.0 / n));
      tr.marginal_error = err;
      tr.converged = err <= o.tol_marg;
      if (it == o.max_iters || (tr.converged && !o.unroll)) break;
    }
    for (std::size_t i = 0; i < n; ++i) f[i] = log_a - lse_r[i];
    col_lse(tr.log_kernel, f, lse_c);
    for (std::size_t j = 0; j < m; ++j) g[j] = log_b - lse_c[j];
    tr.f.push_back(f);
    tr.g.push_back(g);
    tr.iterations = it + 1;
  }
  plan = Tensor(n, m);
  const auto& k = simd::kernels();
  parallel_for(n, [&](std::size_t b, std::size_t e) {
    std::vector<double> t(m);
    for (std::size_t i = b; i < e; ++i) {
      const double* li = tr.log_kernel.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) t[j] = li[j] + g[j];
      k.exp_sub(t.data(), -f[i], plan.data() + i * m, m);
    }
  });
}

// Reverse mode through every iteration. With Q the column softmax behind g_t
// and R the row softmax behind f_t:
//   g_t = log_b - lse_i(L + f_t):      dL -= gbar_j Q, fbar_i -= sum_j gbar_j Q
//   f_t = log_a - lse_j(L + g_{t-1}):  dL -= fbar_i R, gbar_j -= sum_i fbar_i R
void sinkhorn_backward(const SinkhornTrace& tr, const Tensor& plan, const Tensor& plan_grad, double epsilon,
                       Tensor& cost_grad) {
  const std::size_t n = plan.rows(), m = plan.cols();
  const double log_a = -std::log(static_cast<double>(n));
  const double log_b = -std::log(static_cast<double>(m));
  const Tensor& L = tr.log_kernel;
  const auto& k = simd::kernels();
  Tensor dL(n, m);
  std::vector<double> fbar(n, 0.0), gbar(m, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      const double d = plan_grad(i, j) * plan(i, j);
      dL(i, j) = d;
      fbar[i] += d;
    }
  parallel_for(m, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = b; j < e; ++j) gbar[j] += dL(i, j);
  });
  const std::vector<double> zeros(m, 0.0);
  for (std::size_t t = tr.iterations; t-- > 0;) {
    const std::vector<double>& f = tr.f[t];
    const std::vector<double>& g = tr.g[t];
    const std::vector<double>& g_prev = t == 0 ? zeros : tr.g[t - 1];
    parallel_for(n, [&](std::size_t b, std::size_t e) {
      std::vector<double> q(m);
      for (std::size_t i = b; i < e; ++i) {
        const double* li = L.data() + i * m;
        for (std::size_t j = 0; j < m; ++j) q[j] = li[j] + g[j];
        k.exp_sub(q.data(), log_b - f[i], q.data(), m);
        double acc = 0.0;
        double* di = dL.data() + i * m;
        for (std::size_t j = 0; j < m; ++j) {
          const double c = gbar[j] * q[j];
          di[j] -= c;
          acc += c;
        }
        fbar[i] -= acc;
      }
    });
    std::fill(gbar.begin(), gbar.end(), 0.0);
    parallel_for(m, [&](std::size_t b, std::size_t e) {
      const std::size_t w = e - b;
      std::vector<double> r(w);
      for (std::size_t i = 0; i < n; ++i) {
        const double* li = L.data() + i * m + b;
        for (std::size_t j = 0; j < w; ++j) r[j] = li[j] + g_prev[b + j];
        k.exp_sub(r.data(), log_a - f[i], r.data(), w);
        double* di = dL.data() + i * m + b;
        for (std::size_t j = 0; j < w; ++j) {
          const double c = fbar[i] * r[j];
          di[j] -= c;
          gbar[b + j] -= c;
        }
      }
    });
    std::fill(fbar.begin(), fbar.end(), 0.0);
  }
  for (std::size_t i = 0; i < dL.size(); ++i) cost_grad[i] -= dL[i] / epsilon;
}

}  // namespace

SinkhornResult sinkhorn(const ad::Var& cost, const SinkhornOptions& options) {
  if (!(options.epsilon > 0.0)) fail(ErrorCode::InvalidConfig, "sinkhorn epsilon must be positive");
  if (cost.rows() == 0 || cost.cols() == 0) fail(ErrorCode::ShapeError, "sinkhorn on an empty cost matrix");
  if (options.max_iters == 0) fail(ErrorCode::InvalidConfig, "sinkhorn needs at least one iteration");
  auto trace = std::make_shared<SinkhornTrace>();
  const SinkhornOptions opts = options;
  SinkhornResult result;
  result.plan = ad::make_op(
      "sinkhorn", {cost},
      [trace, opts](ad::Node& n) { sinkhorn_forward(n.parents[0]->value, opts, *trace, n.value); },
      [trace, opts](ad::Node& n) {
        ad::Node& c = *n.parents[0];
        if (!c.requires_grad) return;
        sinkhorn_backward(*trace, n.value, n.grad, opts.epsilon, c.grad_buffer());
      });
  result.iterations = trace->iterations;
  result.converged = trace->converged;
  result.marginal_error = trace->marginal_error;
  return result;
}

TransportPlan sinkhorn(const Tensor& cost, const SinkhornOptions& options) {
  SinkhornOptions opts = options;
  opts.unroll = false;
  const SinkhornResult r = sinkhorn(ad::constant(cost), opts);
  TransportPlan plan;
  plan.values = r.plan.value();
  plan.epsilon = options.epsilon;
  plan.iterations = r.iterations;
  plan.marginal_error = max_marginal_error(plan.values);
  plan.converged = plan.marginal_error <= options.tol_marg;
  return plan;
}

ad::Var soft_correspondence(const ad::Var& plan, const Tensor& target_positions, std::vector<std::size_t>* zero_rows) {
  if (plan.cols() != target_positions.rows()) {
    fail(ErrorCode::ShapeError, "soft_correspondence: plan has " + std::to_string(plan.cols()) + " columns for " +
                                    std::to_string(target_positions.rows()) + " targets");
  }
  return ad::matmul(ad::normalize_rows_l1(plan, zero_rows), ad::constant(target_positions));
}

Tensor soft_correspondence(const Tensor& plan, const PointCloud& target, std::vector<std::size_t>* zero_rows) {
  return soft_correspondence(ad::constant(plan), target.positions_tensor(), zero_rows).value();
}

FlowField initial_flow(const PointCloud& source, const Tensor& correspondences) {
  if (correspondences.rows() != source.size() || correspondences.cols() != 3) {
    fail(ErrorCode::ShapeError, "initial_flow: correspondences " + correspondences.shape_string() + " for " +
                                    std::to_string(source.size()) + " points");
  }
  FlowField f;
  f.vectors = correspondences;
  for (std::size_t i = 0; i < source.size(); ++i) {
    f.vectors(i, 0) -= source.positions[i].x;
    f.vectors(i, 1) -= source.positions[i].y;
    f.vectors(i, 2) -= source.positions[i].z;
  }
  f.stage = FlowStage::Initial;
  return f;
}

namespace {

void check_refine_shapes(const PointCloud& source, const Tensor& corr, const Tensor& flow, const NeighborGraph& graph) {
  const std::size_t n = source.size();
  if (corr.rows() != n || corr.cols() != 3 || flow.rows() != n || flow.cols() != 3 || graph.points() != n) {
    fail(ErrorCode::ShapeError, "refinement inputs do not describe the same " + std::to_string(n) + " points");
  }
}

}  // namespace

double refinement_objective(const PointCloud& source, const Tensor& correspondences, const Tensor& flow,
                            const NeighborGraph& graph, double lambda_smooth) {
  check_refine_shapes(source, correspondences, flow, graph);
  double data = 0.0, smooth = 0.0;
  for (std::size_t i = 0; i < source.size(); ++i) {
    const double p[3] = {source.positions[i].x, source.positions[i].y, source.positions[i].z};
    for (std::size_t c = 0; c < 3; ++c) {
      const double r = p[c] + flow(i, c) - correspondences(i, c);
      data += r * r;
    }
    for (std::size_t k : graph.row(i))
      for (std::size_t c = 0; c < 3; ++c) {
        const double d = flow(i, c) - flow(k, c);
        smooth += d * d;
      }
  }
  return data + lambda_smooth * smooth;
}

Tensor refinement_gradient(const PointCloud& source, const Tensor& correspondences, const Tensor& flow,
                           const NeighborGraph& graph, double lambda_smooth) {
  check_refine_shapes(source, correspondences, flow, graph);
  Tensor g(source.size(), 3);
  for (std::size_t i = 0; i < source.size(); ++i) {
    const double p[3] = {source.positions[i].x, source.positions[i].y, source.positions[i].z};
    for (std::size_t c = 0; c < 3; ++c) g(i, c) += 2.0 * (p[c] + flow(i, c) - correspondences(i, c));
    for (std::size_t k : graph.row(i))
      for (std::size_t c = 0; c < 3; ++c) {
        const double d = 2.0 * lambda_smooth * (flow(i, c) - flow(k, c));
        g(i, c) += d;
        g(k, c) -= d;
      }
  }
  return g;
}

RefineResult refine_flow(const PointCloud& source, const Tensor& correspondences, const FlowField& initial,
                         const NeighborGraph& graph, const RefineOptions& options) {
  if (options.lambda_smooth < 0.0) fail(ErrorCode::InvalidConfig, "lambda_smooth must be non-negative");
  constexpr int kMaxHalvings = 60;
  RefineResult out;
  Tensor flow = initial.vectors;
  double j = refinement_objective(source, correspondences, flow, graph, options.lambda_smooth);
  out.objective.push_back(j);
  for (std::size_t step = 0; step < options.steps; ++step) {
    const Tensor grad = refinement_gradient(source, correspondences, flow, graph, options.lambda_smooth);
    bool moved = false;
    double h = options.step_size;
    for (int tries = 0; tries < kMaxHalvings; ++tries, h *= 0.5) {
      Tensor candidate = flow;
      for (std::size_t i = 0; i < candidate.size(); ++i) candidate[i] -= h * grad[i];
      const double jc = refinement_objective(source, correspondences, candidate, graph, options.lambda_smooth);
      if (jc <= j) {
        moved = !(candidate == flow);
        flow = std::move(candidate);
        j = jc;
        break;
      }
    }
    if (!moved) break;
    out.objective.push_back(j);
    ++out.accepted_steps;
  }
  out.flow.vectors = std::move(flow);
  out.flow.stage = FlowStage::Refined;
  return out;
}

ad::Var self_supervised_loss(const ad::Var& correspondences, const PointCloud& source, const PointCloud& target,
                             const NeighborGraph& graph, double lambda_c) {
  const std::size_t n = source.size();
  if (correspondences.rows() != n || graph.points() != n) {
    fail(ErrorCode::ShapeError, "self_supervised_loss: inputs disagree on N");
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  auto targets = std::make_shared<const Tensor>(target.positions_tensor());
  const ad::Var fit = ad::scale(ad::sum(ad::nearest_sq_dist(correspondences, targets)), inv_n);
  if (lambda_c == 0.0) return fit;
  const ad::Var flow = ad::sub(correspondences, ad::constant(source.positions_tensor()));
  auto diff = std::make_shared<ad::SparseRows>();
  diff->input_rows = n;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k : graph.row(i)) {
      diff->push(i, 1.0);
      diff->push(k, -1.0);
      diff->end_row();
    }
  const ad::Var d = ad::sparse_rows(flow, std::move(diff));
  const ad::Var smooth = ad::scale(ad::sum(ad::mul(d, d)), lambda_c * inv_n);
  return ad::add(fit, smooth);
}

PairLoss pair_loss(Context& ctx, const CloudLayout& source, const CloudLayout& target, const NeighborGraph& source_graph,
                   const PipelineConfig& config) {
  if (source.cloud.size() != target.cloud.size()) {
    fail(ErrorCode::UnequalSizes, std::to_string(source.cloud.size()) + " source vs " +
                                      std::to_string(target.cloud.size()) + " target points");
  }
  const Embedding fs = encode(ctx, source, config.model);
  const Embedding ft = encode(ctx, target, config.model);
  SinkhornOptions opts = config.sinkhorn;
  opts.unroll = true;
  PairLoss out;
  out.transport = sinkhorn(matching_cost(fs.features, ft.features), opts);
  const ad::Var corr = soft_correspondence(out.transport.plan, target.cloud.positions_tensor());
  out.loss = self_supervised_loss(corr, source.cloud, target.cloud, source_graph, config.lambda_c);
  return out;
}

namespace {

class PrecisionGuard {
 public:
  explicit PrecisionGuard(bool single) : previous_(ad::forward_precision()) {
    ad::set_forward_precision(single ? ad::Precision::F32 : ad::Precision::F64);
  }
  ~PrecisionGuard() { ad::set_forward_precision(previous_); }
  PrecisionGuard(const PrecisionGuard&) = delete;
  PrecisionGuard& operator=(const PrecisionGuard&) = delete;

 private:
  ad::Precision previous_;
};

}  // namespace

EstimateResult estimate(const PointCloud& source, const PointCloud& target, const ParamStore& params,
                        const PipelineConfig& config) {
  if (source.size() != target.size()) {
    fail(ErrorCode::UnequalSizes, std::to_string(source.size()) + " source vs " + std::to_string(target.size()) +
                                      " target points");
  }
  config.model.validate();
  PrecisionGuard guard(config.single_precision);
  const CloudLayout src = prepare_cloud(source, config.model);
  const CloudLayout tgt = prepare_cloud(target, config.model);
  Context ctx(params);
  const Tensor fs = encode(ctx, src, config.model).features.value();
  const Tensor ft = encode(ctx, tgt, config.model).features.value();

  EstimateResult out;
  out.plan = sinkhorn(matching_cost(fs, ft), config.sinkhorn);
  out.correspondences = soft_correspondence(out.plan.values, target, &out.zero_rows);
  out.initial = initial_flow(source, out.correspondences);
  const NeighborGraph graph = knn_with_fallback(source, config.k_refine);
  out.refinement = refine_flow(source, out.correspondences, out.initial, graph, config.refine);
  out.refined = out.refinement.flow;
  return out;
}

}  // namespace pvflow
