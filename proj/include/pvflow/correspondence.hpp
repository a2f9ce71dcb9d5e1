// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "pvflow/fusion.hpp"

namespace pvflow {

/// c(i, j) = 1 - cos(f_i, g_j); a zero-norm row costs 1 against everything.
Tensor matching_cost(const Tensor& source_features, const Tensor& target_features);
ad::Var matching_cost(const ad::Var& source_features, const ad::Var& target_features);

struct SinkhornOptions {
  double epsilon = 0.03;
  std::size_t max_iters = 30;
  double tol_marg = 1e-6;
  /// Run exactly max_iters iterations (for differentiating through the solver).
  bool unroll = false;
};

struct TransportPlan {
  Tensor values;
  double epsilon = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
  double marginal_error = 0.0;  // max |row or column sum - 1/N|
};

struct SinkhornResult {
  ad::Var plan;
  std::size_t iterations = 0;
  bool converged = false;
  double marginal_error = 0.0;
};

/// Balanced entropic OT with uniform marginals, log-domain scaling of
/// exp(-cost / epsilon). A plan is always returned; `converged` is false when
/// the marginal tolerance was not met within max_iters.
SinkhornResult sinkhorn(const ad::Var& cost, const SinkhornOptions& options);
TransportPlan sinkhorn(const Tensor& cost, const SinkhornOptions& options);

double max_marginal_error(const Tensor& plan);

/// Row-normalized barycenters of the target points. Rows of the plan that sum to
/// zero fall back to uniform weights and are reported in zero_rows.
ad::Var soft_correspondence(const ad::Var& plan, const Tensor& target_positions,
                            std::vector<std::size_t>* zero_rows = nullptr);
Tensor soft_correspondence(const Tensor& plan, const PointCloud& target, std::vector<std::size_t>* zero_rows = nullptr);

enum class FlowStage { Initial, Refined };

struct FlowField {
  Tensor vectors;  // N x 3, meters
  FlowStage stage = FlowStage::Initial;

  std::size_t size() const { return vectors.rows(); }
};

FlowField initial_flow(const PointCloud& source, const Tensor& correspondences);

struct RefineOptions {
  double lambda_smooth = 10.0;
  std::size_t steps = 150;
  double step_size = 0.05;
};

/// J(F) = sum_i |p_i + f_i - c_i|^2 + lambda * sum_i sum_{k in knn(i)} |f_i - f_k|^2
double refinement_objective(const PointCloud& source, const Tensor& correspondences, const Tensor& flow,
                            const NeighborGraph& graph, double lambda_smooth);
Tensor refinement_gradient(const PointCloud& source, const Tensor& correspondences, const Tensor& flow,
                           const NeighborGraph& graph, double lambda_smooth);

struct RefineResult {
  FlowField flow;
  std::vector<double> objective;  // J at the start and after every accepted step
  std::size_t accepted_steps = 0;
};

/// Gradient descent on J with backtracking (step halves until J does not
/// increase); the correspondences stay fixed. Returns the lowest-J iterate.
RefineResult refine_flow(const PointCloud& source, const Tensor& correspondences, const FlowField& initial,
                         const NeighborGraph& graph, const RefineOptions& options);

/// (1/N) sum_i min_j |c_i - q_j|^2 + lambda_c (1/N) sum_i sum_k |(c_i - p_i) - (c_k - p_k)|^2
ad::Var self_supervised_loss(const ad::Var& correspondences, const PointCloud& source, const PointCloud& target,
                             const NeighborGraph& graph, double lambda_c);

struct PipelineConfig {
  ModelConfig model;
  SinkhornOptions sinkhorn;
  RefineOptions refine;
  std::size_t k_refine = 8;
  double lambda_c = 1.0;
  bool single_precision = false;
};

struct PairLoss {
  ad::Var loss;
  SinkhornResult transport;
};

/// encode both clouds with shared weights -> cost -> unrolled Sinkhorn -> loss.
PairLoss pair_loss(Context& ctx, const CloudLayout& source, const CloudLayout& target, const NeighborGraph& source_graph,
                   const PipelineConfig& config);

struct EstimateResult {
  FlowField initial;
  FlowField refined;
  TransportPlan plan;
  Tensor correspondences;
  std::vector<std::size_t> zero_rows;
  RefineResult refinement;
};

/// Full pipeline. Throws UnequalSizes when the clouds differ in size.
EstimateResult estimate(const PointCloud& source, const PointCloud& target, const ParamStore& params,
                        const PipelineConfig& config);

}  // namespace pvflow
