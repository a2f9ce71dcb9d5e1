// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "pvflow/config.hpp"

namespace pvflow {

inline constexpr std::size_t kMaxFitPoints = 1024;

struct TrainingPair {
  std::string scene;
  PointCloud source;
  PointCloud target;
  std::optional<FlowField> ground_truth;
};

/// Reads {scene}_s.sfpc / {scene}_t.sfpc (and {scene}_gt.sffl when present),
/// scenes in name order. Throws InvalidConfig for a pair above kMaxFitPoints.
std::vector<TrainingPair> load_pairs(const std::string& dir);

class Adam {
 public:
  Adam(double learning_rate, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {}
  void step(ParamStore& params, const std::map<std::string, Tensor>& grads);

 private:
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::map<std::string, Tensor> m_, v_;
};

struct FitReport {
  std::vector<double> losses;  // mean loss before each step, then after the last
  double initial_loss() const { return losses.front(); }
  double final_loss() const { return losses.back(); }
};

/// Mean self-supervised loss over the pairs at the current weights.
double mean_pair_loss(const std::vector<TrainingPair>& pairs, const ParamStore& params, const PipelineConfig& config);

/// Full-batch Adam on the mean loss over all pairs for `steps` steps.
FitReport fit(ParamStore& params, const std::vector<TrainingPair>& pairs, const PipelineConfig& config,
              std::size_t steps, double learning_rate,
              const std::function<void(std::size_t, double)>& on_step = {});

}  // namespace pvflow
