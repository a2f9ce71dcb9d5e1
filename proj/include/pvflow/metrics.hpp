// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "pvflow/correspondence.hpp"

namespace pvflow {

// Accuracy/outlier thresholds: absolute meters, relative to |gt|.
inline constexpr double kStrictAbs = 0.05, kStrictRel = 0.05;
inline constexpr double kRelaxedAbs = 0.1, kRelaxedRel = 0.1;
inline constexpr double kOutlierAbs = 0.3, kOutlierRel = 0.1;

/// Mean end-point error in meters.
double epe(const FlowField& pred, const FlowField& gt);
/// % of points with error < 5 cm or < 5 % of |gt|.
double accuracy_strict(const FlowField& pred, const FlowField& gt);
/// % of points with error < 10 cm or < 10 % of |gt|.
double accuracy_relaxed(const FlowField& pred, const FlowField& gt);
/// % of points with error > 30 cm or > 10 % of |gt|.
double outliers(const FlowField& pred, const FlowField& gt);

struct Complexity {
  std::size_t params = 0;
  double macs = 0.0;

  double params_m() const { return static_cast<double>(params) / 1e6; }
  double flops_g() const { return 2.0 * macs / 1e9; }
};

/// Parameter count and forward multiply-accumulates of the encoder on both
/// clouds plus the cost matrix, for `points` points per cloud. Only dense
/// products are counted (1 MAC = 2 FLOPs). Voxel occupancy is taken at its
/// upper bound: min(N, r^3) voxels, min(W^3, voxels) per window.
Complexity count_params_flops(const ModelConfig& model, std::size_t points);

struct EvalReport {
  double epe = 0.0;
  double as_pct = 0.0;
  double ar_pct = 0.0;
  double out_pct = 0.0;
  std::size_t n = 0;
  double params_m = 0.0;
  double flops_g = 0.0;
};

EvalReport evaluate(const FlowField& pred, const FlowField& gt);

/// "key=value" lines.
std::string to_key_value(const EvalReport& report);
std::string to_json(const EvalReport& report);

}  // namespace pvflow
