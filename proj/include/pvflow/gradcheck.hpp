// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "pvflow/nn.hpp"

namespace pvflow {

struct GradCheckOptions {
  double tolerance = 1e-4;
  double step = 1e-5;  // h = step * max(1, |theta|)
  double floor = 1e-5;  // denominators are clamped to floor * max(1, |L|)
  std::size_t samples_per_tensor = 8;
  /// Coordinates whose stencil crosses a kink are skipped; more than this
  /// fraction of skips fails the check.
  double max_skipped_fraction = 0.1;
  std::uint64_t seed = 7;
};

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  bool passed = false;
};

/// |a - n| / max(|a|, |n|, floor)
double gradient_rel_error(double analytic, double numeric, double floor);

using ScalarFn = std::function<ad::Var(const std::vector<ad::Var>&)>;

/// Central differences of fn against tape gradients for sampled coordinates of
/// every input. fn must return a 1x1 value.
GradCheckResult grad_check(const std::string& name, const ScalarFn& fn, const std::vector<Tensor>& inputs,
                           const GradCheckOptions& options);

using ParamFn = std::function<ad::Var(Context&)>;

/// Same, over every tensor of a parameter store.
GradCheckResult grad_check_params(const std::string& name, const ParamFn& fn, const ParamStore& params,
                                  const GradCheckOptions& options);

/// Every differentiable op, each network module, and the full
/// embed -> cost -> unrolled Sinkhorn -> loss chain, at N <= 32 and D <= 16.
std::vector<GradCheckResult> run_gradcheck_suite(std::uint64_t seed = 7);

}  // namespace pvflow
