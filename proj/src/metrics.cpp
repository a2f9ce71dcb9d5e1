// SPDX-License-Identifier: Apache-2.0
#include "pvflow/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <functional>

#include "json.hpp"

namespace pvflow {
namespace {

struct PointError {
  double err;
  double rel;
};

template <typename Fn>
void for_each_error(const FlowField& pred, const FlowField& gt, Fn&& fn) {
  if (pred.size() != gt.size()) {
    fail(ErrorCode::UnequalSizes, "prediction has " + std::to_string(pred.size()) + " vectors, ground truth " +
                                      std::to_string(gt.size()));
  }
  if (pred.vectors.cols() != 3 || gt.vectors.cols() != 3) {
    fail(ErrorCode::ShapeError, "flow fields must be N x 3: " + pred.vectors.shape_string() + " vs " +
                                    gt.vectors.shape_string());
  }
  if (pred.size() == 0) fail(ErrorCode::ShapeError, "metrics on an empty flow field");
  for (std::size_t i = 0; i < pred.size(); ++i) {
    double e2 = 0.0, g2 = 0.0;
    for (std::size_t c = 0; c < 3; ++c) {
      const double d = pred.vectors(i, c) - gt.vectors(i, c);
      e2 += d * d;
      g2 += gt.vectors(i, c) * gt.vectors(i, c);
    }
    const double err = std::sqrt(e2);
    fn(PointError{err, err / std::max(std::sqrt(g2), 1e-12)});
  }
}

double percent_where(const FlowField& pred, const FlowField& gt, const std::function<bool(PointError)>& pred_fn) {
  std::size_t hits = 0;
  for_each_error(pred, gt, [&](PointError e) { hits += pred_fn(e) ? 1 : 0; });
  return 100.0 * static_cast<double>(hits) / static_cast<double>(pred.size());
}

}  // namespace

double epe(const FlowField& pred, const FlowField& gt) {
  double total = 0.0;
  for_each_error(pred, gt, [&](PointError e) { total += e.err; });
  return total / static_cast<double>(pred.size());
}

double accuracy_strict(const FlowField& pred, const FlowField& gt) {
  return percent_where(pred, gt, [](PointError e) { return e.err < kStrictAbs || e.rel < kStrictRel; });
}

double accuracy_relaxed(const FlowField& pred, const FlowField& gt) {
  return percent_where(pred, gt, [](PointError e) { return e.err < kRelaxedAbs || e.rel < kRelaxedRel; });
}

double outliers(const FlowField& pred, const FlowField& gt) {
  return percent_where(pred, gt, [](PointError e) { return e.err > kOutlierAbs || e.rel > kOutlierRel; });
}

Complexity count_params_flops(const ModelConfig& model, std::size_t points) {
  Complexity c;
  c.params = count_params(model.param_shapes());
  const double n = static_cast<double>(points);
  auto mlp_macs = [](const MlpSpec& m, double rows) {
    double macs = 0.0;
    for (std::size_t l = 0; l < m.layers(); ++l) macs += rows * static_cast<double>(m.widths[l] * m.widths[l + 1]);
    return macs;
  };
  const double r3 = std::pow(static_cast<double>(model.resolution), 3);
  const double voxels = std::min(n, r3);
  const double per_window = std::min(std::pow(static_cast<double>(model.window), 3), voxels);
  const double windows = per_window > 0.0 ? std::ceil(voxels / per_window) : 0.0;

  double per_cloud = mlp_macs(model.usfe_mlp(), n * static_cast<double>(model.k_usfe));
  double concat = 0.0;
  for (std::size_t l = 1; l <= kFusionLayers; ++l) {
    const double w = static_cast<double>(model.layer_width(l));
    const double w_in = static_cast<double>(model.layer_width(l - 1));
    concat += w;
    per_cloud += mlp_macs(model.point_mlp(l), n * static_cast<double>(model.k_sc));
    per_cloud += n * w_in * w;  // input projection
    // two attention passes: q, k, v, o projections, positional term, scores and weighted sum
    per_cloud += 2.0 * (voxels * (4.0 * w * w + 3.0 * w) + windows * 2.0 * per_window * per_window * w);
  }
  per_cloud += n * concat * static_cast<double>(model.embed_dim);
  c.macs = 2.0 * per_cloud + n * n * static_cast<double>(model.embed_dim);
  return c;
}

EvalReport evaluate(const FlowField& pred, const FlowField& gt) {
  EvalReport r;
  r.epe = epe(pred, gt);
  r.as_pct = accuracy_strict(pred, gt);
  r.ar_pct = accuracy_relaxed(pred, gt);
  r.out_pct = outliers(pred, gt);
  r.n = pred.size();
  return r;
}

std::string to_key_value(const EvalReport& report) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "EPE=%.3f\nAS=%.1f\nAR=%.1f\nOut=%.1f\nN=%zu\nParams(M)=%.4f\nFLOPs(G)=%.3f\n", report.epe,
                report.as_pct, report.ar_pct, report.out_pct, report.n, report.params_m, report.flops_g);
  return buf;
}

std::string to_json(const EvalReport& report) {
  nlohmann::json j;
  j["epe"] = report.epe;
  j["as"] = report.as_pct;
  j["ar"] = report.ar_pct;
  j["out"] = report.out_pct;
  j["n"] = report.n;
  j["params_m"] = report.params_m;
  j["flops_g"] = report.flops_g;
  return j.dump();
}

}  // namespace pvflow
