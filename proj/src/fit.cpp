// SPDX-License-Identifier: Apache-2.0
#include "pvflow/fit.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "pvflow/io.hpp"

namespace pvflow {
namespace {

struct PreparedPair {
  CloudLayout source;
  CloudLayout target;
  NeighborGraph graph;
};

std::vector<PreparedPair> prepare(const std::vector<TrainingPair>& pairs, const PipelineConfig& config) {
  std::vector<PreparedPair> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) {
    if (p.source.size() != p.target.size()) {
      fail(ErrorCode::UnequalSizes, p.scene + ": " + std::to_string(p.source.size()) + " source vs " +
                                        std::to_string(p.target.size()) + " target points");
    }
    out.push_back({prepare_cloud(p.source, config.model), prepare_cloud(p.target, config.model),
                   knn_with_fallback(p.source, config.k_refine)});
  }
  return out;
}

}  // namespace

std::vector<TrainingPair> load_pairs(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) fail(ErrorCode::IoError, dir + " is not a directory");
  std::vector<std::string> scenes;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    const std::string suffix = "_s.sfpc";
    if (name.size() > suffix.size() && name.ends_with(suffix)) scenes.push_back(name.substr(0, name.size() - suffix.size()));
  }
  std::sort(scenes.begin(), scenes.end());
  std::vector<TrainingPair> pairs;
  for (const auto& scene : scenes) {
    const fs::path base = fs::path(dir) / scene;
    TrainingPair p;
    p.scene = scene;
    p.source = read_cloud(base.string() + "_s.sfpc");
    const std::string target = base.string() + "_t.sfpc";
    if (!fs::exists(target)) fail(ErrorCode::IoError, "missing " + target);
    p.target = read_cloud(target);
    const std::string gt = base.string() + "_gt.sffl";
    if (fs::exists(gt)) p.ground_truth = read_flow(gt);
    if (std::max(p.source.size(), p.target.size()) > kMaxFitPoints) {
      fail(ErrorCode::InvalidConfig, scene + ": fit is limited to " + std::to_string(kMaxFitPoints) + " points");
    }
    pairs.push_back(std::move(p));
  }
  if (pairs.empty()) fail(ErrorCode::IoError, "no *_s.sfpc pairs in " + dir);
  return pairs;
}

void Adam::step(ParamStore& params, const std::map<std::string, Tensor>& grads) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (const auto& [name, g] : grads) {
    Tensor& w = params.get_mut(name);
    Tensor& m = m_.try_emplace(name, Tensor::zeros_like(g)).first->second;
    Tensor& v = v_.try_emplace(name, Tensor::zeros_like(g)).first->second;
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      w[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

double mean_pair_loss(const std::vector<TrainingPair>& pairs, const ParamStore& params, const PipelineConfig& config) {
  const auto prepared = prepare(pairs, config);
  double total = 0.0;
  for (const auto& p : prepared) {
    Context ctx(params);
    total += pair_loss(ctx, p.source, p.target, p.graph, config).loss.value()[0];
  }
  return total / static_cast<double>(prepared.size());
}

FitReport fit(ParamStore& params, const std::vector<TrainingPair>& pairs, const PipelineConfig& config,
              std::size_t steps, double learning_rate, const std::function<void(std::size_t, double)>& on_step) {
  config.model.validate();
  if (pairs.empty()) fail(ErrorCode::InvalidConfig, "fit needs at least one pair");
  const auto prepared = prepare(pairs, config);
  const double inv = 1.0 / static_cast<double>(prepared.size());
  Adam adam(learning_rate);
  FitReport report;
  for (std::size_t step = 0;; ++step) {
    double loss = 0.0;
    std::map<std::string, Tensor> grads;
    const bool last = step == steps;
    for (const auto& p : prepared) {
      ad::Tape tape;
      Context ctx(params, last ? nullptr : &tape);
      const ad::Var l = pair_loss(ctx, p.source, p.target, p.graph, config).loss;
      loss += l.value()[0] * inv;
      if (last) continue;
      tape.backward(l);
      for (auto& [name, g] : ctx.gradients()) {
        auto [it, fresh] = grads.try_emplace(name, Tensor::zeros_like(g));
        for (std::size_t i = 0; i < g.size(); ++i) it->second[i] += g[i] * inv;
      }
    }
    report.losses.push_back(loss);
    if (on_step) on_step(step, loss);
    if (last) break;
    adam.step(params, grads);
  }
  return report;
}

}  // namespace pvflow
