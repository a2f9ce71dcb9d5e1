// SPDX-License-Identifier: Apache-2.0
#include "pvflow/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "pvflow/correspondence.hpp"

namespace pvflow {
namespace {

std::vector<std::size_t> sample_indices(std::size_t size, std::size_t count, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(size);
  for (std::size_t i = 0; i < size; ++i) idx[i] = i;
  if (size <= count) return idx;
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

double scalar_of(const ad::Var& v) {
  if (v.rows() != 1 || v.cols() != 1) fail(ErrorCode::ShapeError, "gradcheck function must return 1x1");
  return v.value()[0];
}

// One coordinate: analytic vs central difference, folded into result. When
// the differences at h and h/2 disagree the stencil straddles a kink (max
// switch, leaky ReLU at 0), the derivative is undefined there and the
// coordinate is counted as skipped instead.
template <typename Eval>
void check_coordinate(double& theta, double analytic, const Eval& eval, const GradCheckOptions& o,
                      GradCheckResult& result) {
  const double saved = theta;
  const double h = o.step * std::max(1.0, std::abs(saved));
  double scale = 1.0;
  auto central = [&](double step) {
    theta = saved + step;
    const double up = eval();
    theta = saved - step;
    const double down = eval();
    theta = saved;
    scale = std::max({scale, std::abs(up), std::abs(down)});
    return (up - down) / (2.0 * step);
  };
  const double wide = central(h);
  const double narrow = central(0.5 * h);
  // Round-off in up - down grows with |L|, so the floor does too.
  const double floor = o.floor * scale;
  if (gradient_rel_error(wide, narrow, floor) > 0.5 * o.tolerance) {
    ++result.skipped;
    return;
  }
  result.max_rel_error = std::max(result.max_rel_error, gradient_rel_error(analytic, narrow, floor));
  ++result.checked;
}

Tensor random_tensor(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(rows, cols);
  for (auto& v : t.storage()) v = u(rng);
  return t;
}

PointCloud random_cloud(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  PointCloud c;
  for (std::size_t i = 0; i < n; ++i) c.positions.push_back({u(rng), u(rng), 0.5 * u(rng)});
  return c;
}

// Contract an arbitrary output with fixed random weights so every entry matters.
ad::Var contract(const ad::Var& y, const Tensor& weights) { return ad::sum(ad::mul(y, ad::constant(weights))); }

bool finish(const GradCheckResult& r, const GradCheckOptions& o) {
  const std::size_t total = r.checked + r.skipped;
  return r.checked > 0 && r.max_rel_error < o.tolerance &&
         static_cast<double>(r.skipped) <= o.max_skipped_fraction * static_cast<double>(total);
}

}  // namespace

double gradient_rel_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

GradCheckResult grad_check(const std::string& name, const ScalarFn& fn, const std::vector<Tensor>& inputs,
                           const GradCheckOptions& options) {
  GradCheckResult result;
  result.name = name;
  ad::Tape tape;
  std::vector<ad::Var> leaves;
  for (const Tensor& t : inputs) leaves.push_back(tape.leaf(t));
  tape.backward(fn(leaves));

  std::vector<Tensor> values = inputs;
  auto eval = [&] {
    std::vector<ad::Var> vars;
    for (const Tensor& t : values) vars.push_back(ad::constant(t));
    return scalar_of(fn(vars));
  };
  std::mt19937_64 rng(options.seed);
  for (std::size_t t = 0; t < values.size(); ++t) {
    const Tensor& g = leaves[t].grad();
    for (std::size_t i : sample_indices(values[t].size(), options.samples_per_tensor, rng)) {
      check_coordinate(values[t][i], g.empty() ? 0.0 : g[i], eval, options, result);
    }
  }
  result.passed = finish(result, options);
  return result;
}

GradCheckResult grad_check_params(const std::string& name, const ParamFn& fn, const ParamStore& params,
                                  const GradCheckOptions& options) {
  GradCheckResult result;
  result.name = name;
  ad::Tape tape;
  Context ctx(params, &tape);
  tape.backward(fn(ctx));
  const auto grads = ctx.gradients();

  ParamStore work = params;
  auto eval = [&] {
    Context plain(work);
    return scalar_of(fn(plain));
  };
  std::mt19937_64 rng(options.seed);
  for (const auto& [pname, g] : grads) {
    Tensor& value = work.get_mut(pname);
    for (std::size_t i : sample_indices(value.size(), options.samples_per_tensor, rng)) {
      check_coordinate(value[i], g[i], eval, options, result);
    }
  }
  result.passed = finish(result, options);
  return result;
}

std::vector<GradCheckResult> run_gradcheck_suite(std::uint64_t seed) {
  using ad::Var;
  std::mt19937_64 rng(seed);
  GradCheckOptions opt;
  opt.seed = seed;
  std::vector<GradCheckResult> out;
  auto op = [&](const std::string& name, std::size_t rows, std::size_t cols, const ScalarFn& body,
                std::vector<Tensor> inputs) {
    const Tensor w = random_tensor(rows, cols, rng);
    out.push_back(grad_check(name, [&](const std::vector<Var>& v) { return contract(body(v), w); }, inputs, opt));
  };

  const std::size_t n = 12, d = 8;
  auto x = [&] { return random_tensor(n, d, rng); };

  op("add", n, d, [](const auto& v) { return ad::add(v[0], v[1]); }, {x(), x()});
  op("sub", n, d, [](const auto& v) { return ad::sub(v[0], v[1]); }, {x(), x()});
  op("mul", n, d, [](const auto& v) { return ad::mul(v[0], v[1]); }, {x(), x()});
  op("scale", n, d, [](const auto& v) { return ad::scale(v[0], -2.5); }, {x()});
  op("add_scalar", n, d, [](const auto& v) { return ad::add_scalar(v[0], 0.7); }, {x()});
  op("exp", n, d, [](const auto& v) { return ad::exp(v[0]); }, {x()});
  op("leaky_relu", n, d, [](const auto& v) { return ad::leaky_relu(v[0], 0.1); }, {x()});
  op("add_row", n, d, [](const auto& v) { return ad::add_row(v[0], v[1]); }, {x(), random_tensor(1, d, rng)});
  op("add_col", n, d, [](const auto& v) { return ad::add_col(v[0], v[1]); }, {x(), random_tensor(n, 1, rng)});
  op("linear", n, 5, [](const auto& v) { return ad::linear(v[0], v[1], v[2]); },
     {x(), random_tensor(5, d, rng), random_tensor(1, 5, rng)});
  op("matmul", n, 5, [](const auto& v) { return ad::matmul(v[0], v[1]); }, {x(), random_tensor(d, 5, rng)});
  op("transpose", d, n, [](const auto& v) { return ad::transpose(v[0]); }, {x()});
  op("instance_norm", n, d, [](const auto& v) { return ad::instance_norm(v[0]); }, {x()});
  op("softmax_rows", n, d, [](const auto& v) { return ad::softmax_rows(v[0]); }, {x()});
  op("logsumexp_rows", n, 1, [](const auto& v) { return ad::logsumexp_rows(v[0]); }, {x()});
  op("logsumexp_cols", 1, d, [](const auto& v) { return ad::logsumexp_cols(v[0]); }, {x()});
  op("normalize_rows_l2", n, d, [](const auto& v) { return ad::normalize_rows_l2(v[0]); }, {x()});
  op("normalize_rows_l1", n, d, [](const auto& v) { return ad::normalize_rows_l1(v[0]); },
     {random_tensor(n, d, rng, 0.1, 1.0)});
  op("sum", 1, 1, [](const auto& v) { return ad::sum(v[0]); }, {x()});
  op("mean", 1, 1, [](const auto& v) { return ad::mean(v[0]); }, {x()});
  {
    auto map = std::make_shared<ad::SparseRows>();
    map->input_rows = n;
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    for (std::size_t r = 0; r < 7; ++r) {
      for (int k = 0; k < 3; ++k) map->push(pick(rng), random_tensor(1, 1, rng)[0]);
      map->end_row();
    }
    op("sparse_rows", 7, d, [map](const auto& v) { return ad::sparse_rows(v[0], map); }, {x()});
  }
  op("group_max", n / 4, d, [](const auto& v) { return ad::group_max(v[0], 4); }, {x()});
  op("concat_cols", n, d + 3, [](const auto& v) { return ad::concat_cols({v[0], v[1]}); },
     {x(), random_tensor(n, 3, rng)});
  op("slice_cols", n, 3, [](const auto& v) { return ad::slice_cols(v[0], 2, 3); }, {x()});
  {
    auto windows = std::make_shared<const std::vector<std::vector<std::size_t>>>(
        std::vector<std::vector<std::size_t>>{{0, 3, 5, 7}, {1, 2}, {4, 6, 8, 9, 10}, {11}});
    op("window_attention", n, d, [windows](const auto& v) { return ad::window_attention(v[0], v[1], v[2], windows, 2); },
       {x(), x(), x()});
  }
  {
    auto targets = std::make_shared<const Tensor>(random_tensor(20, 3, rng));
    op("nearest_sq_dist", n, 1, [targets](const auto& v) { return ad::nearest_sq_dist(v[0], targets); },
       {random_tensor(n, 3, rng)});
  }

  // Modules, differentiated with respect to their parameters (and inputs where they take any).
  ModelConfig model;
  model.k_usfe = 6;
  model.k_sc = 5;
  model.resolution = 4;
  model.window = 2;
  model.heads = 2;
  model.surface_dim = 6;
  model.width1 = 8;
  model.width2 = 12;
  model.embed_dim = 16;
  const std::size_t pts = 24;
  const PointCloud cloud = random_cloud(pts, rng);
  const CloudLayout layout = prepare_cloud(cloud, model);
  const ParamStore params = init_params(model.param_shapes(), seed);
  auto module = [&](const std::string& name, std::size_t rows, std::size_t cols, const ParamFn& body,
                    const GradCheckOptions& o) {
    const Tensor w = random_tensor(rows, cols, rng);
    out.push_back(grad_check_params(name, [&](Context& ctx) { return contract(body(ctx), w); }, params, o));
  };

  {
    const MlpSpec spec{"point.layer1.mlp", {model.input_width() + 3, model.width1, model.width1}, true, model.slope};
    const Tensor in = random_tensor(pts, model.input_width() + 3, rng);
    module("mlp", pts, model.width1, [&](Context& ctx) { return mlp_forward(ctx, ctx.input(in), spec); }, opt);
  }
  module("usfe", pts, model.surface_dim, [&](Context& ctx) { return usfe(ctx, layout.umbrella, model.usfe_mlp()); },
         opt);
  {
    const Tensor feats = random_tensor(pts, model.input_width(), rng);
    module("set_conv", pts, model.width1,
           [&](Context& ctx) { return set_conv(ctx, layout.set_conv, ctx.input(feats), model.point_mlp(1)); }, opt);
    module("voxel_stage", pts, model.width1,
           [&](Context& ctx) { return voxel_stage(ctx, layout.voxels, ctx.input(feats), model.voxel_spec(1)); }, opt);
    // Input side of the voxel stage: voxelize (mean), attention, devoxelize.
    const Tensor w = random_tensor(pts, model.width1, rng);
    out.push_back(grad_check(
        "voxel_stage_input",
        [&](const std::vector<Var>& v) {
          Context ctx(params);
          return contract(voxel_stage(ctx, layout.voxels, v[0], model.voxel_spec(1)), w);
        },
        {feats}, opt));
  }
  module("embed", pts, model.embed_dim, [&](Context& ctx) { return encode(ctx, layout, model).features; }, opt);

  {
    PointCloud target = random_cloud(16, rng);
    PointCloud source;
    source.positions.assign(cloud.positions.begin(), cloud.positions.begin() + 16);
    const CloudLayout src = prepare_cloud(source, model);
    const CloudLayout tgt = prepare_cloud(target, model);
    const NeighborGraph graph = knn_with_fallback(source, 4);
    PipelineConfig pc;
    pc.model = model;
    pc.sinkhorn.max_iters = 10;
    GradCheckOptions chain = opt;
    chain.tolerance = 1e-3;
    out.push_back(grad_check_params(
        "loss_chain", [&](Context& ctx) { return pair_loss(ctx, src, tgt, graph, pc).loss; }, params, chain));
  }
  return out;
}

}  // namespace pvflow
