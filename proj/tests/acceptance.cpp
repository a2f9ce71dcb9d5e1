// SPDX-License-Identifier: Apache-2.0
// One PASS/FAIL line per acceptance criterion. Exit status 0 iff all pass.
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <sstream>
#include <string>

#include "oracles.hpp"
#include "pvflow/cli.hpp"
#include "pvflow/fit.hpp"
#include "pvflow/gradcheck.hpp"
#include "pvflow/io.hpp"
#include "pvflow/metrics.hpp"

namespace fs = std::filesystem;
using namespace pvflow;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      if (!detail.empty()) detail += "; ";
      detail += what;
    }
  }
};

using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::string num(double v, const char* f = "%.3g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("pvflow_acceptance_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

int cli(const std::vector<std::string>& args, std::string* output = nullptr) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  if (output) *output = out.str() + err.str();
  return code;
}

// ---------------------------------------------------------------- criteria

Outcome oracle_equivalence() {
  Outcome o;
  const auto start = Clock::now();

  std::size_t knn_cases = 0;
  for (std::size_t n : {8u, 64u, 256u})
    for (std::size_t k : {1u, 4u, 7u, 16u}) {
      if (k >= n) continue;
      const PointCloud c = oracle::random_cloud(n, 1000 + n + k);
      const NeighborGraph g = knn(c, k);
      const auto ref = oracle::brute_knn(c, k);
      for (std::size_t i = 0; i < n; ++i)
        o.require(std::vector<std::size_t>(g.row(i).begin(), g.row(i).end()) == ref[i],
                  "knn mismatch n=" + std::to_string(n) + " k=" + std::to_string(k));
      ++knn_cases;
    }
  {
    PointCloud grid;  // integer lattice: many exactly equal distances
    for (int x = 0; x < 5; ++x)
      for (int y = 0; y < 5; ++y)
        for (int z = 0; z < 4; ++z) grid.positions.push_back({double(x), double(y), double(z)});
    const NeighborGraph g = knn(grid, 10);
    const auto ref = oracle::brute_knn(grid, 10);
    for (std::size_t i = 0; i < grid.size(); ++i)
      o.require(std::vector<std::size_t>(g.row(i).begin(), g.row(i).end()) == ref[i], "knn tie-break mismatch");
    ++knn_cases;
  }

  double attn_err = 0.0;
  for (int r : {4, 8})
    for (int W : {2, 4}) {
      if (W > r) continue;
      const PointCloud c = oracle::random_cloud(300, 77 + r * 10 + W);
      const NormalizedCloud nc = normalize_cloud(c);
      const VoxelLayout layout = make_voxel_layout(nc, r, W);
      const std::size_t d = 8, heads = 2;
      const AttentionSpec spec{"attn", d, heads};
      std::vector<ParamShape> shapes;
      append_attention_shapes(shapes, spec);
      const ParamStore params = init_params(shapes, 5);
      const Tensor x = oracle::random_tensor(layout.grid.size(), d, 11);
      const std::size_t cells = static_cast<std::size_t>(r) * r * r;
      Tensor dense(cells, d);
      std::vector<bool> occupied(cells, false);
      std::vector<std::size_t> flat(layout.grid.size());
      for (std::size_t v = 0; v < layout.grid.size(); ++v) {
        const VoxelKey k = layout.grid.entries()[v].key;
        flat[v] = (static_cast<std::size_t>(k.u) * r + k.v) * r + k.w;
        occupied[flat[v]] = true;
        for (std::size_t ch = 0; ch < d; ++ch) dense(flat[v], ch) = x(v, ch);
      }
      for (int s = 0; s < 2; ++s) {
        Context ctx(params);
        const Tensor got =
            sparse_grid_attention(ctx, ctx.input(x), layout.positions[s], layout.groups[s], spec).value();
        const Tensor ref = oracle::dense_window_attention(dense, occupied, r, W, s == 1, heads, params.get("attn.wq"),
                                                         params.get("attn.wk"), params.get("attn.wv"),
                                                         params.get("attn.wo"), params.get("attn.pos"));
        for (std::size_t v = 0; v < layout.grid.size(); ++v)
          for (std::size_t ch = 0; ch < d; ++ch) attn_err = std::max(attn_err, std::abs(got(v, ch) - ref(flat[v], ch)));
      }
    }
  o.require(attn_err <= 1e-6, "attention error " + num(attn_err));

  double sk_err = 0.0;
  for (std::size_t n = 3; n <= 32; ++n)
    for (double eps : {0.03, 0.1}) {
      const Tensor cost = oracle::random_tensor(n, n, 500 + n, 0.0, 2.0);
      SinkhornOptions opts;
      opts.epsilon = eps;
      const TransportPlan plan = sinkhorn(cost, opts);
      const auto ref = oracle::sinkhorn_ld(cost, eps, plan.iterations);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
          sk_err = std::max(sk_err, static_cast<double>(std::abs(plan.values(i, j) - ref[i][j])));
    }
  o.require(sk_err <= 1e-6, "sinkhorn error " + num(sk_err));

  double tri_err = 0.0;
  for (int r : {2, 5, 8, 16}) {
    const PointCloud c = oracle::random_cloud(400, 900 + r);
    const NormalizedCloud nc = normalize_cloud(c);
    const Tensor feats = oracle::random_tensor(c.size(), 5, 31 + r);
    const Tensor got = devoxelize(voxelize(nc, feats, r), nc);
    const Tensor ref = oracle::trilinear_dense(nc.coords, feats, r);
    tri_err = std::max(tri_err, max_abs_diff(got, ref));
  }
  o.require(tri_err <= 1e-9, "trilinear error " + num(tri_err));

  const double secs = seconds_since(start);
  o.require(secs < 60.0, "runtime " + num(secs) + " s");
  o.detail = (o.detail.empty() ? "" : o.detail + " | ") + std::to_string(knn_cases) + " knn cases exact, attention " +
             num(attn_err) + ", sinkhorn " + num(sk_err) + ", trilinear " + num(tri_err) + ", " + num(secs, "%.1f") +
             " s";
  return o;
}

Outcome gradient_suite() {
  Outcome o;
  const auto start = Clock::now();
  double worst = 0.0;
  std::size_t checked = 0, skipped = 0;
  for (const auto& r : run_gradcheck_suite(7)) {
    o.require(r.passed, r.name + " rel " + num(r.max_rel_error));
    worst = std::max(worst, r.max_rel_error);
    checked += r.checked;
    skipped += r.skipped;
  }
  // The checker must reject a wrong gradient: d(sum x^2) reported as x instead of 2x.
  const auto wrong = grad_check(
      "negative_control",
      [](const std::vector<ad::Var>& v) {
        const ad::Var sq = ad::make_op(
            "bad_square", {v[0]},
            [](ad::Node& n) {
              n.value = n.parents[0]->value;
              for (auto& x : n.value.storage()) x *= x;
            },
            [](ad::Node& n) {
              Tensor& g = n.parents[0]->grad_buffer();
              for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * n.parents[0]->value[i];
            });
        return ad::sum(sq);
      },
      {oracle::random_tensor(4, 4, 3)}, GradCheckOptions{});
  o.require(!wrong.passed, "negative control was not detected");
  const double secs = seconds_since(start);
  o.require(secs < 300.0, "runtime " + num(secs) + " s");
  o.detail = (o.detail.empty() ? "" : o.detail + " | ") + "worst rel " + num(worst) + " over " +
             std::to_string(checked) + " coordinates (" + std::to_string(skipped) +
             " at kinks skipped), negative control rejected, " + num(secs, "%.1f") + " s";
  return o;
}

Outcome conservation() {
  Outcome o;
  double marg = 0.0;
  for (std::size_t n : {16u, 64u, 256u}) {
    const Tensor cost = matching_cost(oracle::random_tensor(n, 16, n), oracle::random_tensor(n, 16, n + 1));
    SinkhornOptions opts;
    opts.max_iters = 5000;
    const TransportPlan plan = sinkhorn(cost, opts);
    o.require(plan.converged, "sinkhorn did not converge at n=" + std::to_string(n));
    marg = std::max(marg, max_marginal_error(plan.values));
  }
  o.require(marg <= 1e-6, "marginal error " + num(marg));
  // For reference only: the default iteration budget stops short of the tolerance.
  double capped = 0.0;
  {
    const Tensor cost = matching_cost(oracle::random_tensor(256, 16, 256), oracle::random_tensor(256, 16, 257));
    capped = sinkhorn(cost, SinkhornOptions{}).marginal_error;
  }

  double weight_err = 0.0, softmax_err = 0.0;
  bool counts_ok = true;
  for (int r : {4, 16}) {
    const PointCloud c = oracle::random_cloud(500, 40 + r);
    const NormalizedCloud nc = normalize_cloud(c);
    const SparseVoxelGrid grid(nc, r);
    std::size_t total = 0;
    for (const auto& e : grid.entries()) total += e.count;
    counts_ok = counts_ok && total == c.size();
    const auto map = trilinear_map(grid, nc);
    for (std::size_t i = 0; i < map->output_rows(); ++i) {
      double s = 0.0;
      for (std::size_t k = map->offsets[i]; k < map->offsets[i + 1]; ++k) s += map->weight[k];
      weight_err = std::max(weight_err, std::abs(s - 1.0));
    }
  }
  o.require(counts_ok, "voxel member counts do not sum to N");
  o.require(weight_err <= 1e-12, "devoxelization weight error " + num(weight_err));
  const Tensor sm = ad::softmax_rows(ad::constant(oracle::random_tensor(200, 64, 9, -30.0, 30.0))).value();
  for (std::size_t i = 0; i < sm.rows(); ++i) {
    double s = 0.0;
    for (double v : sm.row(i)) s += v;
    softmax_err = std::max(softmax_err, std::abs(s - 1.0));
  }
  o.require(softmax_err <= 1e-12, "softmax row error " + num(softmax_err));
  o.detail = (o.detail.empty() ? "" : o.detail + " | ") + "marginals " + num(marg) + " run to tolerance (" + num(capped) +
             " after the default 30 iterations), devox weights " +
             num(weight_err) + ", counts " + (counts_ok ? "exact" : "wrong") + ", softmax " + num(softmax_err);
  return o;
}

Outcome rigid_translation() {
  Outcome o;
  const auto start = Clock::now();
  const PipelineConfig pc;
  const ParamStore params = init_params(pc.model.param_shapes(), 42);
  double worst = 0.0;
  for (std::uint64_t c = 0; c < 20; ++c) {
    const PointCloud s = oracle::random_cloud(512, 2024 + c);
    PointCloud t = s;
    FlowField gt;
    gt.vectors = Tensor(512, 3);
    for (std::size_t i = 0; i < 512; ++i) {
      t.positions[i].x += 0.3;
      gt.vectors(i, 0) = 0.3;
    }
    const double e = epe(estimate(s, t, params, pc).refined, gt);
    worst = std::max(worst, e);
    o.require(e <= 0.03, "cloud " + std::to_string(c) + " EPE " + num(e));
  }
  const double secs = seconds_since(start);
  o.require(secs < 120.0, "runtime " + num(secs) + " s");
  o.detail = (o.detail.empty() ? "" : o.detail + " | ") + "worst EPE " + num(worst, "%.4f") + " over 20 clouds, " +
             num(secs, "%.1f") + " s";
  return o;
}

Outcome refinement_monotonicity() {
  Outcome o;
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<std::size_t> size(10, 120);
  std::normal_distribution<double> noise(0.0, 0.2);
  double worst_rise = 0.0, worst_final = 0.0;
  for (int inst = 0; inst < 100; ++inst) {
    const std::size_t n = size(rng);
    const PointCloud src = oracle::random_cloud(n, 7000 + inst);
    Tensor corr(n, 3), flow0(n, 3);
    for (std::size_t i = 0; i < n; ++i) {
      corr(i, 0) = src.positions[i].x + 0.3 + noise(rng);
      corr(i, 1) = src.positions[i].y + noise(rng);
      corr(i, 2) = src.positions[i].z + noise(rng);
      for (int a = 0; a < 3; ++a) flow0(i, a) = noise(rng);
    }
    const NeighborGraph graph = knn_with_fallback(src, 8);
    FlowField init;
    init.vectors = flow0;
    RefineOptions opts;
    const RefineResult r = refine_flow(src, corr, init, graph, opts);
    for (std::size_t k = 1; k < r.objective.size(); ++k)
      worst_rise = std::max(worst_rise, r.objective[k] - r.objective[k - 1]);
    opts.lambda_smooth = 0.0;
    const RefineResult r0 = refine_flow(src, corr, init, graph, opts);
    worst_final = std::max(worst_final, r0.objective.back());
  }
  o.require(worst_rise <= 0.0, "objective rose by " + num(worst_rise));
  o.require(worst_final <= 1e-10, "final J with lambda 0 is " + num(worst_final));
  o.detail = (o.detail.empty() ? "" : o.detail + " | ") + "100 instances, largest step change " + num(worst_rise) +
             ", worst final J (lambda 0) " + num(worst_final);
  return o;
}

Outcome metric_correctness() {
  Outcome o;
  auto field = [](std::size_t n, std::function<Vec3(std::size_t)> f) {
    FlowField ff;
    ff.vectors = Tensor(n, 3);
    for (std::size_t i = 0; i < n; ++i) {
      const Vec3 v = f(i);
      ff.vectors(i, 0) = v.x;
      ff.vectors(i, 1) = v.y;
      ff.vectors(i, 2) = v.z;
    }
    return ff;
  };
  const FlowField gt = field(10, [](std::size_t i) { return Vec3{0.1 * i, 0.2, -0.05}; });
  const EvalReport same = evaluate(gt, gt);
  o.require(same.epe == 0.0 && same.as_pct == 100.0 && same.ar_pct == 100.0 && same.out_pct == 0.0, "pred = gt");
  const FlowField shifted = field(10, [](std::size_t i) { return Vec3{0.1 * i + 0.3, 0.2, -0.05}; });
  o.require(std::abs(epe(shifted, gt) - 0.3) < 1e-12, "EPE of a 0.3 m shift");
  const FlowField big = field(8, [](std::size_t) { return Vec3{0.0, 0.0, 0.5}; });
  const FlowField off4 = field(8, [](std::size_t) { return Vec3{0.04, 0.0, 0.5}; });
  o.require(accuracy_strict(off4, big) == 100.0, "0.04 m error must be strict-accurate");
  const FlowField unit = field(10, [](std::size_t) { return Vec3{1.0, 0.0, 0.0}; });
  const FlowField half = field(10, [](std::size_t i) { return Vec3{i < 5 ? 1.2 : 1.0, 0.0, 0.0}; });
  o.require(accuracy_strict(half, unit) == 50.0, "half off by 0.2 m must give AS 50");
  const FlowField all1 = field(10, [](std::size_t) { return Vec3{2.0, 0.0, 0.0}; });
  o.require(outliers(all1, unit) == 100.0, "all off by 1 m must be outliers");

  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1.0, 1.0), scale(0.0, 0.6);
  double direct_err = 0.0;
  bool order_ok = true, overlap_ok = true;
  for (int inst = 0; inst < 1000; ++inst) {
    const std::size_t n = 100;
    FlowField p, g;
    p.vectors = Tensor(n, 3);
    g.vectors = Tensor(n, 3);
    const double s = scale(rng);
    for (std::size_t i = 0; i < n * 3; ++i) {
      g.vectors[i] = u(rng);
      p.vectors[i] = g.vectors[i] + s * u(rng);
    }
    const EvalReport rep = evaluate(p, g);
    const auto ref = oracle::recount(p.vectors, g.vectors);
    direct_err = std::max({direct_err, std::abs(rep.epe - ref.epe), std::abs(rep.as_pct - ref.strict),
                           std::abs(rep.ar_pct - ref.relaxed), std::abs(rep.out_pct - ref.outliers)});
    order_ok = order_ok && rep.ar_pct >= rep.as_pct;
    // With |gt| in [0.5, 2] the strict set (error < 5 cm or < 5 %) cannot meet
    // the outlier set (error > 30 cm or > 10 %), so Out <= 100 - AS.
    FlowField gb = g, pb = p;
    for (std::size_t i = 0; i < n; ++i) {
      const double len = std::sqrt(g.vectors(i, 0) * g.vectors(i, 0) + g.vectors(i, 1) * g.vectors(i, 1) +
                                   g.vectors(i, 2) * g.vectors(i, 2));
      const double k = (0.5 + 1.5 * (0.5 + 0.5 * u(rng))) / std::max(len, 1e-9);
      for (int a = 0; a < 3; ++a) {
        gb.vectors(i, a) = g.vectors(i, a) * k;
        pb.vectors(i, a) = gb.vectors(i, a) + (p.vectors(i, a) - g.vectors(i, a));
      }
    }
    overlap_ok = overlap_ok && outliers(pb, gb) <= 100.0 - accuracy_strict(pb, gb);
  }
  o.require(direct_err <= 1e-12, "recount mismatch " + num(direct_err));
  o.require(order_ok, "AR < AS on some instance");
  o.require(overlap_ok, "Out > 100 - AS on some instance");

  std::vector<ParamShape> one;
  append_linear_shapes(one, "l", 3, 3, true);
  o.require(count_params(one) == 12, "3->3 linear with bias must have 12 parameters");
  o.require(count_params({}) == 0, "empty model must have 0 parameters");
  o.detail = (o.detail.empty() ? "" : o.detail + " | ") + "hand cases exact, 1000 random instances: recount diff " +
             num(direct_err) + ", AR >= AS " + (order_ok ? "always" : "violated");
  return o;
}

void write_cloud_file(const fs::path& p, const PointCloud& c) { write_cloud(p.string(), c); }

Outcome determinism() {
  Outcome o;
  const fs::path dir = scratch_dir("determinism");
  const PointCloud s = oracle::random_cloud(400, 31);
  PointCloud t = s;
  std::mt19937_64 rng(8);
  std::normal_distribution<double> jitter(0.0, 0.01);
  for (auto& p : t.positions) p = p + Vec3{0.2 + jitter(rng), 0.05 + jitter(rng), jitter(rng)};
  write_cloud_file(dir / "s.sfpc", s);
  write_cloud_file(dir / "t.sfpc", t);
  const std::string w = (dir / "w.pvwt").string();
  o.require(cli({"init-weights", "--seed", "3", "--out", w}) == 0, "init-weights failed");
  std::vector<std::string> outputs;
  for (const char* threads : {"1", "1", "2", "4", "7"}) {
    const std::string out = (dir / ("flow_" + std::to_string(outputs.size()) + ".sffl")).string();
    std::string log;
    const int code = cli({"--threads", threads, "--deterministic", "true", "estimate", "--source",
                          (dir / "s.sfpc").string(), "--target", (dir / "t.sfpc").string(), "--weights", w, "--out",
                          out},
                         &log);
    o.require(code == 0, "estimate failed: " + log);
    outputs.push_back(slurp(out));
  }
  bool same = !outputs.front().empty();
  for (const auto& b : outputs) same = same && b == outputs.front();
  o.require(same, "flow files differ");
  o.detail = (o.detail.empty() ? "" : o.detail + " | ") + "5 runs (threads 1,1,2,4,7) byte-identical: " +
             (same ? "yes" : "no") + " (" + std::to_string(outputs.front().size()) + " bytes)";
  return o;
}

Outcome desk_fit() {
  Outcome o;
  const auto start = Clock::now();
  const fs::path dir = scratch_dir("fit");
  std::mt19937_64 rng(123);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int p = 0; p < 10; ++p) {
    const PointCloud s = oracle::random_cloud(256, 600 + p);
    const double ang = 0.05 * u(rng);
    const Vec3 tr{0.1 * u(rng), 0.1 * u(rng), 0.05 * u(rng)};
    PointCloud t;
    FlowField gt;
    gt.vectors = Tensor(256, 3);
    for (std::size_t i = 0; i < 256; ++i) {
      const Vec3 q = s.positions[i];
      const Vec3 m = Vec3{std::cos(ang) * q.x - std::sin(ang) * q.y, std::sin(ang) * q.x + std::cos(ang) * q.y, q.z} + tr;
      t.positions.push_back(m);
      gt.vectors(i, 0) = m.x - q.x;
      gt.vectors(i, 1) = m.y - q.y;
      gt.vectors(i, 2) = m.z - q.z;
    }
    const std::string base = (dir / ("pair" + std::to_string(p))).string();
    write_cloud(base + "_s.sfpc", s);
    write_cloud(base + "_t.sfpc", t);
    write_flow(base + "_gt.sffl", gt);
  }
  const std::string cfg = (dir / "fit.cfg").string();
  {
    std::ofstream os(cfg);
    os << "# reduced encoder for desk-scale fitting\n"
          "k_sc = 8\nD_s = 16\nwidth1 = 16\nwidth2 = 32\nD = 32\nr = 8\nW = 4\n"
          "fit_steps = 200\nlearning_rate = 0.01\nseed = 42\n";
  }
  const std::string init = (dir / "init.pvwt").string(), fitted = (dir / "fitted.pvwt").string();
  std::string log;
  o.require(cli({"--config", cfg, "init-weights", "--out", init}) == 0, "init-weights failed");
  const int code = cli({"--config", cfg, "fit", "--pairs", dir.string(), "--init", init, "--weights", fitted}, &log);
  o.require(code == 0, "fit failed: " + log);
  if (code != 0) return o;

  auto value = [&](const std::string& key) {
    const auto at = log.find(key + "=");
    return at == std::string::npos ? -1.0 : std::stod(log.substr(at + key.size() + 1));
  };
  const double l0 = value("initial_loss"), l1 = value("final_loss");
  const double drop = 1.0 - l1 / l0;
  o.require(l0 > 0.0 && drop >= 0.5, "loss reduced only " + num(100 * drop, "%.1f") + " %");

  const Config c = Config::load(cfg);
  const auto pairs = load_pairs(dir.string());
  auto mean_epe = [&](const ParamStore& w) {
    double e = 0.0;
    for (const auto& p : pairs) e += epe(estimate(p.source, p.target, w, c.pipeline).refined, *p.ground_truth);
    return e / static_cast<double>(pairs.size());
  };
  const double e0 = mean_epe(read_pvwt(init)), e1 = mean_epe(read_pvwt(fitted));
  o.require(e1 < e0, "mean EPE did not improve: " + num(e0, "%.4f") + " -> " + num(e1, "%.4f"));
  o.detail = (o.detail.empty() ? "" : o.detail + " | ") + "loss " + num(l0, "%.4f") + " -> " + num(l1, "%.4f") + " (-" +
             num(100 * drop, "%.1f") + " %), mean EPE " + num(e0, "%.4f") + " -> " + num(e1, "%.4f") + ", " +
             num(seconds_since(start), "%.0f") + " s";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"oracle-equivalence", oracle_equivalence},
      {"gradient-suite", gradient_suite},
      {"conservation", conservation},
      {"rigid-translation", rigid_translation},
      {"refinement-monotonicity", refinement_monotonicity},
      {"metric-correctness", metric_correctness},
      {"determinism", determinism},
      {"desk-fit", desk_fit},
  };
  const std::string only = argc > 1 ? argv[1] : "";
  int failures = 0;
  for (const auto& [name, run] : criteria) {
    if (!only.empty() && only != name) continue;
    Outcome r;
    try {
      r = run();
    } catch (const std::exception& e) {
      r.pass = false;
      r.detail = std::string("exception: ") + e.what();
    }
    std::printf("%s %s: %s\n", r.pass ? "PASS" : "FAIL", name.c_str(), r.detail.c_str());
    std::fflush(stdout);
    failures += r.pass ? 0 : 1;
  }
  return failures == 0 ? 0 : 1;
}
