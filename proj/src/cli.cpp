// SPDX-License-Identifier: Apache-2.0
#include "pvflow/cli.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>

#include "CLI11.hpp"
#include "pvflow/fit.hpp"
#include "pvflow/gradcheck.hpp"
#include "pvflow/io.hpp"
#include "pvflow/metrics.hpp"
#include "pvflow/parallel.hpp"

namespace pvflow {
namespace {

std::ofstream open_text(const std::string& path) {
  std::ofstream os(path);
  if (!os) fail(ErrorCode::IoError, "cannot open " + path + " for writing");
  return os;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

struct Options {
  std::string config_path;
  std::optional<std::size_t> threads;
  std::map<std::string, std::string> overrides;
  std::vector<std::string> sets;

  std::string source, target, weights, out, dump_corr, plot, gt;
  std::string pred, cloud, pairs, init;
  std::optional<std::uint64_t> seed;
  bool json = false;
};

Config resolve_config(const Options& o) {
  Config c = o.config_path.empty() ? Config{} : Config::load(o.config_path);
  for (const auto& [key, value] : o.overrides) c.set(key, value);
  for (const auto& kv : o.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) fail(ErrorCode::InvalidConfig, "--set expects key=value, got '" + kv + "'");
    c.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.threads) c.threads = *o.threads;
  c.pipeline.single_precision = c.single_precision;
  c.validate();
  set_num_threads(static_cast<int>(c.threads));
  return c;
}

ParamStore load_or_init(const std::string& path, const Config& c) {
  return path.empty() ? init_params(c.pipeline.model.param_shapes(), c.seed) : read_pvwt(path);
}

int cmd_estimate(const Options& o, std::ostream& out) {
  const Config c = resolve_config(o);
  const PointCloud source = read_cloud(o.source);
  const PointCloud target = read_cloud(o.target);
  const ParamStore params = read_pvwt(o.weights);
  const EstimateResult r = estimate(source, target, params, c.pipeline);
  write_flow(o.out, r.refined);
  if (!o.dump_corr.empty()) {
    std::ofstream os = open_text(o.dump_corr);
    os << "i,cx,cy,cz,fallback\n";
    std::vector<bool> fallback(source.size(), false);
    for (std::size_t i : r.zero_rows) fallback[i] = true;
    char line[160];
    for (std::size_t i = 0; i < source.size(); ++i) {
      std::snprintf(line, sizeof line, "%zu,%.9g,%.9g,%.9g,%d\n", i, r.correspondences(i, 0), r.correspondences(i, 1),
                    r.correspondences(i, 2), fallback[i] ? 1 : 0);
      os << line;
    }
  }
  if (!o.plot.empty()) {
    std::optional<FlowField> gt;
    if (!o.gt.empty()) gt = read_flow(o.gt);
    if (gt && gt->size() != source.size()) fail(ErrorCode::ShapeError, "ground truth does not match the source");
    std::ofstream os = open_text(o.plot);
    os << "x,y,z,fx,fy,fz" << (gt ? ",error\n" : "\n");
    char line[200];
    for (std::size_t i = 0; i < source.size(); ++i) {
      const Vec3 p = source.positions[i];
      const Vec3 f{r.refined.vectors(i, 0), r.refined.vectors(i, 1), r.refined.vectors(i, 2)};
      int len = std::snprintf(line, sizeof line, "%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", p.x, p.y, p.z, f.x, f.y, f.z);
      if (gt) {
        const Vec3 g{gt->vectors(i, 0), gt->vectors(i, 1), gt->vectors(i, 2)};
        std::snprintf(line + len, sizeof line - len, ",%.9g", norm(f - g));
      }
      os << line << "\n";
    }
  }
  out << "points=" << source.size() << "\n"
      << "sinkhorn_iterations=" << r.plan.iterations << "\n"
      << "sinkhorn_converged=" << (r.plan.converged ? "true" : "false") << "\n"
      << "marginal_error=" << fmt("%.3g", r.plan.marginal_error) << "\n"
      << "fallback_rows=" << r.zero_rows.size() << "\n"
      << "refine_steps=" << r.refinement.accepted_steps << "\n"
      << "objective=" << fmt("%.6g", r.refinement.objective.front()) << " -> "
      << fmt("%.6g", r.refinement.objective.back()) << "\n";
  return kExitOk;
}

int cmd_eval(const Options& o, std::ostream& out) {
  const Config c = resolve_config(o);
  const FlowField pred = read_flow(o.pred);
  const FlowField gt = read_flow(o.gt);
  EvalReport report = evaluate(pred, gt);
  const Complexity cx = count_params_flops(c.pipeline.model, pred.size());
  report.params_m = cx.params_m();
  report.flops_g = cx.flops_g();
  out << (o.json ? to_json(report) + "\n" : to_key_value(report));
  return kExitOk;
}

int cmd_features(const Options& o, std::ostream& out) {
  const Config c = resolve_config(o);
  const PointCloud cloud = read_cloud(o.cloud);
  const ParamStore params = load_or_init(o.weights, c);
  const Tensor f = usfe(cloud, c.pipeline.model.k_usfe, params, c.pipeline.model.usfe_mlp());
  write_features(o.out, f);
  out << "points=" << f.rows() << "\nchannels=" << f.cols() << "\n";
  return kExitOk;
}

int cmd_gradcheck(const Options& o, std::ostream& out) {
  const Config c = resolve_config(o);
  bool ok = true;
  char line[160];
  for (const auto& r : run_gradcheck_suite(c.seed)) {
    std::snprintf(line, sizeof line, "%-4s %-20s max_rel=%.2e checked=%zu skipped=%zu\n", r.passed ? "PASS" : "FAIL",
                  r.name.c_str(), r.max_rel_error, r.checked, r.skipped);
    out << line;
    ok = ok && r.passed;
  }
  out << (ok ? "gradcheck: all passed\n" : "gradcheck: FAILED\n");
  return ok ? kExitOk : kExitPipelineError;
}

int cmd_fit(const Options& o, std::ostream& out) {
  const Config c = resolve_config(o);
  const auto pairs = load_pairs(o.pairs);
  ParamStore params = load_or_init(o.init, c);
  const std::size_t every = std::max<std::size_t>(1, c.fit_steps / 10);
  const FitReport report = fit(params, pairs, c.pipeline, c.fit_steps, c.learning_rate, [&](std::size_t step, double loss) {
    if (step % every == 0 || step == c.fit_steps) out << "step " << step << " loss " << fmt("%.6g", loss) << "\n";
  });
  write_pvwt(o.weights, params);
  out << "pairs=" << pairs.size() << "\n"
      << "initial_loss=" << fmt("%.6g", report.initial_loss()) << "\n"
      << "final_loss=" << fmt("%.6g", report.final_loss()) << "\n";
  return kExitOk;
}

int cmd_init(const Options& o, std::ostream& out) {
  Config c = resolve_config(o);
  if (o.seed) c.seed = *o.seed;
  const ParamStore params = init_params(c.pipeline.model.param_shapes(), c.seed);
  write_pvwt(o.out, params);
  out << "tensors=" << params.entries().size() << "\nparameters=" << params.parameter_count() << "\n";
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Scene-flow estimation with point-voxel fusion"};
  app.require_subcommand(1);
  Options o;
  app.add_option("--config", o.config_path, "File of `key = value` lines")->check(CLI::ExistingFile);
  app.add_option("--threads", o.threads, "Worker threads");
  app.add_option("--set", o.sets, "Override any config key as key=value");
  for (const auto& key : Config::keys()) {
    if (key == "threads") continue;
    app.add_option_function<std::string>(
        "--" + key, [&o, key](const std::string& v) { o.overrides[key] = v; }, "Config override");
  }

  auto* est = app.add_subcommand("estimate", "Estimate flow from source to target");
  est->add_option("--source", o.source)->required();
  est->add_option("--target", o.target)->required();
  est->add_option("--weights", o.weights)->required();
  est->add_option("--out", o.out, "SFFL output")->required();
  est->add_option("--dump-correspondences", o.dump_corr, "CSV of soft correspondences");
  est->add_option("--plot", o.plot, "CSV of per-point flow (and error with --gt)");
  est->add_option("--gt", o.gt, "Ground-truth SFFL for --plot");

  auto* ev = app.add_subcommand("eval", "Compare a predicted flow to ground truth");
  ev->add_option("--pred", o.pred)->required();
  ev->add_option("--gt", o.gt)->required();
  ev->add_flag("--json", o.json);

  auto* feat = app.add_subcommand("features", "Dump surface features of a cloud");
  feat->add_option("--cloud", o.cloud)->required();
  feat->add_option("--out", o.out)->required();
  feat->add_option("--weights", o.weights, "PVWT file (default: seeded init)");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient suite");

  auto* ft = app.add_subcommand("fit", "Self-supervised fitting on a directory of pairs");
  ft->add_option("--pairs", o.pairs)->required();
  ft->add_option("--weights", o.weights, "Output PVWT")->required();
  ft->add_option("--init", o.init, "Starting PVWT (default: seeded init)");

  auto* iw = app.add_subcommand("init-weights", "Write seeded random weights");
  iw->add_option("--seed", o.seed);
  iw->add_option("--out", o.out)->required();

  std::vector<std::string> storage{"pvflow"};
  storage.insert(storage.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& s : storage) argv.push_back(s.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n" << app.help();
    return kExitUsage;
  }

  try {
    if (*est) return cmd_estimate(o, out);
    if (*ev) return cmd_eval(o, out);
    if (*feat) return cmd_features(o, out);
    if (*gc) return cmd_gradcheck(o, out);
    if (*ft) return cmd_fit(o, out);
    if (*iw) return cmd_init(o, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitPipelineError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitPipelineError;
  }
  return kExitUsage;
}

}  // namespace pvflow
