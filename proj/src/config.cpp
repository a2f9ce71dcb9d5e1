// SPDX-License-Identifier: Apache-2.0
#include "pvflow/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace pvflow {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value) {
  fail(ErrorCode::InvalidConfig, "bad value '" + value + "' for " + key);
}

template <typename T>
T parse_uint(const std::string& key, const std::string& value) {
  T out{};
  const auto* end = value.data() + value.size();
  const auto r = std::from_chars(value.data(), end, out);
  if (r.ec != std::errc() || r.ptr != end) bad_value(key, value);
  return out;
}

double parse_real(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size() || !std::isfinite(v)) bad_value(key, value);
    return v;
  } catch (const std::logic_error&) {
    bad_value(key, value);
  }
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  bad_value(key, value);
}

std::string format_real(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);  // shortest round-trip form
  return std::string(buf, r.ptr);
}

struct Field {
  std::function<void(Config&, const std::string&, const std::string&)> set;
  std::function<std::string(const Config&)> get;
};

Field uint_field(std::function<std::size_t&(Config&)> ref) {
  return {[ref](Config& c, const std::string& k, const std::string& v) { ref(c) = parse_uint<std::size_t>(k, v); },
          [ref](const Config& c) { return std::to_string(ref(const_cast<Config&>(c))); }};
}

Field int_field(std::function<int&(Config&)> ref) {
  return {[ref](Config& c, const std::string& k, const std::string& v) { ref(c) = parse_uint<int>(k, v); },
          [ref](const Config& c) { return std::to_string(ref(const_cast<Config&>(c))); }};
}

Field real_field(std::function<double&(Config&)> ref) {
  return {[ref](Config& c, const std::string& k, const std::string& v) { ref(c) = parse_real(k, v); },
          [ref](const Config& c) { return format_real(ref(const_cast<Config&>(c))); }};
}

Field bool_field(std::function<bool&(Config&)> ref) {
  return {[ref](Config& c, const std::string& k, const std::string& v) { ref(c) = parse_bool(k, v); },
          [ref](const Config& c) { return std::string(ref(const_cast<Config&>(c)) ? "true" : "false"); }};
}

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      {"seed",
       {[](Config& c, const std::string& k, const std::string& v) { c.seed = parse_uint<std::uint64_t>(k, v); },
        [](const Config& c) { return std::to_string(c.seed); }}},
      {"deterministic", bool_field([](Config& c) -> bool& { return c.deterministic; })},
      {"threads", uint_field([](Config& c) -> std::size_t& { return c.threads; })},
      {"mode",
       {[](Config& c, const std::string& k, const std::string& v) {
          if (v == "f32") c.single_precision = true;
          else if (v == "f64") c.single_precision = false;
          else bad_value(k, v);
        },
        [](const Config& c) { return std::string(c.single_precision ? "f32" : "f64"); }}},
      {"K_usfe", uint_field([](Config& c) -> std::size_t& { return c.pipeline.model.k_usfe; })},
      {"k_sc", uint_field([](Config& c) -> std::size_t& { return c.pipeline.model.k_sc; })},
      {"r", int_field([](Config& c) -> int& { return c.pipeline.model.resolution; })},
      {"W", int_field([](Config& c) -> int& { return c.pipeline.model.window; })},
      {"H", uint_field([](Config& c) -> std::size_t& { return c.pipeline.model.heads; })},
      {"D", uint_field([](Config& c) -> std::size_t& { return c.pipeline.model.embed_dim; })},
      {"D_s", uint_field([](Config& c) -> std::size_t& { return c.pipeline.model.surface_dim; })},
      {"width1", uint_field([](Config& c) -> std::size_t& { return c.pipeline.model.width1; })},
      {"width2", uint_field([](Config& c) -> std::size_t& { return c.pipeline.model.width2; })},
      {"leaky_slope", real_field([](Config& c) -> double& { return c.pipeline.model.slope; })},
      {"epsilon", real_field([](Config& c) -> double& { return c.pipeline.sinkhorn.epsilon; })},
      {"sinkhorn_iters", uint_field([](Config& c) -> std::size_t& { return c.pipeline.sinkhorn.max_iters; })},
      {"sinkhorn_tol", real_field([](Config& c) -> double& { return c.pipeline.sinkhorn.tol_marg; })},
      {"lambda_smooth", real_field([](Config& c) -> double& { return c.pipeline.refine.lambda_smooth; })},
      {"refine_steps", uint_field([](Config& c) -> std::size_t& { return c.pipeline.refine.steps; })},
      {"step_size", real_field([](Config& c) -> double& { return c.pipeline.refine.step_size; })},
      {"k_refine", uint_field([](Config& c) -> std::size_t& { return c.pipeline.k_refine; })},
      {"lambda_c", real_field([](Config& c) -> double& { return c.pipeline.lambda_c; })},
      {"learning_rate", real_field([](Config& c) -> double& { return c.learning_rate; })},
      {"fit_steps", uint_field([](Config& c) -> std::size_t& { return c.fit_steps; })},
  };
  return table;
}

const Field& field(const std::string& key) {
  for (const auto& [name, f] : fields())
    if (name == key) return f;
  fail(ErrorCode::InvalidConfig, "unknown config key '" + key + "'");
}

}  // namespace

const std::vector<std::string>& Config::keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& entry : fields()) out.push_back(entry.first);
    return out;
  }();
  return names;
}

void Config::set(const std::string& key, const std::string& value) { field(key).set(*this, key, trim(value)); }

std::string Config::get(const std::string& key) const { return field(key).get(*this); }

void Config::validate() const {
  pipeline.model.validate();
  auto bad = [](const std::string& what) { fail(ErrorCode::InvalidConfig, what); };
  if (threads < 1) bad("threads must be positive");
  if (!(pipeline.sinkhorn.epsilon > 0.0)) bad("epsilon must be positive");
  if (pipeline.sinkhorn.max_iters < 1) bad("sinkhorn_iters must be positive");
  if (!(pipeline.sinkhorn.tol_marg > 0.0)) bad("sinkhorn_tol must be positive");
  if (pipeline.refine.lambda_smooth < 0.0) bad("lambda_smooth must be non-negative");
  if (!(pipeline.refine.step_size > 0.0)) bad("step_size must be positive");
  if (pipeline.k_refine < 1) bad("k_refine must be positive");
  if (pipeline.lambda_c < 0.0) bad("lambda_c must be non-negative");
  if (!(learning_rate > 0.0)) bad("learning_rate must be positive");
}

void Config::merge(const std::string& text, const std::string& source_name) {
  std::istringstream is(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      fail(ErrorCode::InvalidConfig, source_name + ": line " + std::to_string(line_no) + " has no '='");
    }
    set(trim(line.substr(0, eq)), line.substr(eq + 1));
  }
}

Config Config::parse(const std::string& text) {
  Config c;
  c.merge(text);
  return c;
}

Config Config::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorCode::IoError, "cannot open " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  Config c;
  c.merge(ss.str(), path);
  return c;
}

std::string Config::serialize() const {
  std::string out;
  for (const auto& [name, f] : fields()) out += name + " = " + f.get(*this) + "\n";
  return out;
}

}  // namespace pvflow
