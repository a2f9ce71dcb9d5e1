// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pvflow/correspondence.hpp"

namespace pvflow {

/// Every tunable of the pipeline and the CLI. Text form is `key = value` lines;
/// '#' starts a comment.
struct Config {
  std::uint64_t seed = 42;
  bool deterministic = true;
  std::size_t threads = 1;
  bool single_precision = false;  // mode = f32
  double learning_rate = 0.01;
  std::size_t fit_steps = 200;
  PipelineConfig pipeline;

  static const std::vector<std::string>& keys();
  /// Throws InvalidConfig for an unknown key or a malformed value.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;

  /// Throws InvalidConfig when an invariant is broken.
  void validate() const;

  /// Applies every line of `text` on top of the current values.
  void merge(const std::string& text, const std::string& source_name = "<config>");
  static Config parse(const std::string& text);
  static Config load(const std::string& path);
  /// Every key, in keys() order.
  std::string serialize() const;

  friend bool operator==(const Config& a, const Config& b) { return a.serialize() == b.serialize(); }
};

}  // namespace pvflow
