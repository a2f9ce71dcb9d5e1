// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "pvflow/autodiff.hpp"

namespace pvflow {

/// Named parameter tensors. Rank-1 tensors (biases) are stored as 1 x n.
class ParamStore {
 public:
  struct Entry {
    std::vector<std::uint32_t> dims;
    Tensor value;
  };

  void set(const std::string& name, std::vector<std::uint32_t> dims, Tensor value);
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  const Tensor& get(const std::string& name) const;
  Tensor& get_mut(const std::string& name);
  const std::map<std::string, Entry>& entries() const { return entries_; }
  std::size_t parameter_count() const;

  friend bool operator==(const ParamStore& a, const ParamStore& b);

 private:
  std::map<std::string, Entry> entries_;
};

// PVWT: "PVWT", u32 version, u32 count, then per tensor u16 name length, name
// bytes, u8 rank, u32 dims[rank], f32 data. All little-endian.
inline constexpr std::uint32_t kPvwtVersion = 1;
void write_pvwt(std::ostream& os, const ParamStore& params);
void write_pvwt(const std::string& path, const ParamStore& params);
ParamStore read_pvwt(std::istream& is);
ParamStore read_pvwt(const std::string& path);

/// Binds parameters into a forward pass. With a tape, every parameter becomes a
/// grad-tracked leaf (bound once, so weight sharing accumulates into one node);
/// without one, parameters are untracked constants.
class Context {
 public:
  explicit Context(const ParamStore& params, ad::Tape* tape = nullptr) : params_(&params), tape_(tape) {}

  ad::Var param(const std::string& name);
  ad::Var input(Tensor value) const;
  ad::Tape* tape() const { return tape_; }
  const ParamStore& params() const { return *params_; }

  /// Gradient per bound parameter (zeros when none reached it).
  std::map<std::string, Tensor> gradients() const;

 private:
  const ParamStore* params_;
  ad::Tape* tape_;
  std::map<std::string, ad::Var> bound_;
};

/// Stacked perceptron: hidden layers are linear -> [instance norm] -> leaky ReLU,
/// the last layer is linear only. Parameters live at "{prefix}.{l}.weight|bias".
struct MlpSpec {
  std::string prefix;
  std::vector<std::size_t> widths;  // input width first
  bool instance_norm = true;
  double slope = 0.1;

  std::size_t layers() const { return widths.empty() ? 0 : widths.size() - 1; }
  std::string weight_name(std::size_t l) const { return prefix + "." + std::to_string(l) + ".weight"; }
  std::string bias_name(std::size_t l) const { return prefix + "." + std::to_string(l) + ".bias"; }
};

ad::Var mlp_forward(Context& ctx, const ad::Var& x, const MlpSpec& spec);

/// Shape of one parameter as it appears in a store.
struct ParamShape {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::size_t fan_in;
};

void append_linear_shapes(std::vector<ParamShape>& out, const std::string& prefix, std::size_t in, std::size_t out_w,
                          bool bias);
void append_mlp_shapes(std::vector<ParamShape>& out, const MlpSpec& spec);
std::size_t count_params(const std::vector<ParamShape>& shapes);

/// uniform(-sqrt(1/fan_in), sqrt(1/fan_in)) from a seeded mt19937_64, rounded to
/// f32 so an in-memory store equals its PVWT round trip.
ParamStore init_params(const std::vector<ParamShape>& shapes, std::uint64_t seed);

}  // namespace pvflow
