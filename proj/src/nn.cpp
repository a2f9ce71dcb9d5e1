// SPDX-License-Identifier: Apache-2.0
#include "pvflow/nn.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <random>

namespace pvflow {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

void ParamStore::set(const std::string& name, std::vector<std::uint32_t> dims, Tensor value) {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  if (dims.empty() || n != value.size()) {
    fail(ErrorCode::ShapeError, "parameter " + name + " dims do not match tensor " + value.shape_string());
  }
  entries_[name] = Entry{std::move(dims), std::move(value)};
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) fail(ErrorCode::ShapeError, "missing parameter " + name);
  return it->second.value;
}

Tensor& ParamStore::get_mut(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) fail(ErrorCode::ShapeError, "missing parameter " + name);
  return it->second.value;
}

std::size_t ParamStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, e] : entries_) n += e.value.size();
  return n;
}

bool operator==(const ParamStore& a, const ParamStore& b) {
  if (a.entries_.size() != b.entries_.size()) return false;
  for (const auto& [name, e] : a.entries_) {
    auto it = b.entries_.find(name);
    if (it == b.entries_.end() || it->second.dims != e.dims || !(it->second.value == e.value)) return false;
  }
  return true;
}

namespace {

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::istream& is, std::size_t& offset) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (is.gcount() != static_cast<std::streamsize>(sizeof(T))) {
    fail(ErrorCode::TruncatedFile, "PVWT truncated at byte " + std::to_string(offset));
  }
  offset += sizeof(T);
  return v;
}

}  // namespace

void write_pvwt(std::ostream& os, const ParamStore& params) {
  os.write("PVWT", 4);
  put<std::uint32_t>(os, kPvwtVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(params.entries().size()));
  for (const auto& [name, e] : params.entries()) {
    put<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint8_t>(os, static_cast<std::uint8_t>(e.dims.size()));
    for (auto d : e.dims) put<std::uint32_t>(os, d);
    for (double v : e.value.storage()) put<float>(os, static_cast<float>(v));
  }
}

void write_pvwt(const std::string& path, const ParamStore& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorCode::IoError, "cannot open " + path + " for writing");
  write_pvwt(os, params);
  if (!os) fail(ErrorCode::IoError, "write failed for " + path);
}

ParamStore read_pvwt(std::istream& is) {
  std::size_t offset = 0;
  char magic[4] = {};
  is.read(magic, 4);
  if (is.gcount() != 4) fail(ErrorCode::TruncatedFile, "PVWT truncated at byte 0");
  if (std::memcmp(magic, "PVWT", 4) != 0) fail(ErrorCode::BadMagic, "expected PVWT at byte 0");
  offset = 4;
  const auto version = take<std::uint32_t>(is, offset);
  if (version != kPvwtVersion) fail(ErrorCode::BadMagic, "unsupported PVWT version " + std::to_string(version));
  const auto count = take<std::uint32_t>(is, offset);
  ParamStore store;
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto len = take<std::uint16_t>(is, offset);
    std::string name(len, '\0');
    is.read(name.data(), len);
    if (is.gcount() != len) fail(ErrorCode::TruncatedFile, "PVWT truncated at byte " + std::to_string(offset));
    offset += len;
    const auto rank = take<std::uint8_t>(is, offset);
    std::vector<std::uint32_t> dims(rank);
    std::size_t n = 1;
    for (auto& d : dims) {
      d = take<std::uint32_t>(is, offset);
      n *= d;
    }
    std::vector<double> data(n);
    for (auto& v : data) {
      const float f = take<float>(is, offset);
      if (!std::isfinite(f)) {
        fail(ErrorCode::NonFiniteValue, "PVWT non-finite value at byte " + std::to_string(offset - 4));
      }
      v = f;
    }
    const std::size_t rows = rank >= 2 ? dims[0] : 1;
    const std::size_t cols = rows == 0 ? 0 : n / rows;
    store.set(name, dims, Tensor(rows, cols, std::move(data)));
  }
  return store;
}

ParamStore read_pvwt(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorCode::IoError, "cannot open " + path);
  return read_pvwt(is);
}

ad::Var Context::param(const std::string& name) {
  if (auto it = bound_.find(name); it != bound_.end()) return it->second;
  const Tensor& value = params_->get(name);
  ad::Var v = tape_ != nullptr ? tape_->leaf(value, true) : ad::constant(value);
  bound_.emplace(name, v);
  return v;
}

ad::Var Context::input(Tensor value) const { return ad::constant(std::move(value)); }

std::map<std::string, Tensor> Context::gradients() const {
  std::map<std::string, Tensor> out;
  for (const auto& [name, v] : bound_) out[name] = v.grad().empty() ? Tensor::zeros_like(v.value()) : v.grad();
  return out;
}

ad::Var mlp_forward(Context& ctx, const ad::Var& x, const MlpSpec& spec) {
  if (spec.layers() == 0) return x;
  if (x.cols() != spec.widths.front()) {
    fail(ErrorCode::ShapeError, spec.prefix + ": input width " + std::to_string(x.cols()) + " expected " +
                                    std::to_string(spec.widths.front()));
  }
  ad::Var h = x;
  for (std::size_t l = 0; l < spec.layers(); ++l) {
    h = ad::linear(h, ctx.param(spec.weight_name(l)), ctx.param(spec.bias_name(l)));
    if (l + 1 < spec.layers()) {
      if (spec.instance_norm) h = ad::instance_norm(h);
      h = ad::leaky_relu(h, spec.slope);
    }
  }
  return h;
}

void append_linear_shapes(std::vector<ParamShape>& out, const std::string& prefix, std::size_t in, std::size_t out_w,
                          bool bias) {
  out.push_back({prefix + ".weight", {static_cast<std::uint32_t>(out_w), static_cast<std::uint32_t>(in)}, in});
  if (bias) out.push_back({prefix + ".bias", {static_cast<std::uint32_t>(out_w)}, in});
}

void append_mlp_shapes(std::vector<ParamShape>& out, const MlpSpec& spec) {
  for (std::size_t l = 0; l < spec.layers(); ++l)
    append_linear_shapes(out, spec.prefix + "." + std::to_string(l), spec.widths[l], spec.widths[l + 1], true);
}

std::size_t count_params(const std::vector<ParamShape>& shapes) {
  std::size_t n = 0;
  for (const auto& s : shapes) {
    std::size_t k = 1;
    for (auto d : s.dims) k *= d;
    n += k;
  }
  return n;
}

ParamStore init_params(const std::vector<ParamShape>& shapes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParamStore store;
  for (const auto& s : shapes) {
    const double bound = std::sqrt(1.0 / static_cast<double>(std::max<std::size_t>(1, s.fan_in)));
    const std::size_t rows = s.dims.size() >= 2 ? s.dims[0] : 1;
    std::size_t n = 1;
    for (auto d : s.dims) n *= d;
    std::vector<double> data(n);
    for (auto& v : data) {
      // 53 random bits -> [0, 1), independent of the standard library's distributions
      const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
      v = static_cast<float>((2.0 * u - 1.0) * bound);
    }
    store.set(s.name, s.dims, Tensor(rows, n / rows, std::move(data)));
  }
  return store;
}

}  // namespace pvflow
