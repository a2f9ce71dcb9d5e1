// SPDX-License-Identifier: Apache-2.0
#include "pvflow/io.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace pvflow {
namespace {

class Reader {
 public:
  Reader(std::istream& is, std::string name) : is_(is), name_(std::move(name)) {}

  void magic(const char (&expected)[5]) {
    char buf[4] = {};
    is_.read(buf, 4);
    if (is_.gcount() != 4) fail(ErrorCode::TruncatedFile, name_ + ": truncated at byte 0 (no magic)");
    if (std::memcmp(buf, expected, 4) != 0) {
      fail(ErrorCode::BadMagic, name_ + ": expected magic " + std::string(expected) + " at byte 0");
    }
    offset_ = 4;
  }

  template <typename T>
  T scalar() {
    T v{};
    is_.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (is_.gcount() != static_cast<std::streamsize>(sizeof(T))) {
      fail(ErrorCode::TruncatedFile, name_ + ": truncated at byte " + std::to_string(offset_));
    }
    offset_ += sizeof(T);
    return v;
  }

  double finite_f32() {
    const float f = scalar<float>();
    if (!std::isfinite(f)) {
      fail(ErrorCode::NonFiniteValue, name_ + ": non-finite value at byte " + std::to_string(offset_ - 4));
    }
    return f;
  }

  void version() {
    const auto v = scalar<std::uint32_t>();
    if (v != kFormatVersion) {
      fail(ErrorCode::BadMagic, name_ + ": unsupported version " + std::to_string(v) + " at byte 4");
    }
  }

 private:
  std::istream& is_;
  std::string name_;
  std::size_t offset_ = 0;
};

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

std::ifstream open_in(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorCode::IoError, "cannot open " + path);
  return is;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorCode::IoError, "cannot open " + path + " for writing");
  return os;
}

bool has_suffix(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

PointCloud read_sfpc(std::istream& is, const std::string& source_name) {
  Reader r(is, source_name);
  r.magic("SFPC");
  r.version();
  const auto n = r.scalar<std::uint32_t>();
  PointCloud cloud;
  cloud.id = source_name;
  cloud.positions.resize(n);
  for (auto& p : cloud.positions) {
    p.x = r.finite_f32();
    p.y = r.finite_f32();
    p.z = r.finite_f32();
  }
  const auto c = r.scalar<std::uint32_t>();
  if (c > 0) {
    cloud.features = Tensor(n, c);
    for (auto& v : cloud.features.storage()) v = r.finite_f32();
  }
  return cloud;
}

void write_sfpc(std::ostream& os, const PointCloud& cloud) {
  os.write("SFPC", 4);
  put<std::uint32_t>(os, kFormatVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(cloud.size()));
  for (const auto& p : cloud.positions) {
    put<float>(os, static_cast<float>(p.x));
    put<float>(os, static_cast<float>(p.y));
    put<float>(os, static_cast<float>(p.z));
  }
  put<std::uint32_t>(os, static_cast<std::uint32_t>(cloud.features.cols()));
  for (double v : cloud.features.storage()) put<float>(os, static_cast<float>(v));
}

PointCloud read_xyz(std::istream& is, const std::string& source_name) {
  PointCloud cloud;
  cloud.id = source_name;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line);
    std::string tok[3];
    if (!(ls >> tok[0] >> tok[1] >> tok[2])) {
      fail(ErrorCode::TruncatedFile, source_name + ": line " + std::to_string(line_no) + " has fewer than 3 values");
    }
    double v[3];
    for (int a = 0; a < 3; ++a) {
      try {
        std::size_t used = 0;
        v[a] = std::stod(tok[a], &used);
        if (used != tok[a].size()) throw std::invalid_argument(tok[a]);
      } catch (const std::out_of_range&) {
        fail(ErrorCode::NonFiniteValue, source_name + ": line " + std::to_string(line_no) + " value out of range");
      } catch (const std::invalid_argument&) {
        fail(ErrorCode::BadMagic, source_name + ": line " + std::to_string(line_no) + " is not numeric");
      }
      if (!std::isfinite(v[a])) {
        fail(ErrorCode::NonFiniteValue, source_name + ": line " + std::to_string(line_no) + " has a non-finite value");
      }
    }
    cloud.positions.push_back({v[0], v[1], v[2]});
  }
  return cloud;
}

PointCloud read_cloud(const std::string& path) {
  std::ifstream is = open_in(path);
  char head[4] = {};
  is.read(head, 4);
  const bool binary = is.gcount() == 4 && std::memcmp(head, "SFPC", 4) == 0;
  is.clear();
  is.seekg(0);
  if (binary) return read_sfpc(is, path);
  if (has_suffix(path, ".xyz") || has_suffix(path, ".txt")) return read_xyz(is, path);
  fail(ErrorCode::BadMagic, path + ": expected magic SFPC at byte 0");
}

void write_cloud(const std::string& path, const PointCloud& cloud) {
  std::ofstream os = open_out(path);
  write_sfpc(os, cloud);
  if (!os) fail(ErrorCode::IoError, "write failed for " + path);
}

FlowField read_flow(std::istream& is, const std::string& source_name) {
  Reader r(is, source_name);
  r.magic("SFFL");
  r.version();
  const auto n = r.scalar<std::uint32_t>();
  FlowField f;
  f.vectors = Tensor(n, 3);
  for (auto& v : f.vectors.storage()) v = r.finite_f32();
  return f;
}

void write_flow(std::ostream& os, const FlowField& flow) {
  if (flow.vectors.cols() != 3 && flow.size() > 0) fail(ErrorCode::ShapeError, "flow must be N x 3");
  os.write("SFFL", 4);
  put<std::uint32_t>(os, kFormatVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(flow.size()));
  for (double v : flow.vectors.storage()) put<float>(os, static_cast<float>(v));
}

FlowField read_flow(const std::string& path) {
  std::ifstream is = open_in(path);
  return read_flow(is, path);
}

void write_flow(const std::string& path, const FlowField& flow) {
  std::ofstream os = open_out(path);
  write_flow(os, flow);
  if (!os) fail(ErrorCode::IoError, "write failed for " + path);
}

void write_features(const std::string& path, const Tensor& features) {
  std::ofstream os = open_out(path);
  os.write("SFFT", 4);
  put<std::uint32_t>(os, kFormatVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(features.rows()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(features.cols()));
  for (double v : features.storage()) put<float>(os, static_cast<float>(v));
  if (!os) fail(ErrorCode::IoError, "write failed for " + path);
}

Tensor read_features(const std::string& path) {
  std::ifstream is = open_in(path);
  Reader r(is, path);
  r.magic("SFFT");
  r.version();
  const auto n = r.scalar<std::uint32_t>();
  const auto c = r.scalar<std::uint32_t>();
  Tensor t(n, c);
  for (auto& v : t.storage()) v = r.finite_f32();
  return t;
}

}  // namespace pvflow
