// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include "pvflow/correspondence.hpp"

namespace pvflow {

// SFPC: "SFPC", u32 version = 1, u32 N, N x 3 f32 positions, u32 C, N x C f32 features.
// SFFL: "SFFL", u32 version = 1, u32 N, N x 3 f32 flow vectors.
// SFFT: "SFFT", u32 version = 1, u32 N, u32 C, N x C f32 (feature dumps).
// All little-endian.
inline constexpr std::uint32_t kFormatVersion = 1;

PointCloud read_sfpc(std::istream& is, const std::string& source_name = "<stream>");
void write_sfpc(std::ostream& os, const PointCloud& cloud);

/// One "x y z" triple per line; blank lines and '#' comments are skipped.
PointCloud read_xyz(std::istream& is, const std::string& source_name = "<stream>");

/// SFPC by magic, otherwise ASCII when the extension is .xyz or .txt.
PointCloud read_cloud(const std::string& path);
void write_cloud(const std::string& path, const PointCloud& cloud);

FlowField read_flow(std::istream& is, const std::string& source_name = "<stream>");
void write_flow(std::ostream& os, const FlowField& flow);
FlowField read_flow(const std::string& path);
void write_flow(const std::string& path, const FlowField& flow);

void write_features(const std::string& path, const Tensor& features);
Tensor read_features(const std::string& path);

}  // namespace pvflow
