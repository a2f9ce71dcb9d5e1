// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>

#include "pvflow/model.hpp"

namespace pvflow {

/// Elementwise sum of point-branch and voxel-branch features.
ad::Var fuse(const ad::Var& point_features, const ad::Var& voxel_features);

struct Embedding {
  ad::Var features;                          // N x embed_dim
  std::array<ad::Var, kFusionLayers> fused;  // per-layer fused features
};

/// Skip connection: linear projection of the concatenated per-layer features.
ad::Var project_layers(Context& ctx, const std::array<ad::Var, kFusionLayers>& fused);

/// Layer 0 = [xyz, surface features]; each layer runs SetConv and the voxel
/// stage on the previous fused features and adds them.
Embedding embed(Context& ctx, const CloudLayout& layout, const ad::Var& surface_features,
                const ModelConfig& model);

/// USFE followed by embed().
Embedding encode(Context& ctx, const CloudLayout& layout, const ModelConfig& model);

}  // namespace pvflow
