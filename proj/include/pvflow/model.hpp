// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <vector>

#include "pvflow/point_branch.hpp"
#include "pvflow/voxel.hpp"

namespace pvflow {

inline constexpr std::size_t kFusionLayers = 3;

/// Architecture hyperparameters of the encoder.
struct ModelConfig {
  std::size_t k_usfe = 9;
  std::size_t k_sc = 16;
  int resolution = 16;
  int window = 4;
  std::size_t heads = 4;
  std::size_t surface_dim = 32;
  std::size_t width1 = 64;
  std::size_t width2 = 128;
  std::size_t embed_dim = 128;
  double slope = 0.1;

  /// Throws InvalidConfig.
  void validate() const;

  std::size_t input_width() const { return 3 + surface_dim; }
  /// Output width of fusion layer l (1-based); layer 0 is the input.
  std::size_t layer_width(std::size_t l) const;

  MlpSpec usfe_mlp() const;
  MlpSpec point_mlp(std::size_t l) const;
  VoxelStageSpec voxel_spec(std::size_t l) const;
  std::vector<ParamShape> param_shapes() const;
};

/// Everything about a cloud the encoder needs that does not depend on weights.
struct CloudLayout {
  PointCloud cloud;
  UmbrellaFeatures umbrella;
  SetConvLayout set_conv;
  NormalizedCloud normalized;
  VoxelLayout voxels;
};

CloudLayout prepare_cloud(const PointCloud& cloud, const ModelConfig& model);

}  // namespace pvflow
