// SPDX-License-Identifier: Apache-2.0
#include "pvflow/model.hpp"

namespace pvflow {

void ModelConfig::validate() const {
  auto bad = [](const std::string& what) { fail(ErrorCode::InvalidConfig, what); };
  if (k_usfe < 2) bad("K_usfe must be at least 2");
  if (k_sc < 1) bad("k_sc must be at least 1");
  if (resolution < 1 || resolution >= kMaxResolution) bad("r out of range");
  if (window < 1 || window > resolution) bad("W must satisfy 1 <= W <= r");
  if (heads < 1) bad("H must be positive");
  if (surface_dim < 1 || width1 < 1 || width2 < 1 || embed_dim < 1) bad("layer widths must be positive");
  for (std::size_t l = 1; l <= kFusionLayers; ++l)
    if (layer_width(l) % heads != 0) bad("layer width " + std::to_string(layer_width(l)) + " not divisible by H");
  if (!(slope > 0.0 && slope < 1.0)) bad("leaky slope must be in (0, 1)");
}

std::size_t ModelConfig::layer_width(std::size_t l) const {
  switch (l) {
    case 0: return input_width();
    case 1: return width1;
    case 2: return width2;
    default: return embed_dim;
  }
}

MlpSpec ModelConfig::usfe_mlp() const {
  return {"usfe.mlp", {kUmbrellaPairWidth, surface_dim, surface_dim}, true, slope};
}

MlpSpec ModelConfig::point_mlp(std::size_t l) const {
  const std::size_t w = layer_width(l);
  return {"point.layer" + std::to_string(l) + ".mlp", {3 + layer_width(l - 1), w, w}, true, slope};
}

VoxelStageSpec ModelConfig::voxel_spec(std::size_t l) const {
  return {"voxel.layer" + std::to_string(l), layer_width(l - 1), layer_width(l), heads, true, slope};
}

std::vector<ParamShape> ModelConfig::param_shapes() const {
  std::vector<ParamShape> shapes;
  append_mlp_shapes(shapes, usfe_mlp());
  std::size_t concat = 0;
  for (std::size_t l = 1; l <= kFusionLayers; ++l) {
    append_mlp_shapes(shapes, point_mlp(l));
    append_voxel_stage_shapes(shapes, voxel_spec(l));
    concat += layer_width(l);
  }
  append_linear_shapes(shapes, "fuse.proj", concat, embed_dim, true);
  return shapes;
}

CloudLayout prepare_cloud(const PointCloud& cloud, const ModelConfig& model) {
  cloud.validate();
  CloudLayout layout;
  layout.cloud = cloud;
  layout.umbrella = umbrella_features(cloud, knn_with_fallback(cloud, model.k_usfe));
  layout.set_conv = make_set_conv_layout(cloud, knn_with_fallback(cloud, model.k_sc));
  layout.normalized = normalize_cloud(cloud);
  layout.voxels = make_voxel_layout(layout.normalized, model.resolution, model.window);
  return layout;
}

}  // namespace pvflow
