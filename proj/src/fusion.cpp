// SPDX-License-Identifier: Apache-2.0
#include "pvflow/fusion.hpp"

namespace pvflow {

ad::Var fuse(const ad::Var& point_features, const ad::Var& voxel_features) {
  return ad::add(point_features, voxel_features);
}

ad::Var project_layers(Context& ctx, const std::array<ad::Var, kFusionLayers>& fused) {
  std::vector<ad::Var> parts(fused.begin(), fused.end());
  return ad::linear(ad::concat_cols(parts), ctx.param("fuse.proj.weight"), ctx.param("fuse.proj.bias"));
}

Embedding embed(Context& ctx, const CloudLayout& layout, const ad::Var& surface_features,
                const ModelConfig& model) {
  if (surface_features.rows() != layout.cloud.size()) {
    fail(ErrorCode::ShapeError, "surface features do not match the cloud");
  }
  Embedding out;
  ad::Var h = ad::concat_cols({ctx.input(layout.cloud.positions_tensor()), surface_features});
  for (std::size_t l = 1; l <= kFusionLayers; ++l) {
    const ad::Var p = set_conv(ctx, layout.set_conv, h, model.point_mlp(l));
    const ad::Var v = voxel_stage(ctx, layout.voxels, h, model.voxel_spec(l));
    h = fuse(p, v);
    out.fused[l - 1] = h;
  }
  out.features = project_layers(ctx, out.fused);
  return out;
}

Embedding encode(Context& ctx, const CloudLayout& layout, const ModelConfig& model) {
  return embed(ctx, layout, usfe(ctx, layout.umbrella, model.usfe_mlp()), model);
}

}  // namespace pvflow
