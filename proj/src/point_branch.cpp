// SPDX-License-Identifier: Apache-2.0
#include "pvflow/point_branch.hpp"

namespace pvflow {

SetConvLayout make_set_conv_layout(const PointCloud& cloud, const NeighborGraph& graph) {
  const std::size_t n = cloud.size(), k = graph.k;
  if (graph.points() != n) fail(ErrorCode::ShapeError, "neighbor graph does not match cloud");
  SetConvLayout layout;
  layout.k = k;
  layout.offsets = Tensor(n * k, 3);
  auto gather = std::make_shared<ad::SparseRows>();
  gather->input_rows = n;
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = graph.row(i);
    for (std::size_t j = 0; j < k; ++j) {
      const Vec3 d = cloud.positions[row[j]] - cloud.positions[i];
      layout.offsets(i * k + j, 0) = d.x;
      layout.offsets(i * k + j, 1) = d.y;
      layout.offsets(i * k + j, 2) = d.z;
      gather->push(row[j], 1.0);
      gather->end_row();
    }
  }
  layout.gather = std::move(gather);
  return layout;
}

ad::Var set_conv(Context& ctx, const SetConvLayout& layout, const ad::Var& features, const MlpSpec& mlp) {
  const ad::Var neighbor_features = ad::sparse_rows(features, layout.gather);
  const ad::Var rows = ad::concat_cols({ctx.input(layout.offsets), neighbor_features});
  return ad::group_max(mlp_forward(ctx, rows, mlp), layout.k);
}

}  // namespace pvflow
