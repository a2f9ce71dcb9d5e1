// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>

#include "pvflow/geometry.hpp"

namespace pvflow {

/// Gather structure for one cloud's SetConv layers: per (point, neighbor) the
/// relative offset p_k - p_i and the neighbor index.
struct SetConvLayout {
  std::size_t k = 0;
  Tensor offsets;  // (N * k) x 3
  std::shared_ptr<const ad::SparseRows> gather;
};

SetConvLayout make_set_conv_layout(const PointCloud& cloud, const NeighborGraph& graph);

/// Rows [p_k - p_i, feature(p_k)] for every neighbor through the shared MLP,
/// then max over the neighbors of each point. Keeps all N points.
ad::Var set_conv(Context& ctx, const SetConvLayout& layout, const ad::Var& features, const MlpSpec& mlp);

inline ad::Var set_conv(Context& ctx, const PointCloud& cloud, const ad::Var& features, const NeighborGraph& graph,
                        const MlpSpec& mlp) {
  return set_conv(ctx, make_set_conv_layout(cloud, graph), features, mlp);
}

}  // namespace pvflow
