// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <vector>

#include "pvflow/geometry.hpp"

namespace pvflow {

/// Cloud centered on its centroid, divided by the largest centered norm and
/// mapped from [-1, 1] to [0, 1] per axis.
struct NormalizedCloud {
  std::vector<Vec3> coords;
  double scale = 1.0;
  Vec3 centroid;

  std::size_t size() const { return coords.size(); }
  Vec3 to_original(Vec3 mu) const { return centroid + scale * (2.0 * mu - Vec3{1.0, 1.0, 1.0}); }
};

NormalizedCloud normalize_cloud(const PointCloud& cloud);

struct VoxelKey {
  std::int32_t u = 0, v = 0, w = 0;
  friend bool operator==(VoxelKey, VoxelKey) = default;
};

/// 21 bits per axis.
inline std::uint64_t pack_key(VoxelKey k) {
  return static_cast<std::uint64_t>(k.u) | (static_cast<std::uint64_t>(k.v) << 21) |
         (static_cast<std::uint64_t>(k.w) << 42);
}
inline constexpr int kMaxResolution = 1 << 21;

/// floor(coord * r) per axis, clamped to [0, r - 1].
VoxelKey voxel_key(Vec3 mu, int resolution);

/// Open-addressing (linear probing) map from packed voxel key to a dense slot.
class VoxelHashIndex {
 public:
  explicit VoxelHashIndex(std::size_t expected = 16);
  std::optional<std::uint32_t> find(std::uint64_t key) const;
  /// Returns the existing slot, or inserts `slot` and returns it.
  std::uint32_t insert(std::uint64_t key, std::uint32_t slot);
  std::size_t size() const { return size_; }

 private:
  void grow();
  std::size_t probe_start(std::uint64_t key) const;

  std::vector<std::uint64_t> keys_;
  std::vector<std::uint32_t> slots_;
  std::size_t size_ = 0;
  static constexpr std::uint32_t kEmpty = 0xFFFFFFFFu;
};

struct VoxelEntry {
  VoxelKey key;
  std::size_t count = 0;
  std::vector<std::size_t> members;
};

/// Only non-empty voxels are stored, in order of first occupancy.
class SparseVoxelGrid {
 public:
  SparseVoxelGrid() = default;
  SparseVoxelGrid(const NormalizedCloud& nc, int resolution);

  int resolution() const { return resolution_; }
  std::size_t size() const { return entries_.size(); }
  const std::vector<VoxelEntry>& entries() const { return entries_; }
  std::optional<std::size_t> find(VoxelKey key) const;
  /// Voxel (entry index) holding point i.
  std::size_t voxel_of(std::size_t point) const { return point_voxel_[point]; }

  Tensor features;  // size() x D mean features; empty until voxelize()

 private:
  int resolution_ = 0;
  std::vector<VoxelEntry> entries_;
  std::vector<std::size_t> point_voxel_;
  VoxelHashIndex index_;
};

/// Membership plus per-voxel mean of `features` (rows = points).
SparseVoxelGrid voxelize(const NormalizedCloud& nc, const Tensor& features, int resolution);

/// voxels x points averaging map (row weights 1/count).
std::shared_ptr<const ad::SparseRows> mean_pool_map(const SparseVoxelGrid& grid, std::size_t points);

/// points x voxels trilinear map over the 8 surrounding voxel centers, weights
/// renormalized over the non-empty corners.
std::shared_ptr<const ad::SparseRows> trilinear_map(const SparseVoxelGrid& grid, const NormalizedCloud& nc);

/// Point-domain features interpolated from grid.features.
Tensor devoxelize(const SparseVoxelGrid& grid, const NormalizedCloud& nc);

struct Window {
  std::array<int, 3> id{};
  std::array<int, 3> origin{};  // first voxel key covered, may be negative when shifted
  std::vector<std::size_t> voxels;
};

/// Unshifted: window id = floor(key / W). Shifted: floor((key + W/2) / W).
/// Windows are ordered by id; every voxel lands in exactly one.
std::vector<Window> window_partition(const SparseVoxelGrid& grid, int window, bool shifted);

/// Per-voxel position inside its window: (key - window center) / W.
Tensor window_positions(const SparseVoxelGrid& grid, const std::vector<Window>& windows, int window);

struct AttentionSpec {
  std::string prefix;  // parameters prefix.wq|wk|wv|wo (D x D) and prefix.pos (D x 3)
  std::size_t width = 0;
  std::size_t heads = 1;
};

void append_attention_shapes(std::vector<ParamShape>& out, const AttentionSpec& spec);

/// Geometry-only part of one cloud's voxel pass, shared by every layer.
struct VoxelLayout {
  int resolution = 0;
  int window = 0;
  SparseVoxelGrid grid;
  std::shared_ptr<const ad::SparseRows> pool;
  std::shared_ptr<const ad::SparseRows> unpool;
  std::array<std::vector<Window>, 2> windows;  // [unshifted, shifted]
  std::array<Tensor, 2> positions;
  std::array<std::shared_ptr<const std::vector<std::vector<std::size_t>>>, 2> groups;
};

VoxelLayout make_voxel_layout(const NormalizedCloud& nc, int resolution, int window);

/// One attention pass over all windows: x + W_o * attention(q, k, v), where
/// q = W_q x + W_pos pos and k = W_k x + W_pos pos.
ad::Var sparse_grid_attention(Context& ctx, const ad::Var& voxel_features, const Tensor& positions,
                              std::shared_ptr<const std::vector<std::vector<std::size_t>>> windows,
                              const AttentionSpec& spec);

struct VoxelStageSpec {
  std::string prefix;  // voxel.layer{l}
  std::size_t in_width = 0;
  std::size_t width = 0;
  std::size_t heads = 1;
  bool project_input = true;  // prefix.in: linear -> instance norm -> leaky ReLU per point
  double slope = 0.1;

  AttentionSpec attention() const { return {prefix, width, heads}; }
};

void append_voxel_stage_shapes(std::vector<ParamShape>& out, const VoxelStageSpec& spec);

/// voxelize -> unshifted attention -> shifted attention -> devoxelize.
ad::Var voxel_stage(Context& ctx, const VoxelLayout& layout, const ad::Var& point_features,
                    const VoxelStageSpec& spec);

}  // namespace pvflow
