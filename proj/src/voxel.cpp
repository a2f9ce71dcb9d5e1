// SPDX-License-Identifier: Apache-2.0
#include "pvflow/voxel.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <tuple>

namespace pvflow {

NormalizedCloud normalize_cloud(const PointCloud& cloud) {
  cloud.validate();
  const std::size_t n = cloud.size();
  NormalizedCloud nc;
  Vec3 c;
  for (const Vec3& p : cloud.positions) c = c + p;
  c = (1.0 / static_cast<double>(n)) * c;
  double s = 0.0;
  for (const Vec3& p : cloud.positions) s = std::max(s, norm(p - c));
  if (s == 0.0) s = 1.0;
  nc.centroid = c;
  nc.scale = s;
  nc.coords.resize(n);
  auto unit = [](double v) { return std::clamp(0.5 * (v + 1.0), 0.0, 1.0); };
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 q = (1.0 / s) * (cloud.positions[i] - c);
    nc.coords[i] = {unit(q.x), unit(q.y), unit(q.z)};
  }
  return nc;
}

VoxelKey voxel_key(Vec3 mu, int resolution) {
  auto axis = [resolution](double v) {
    const double f = std::floor(v * resolution);
    return static_cast<std::int32_t>(std::clamp(f, 0.0, static_cast<double>(resolution - 1)));
  };
  return {axis(mu.x), axis(mu.y), axis(mu.z)};
}

// ---------------------------------------------------------------- hash index

namespace {
std::uint64_t mix(std::uint64_t x) {
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebULL;
  x ^= x >> 31;
  return x;
}
}  // namespace

VoxelHashIndex::VoxelHashIndex(std::size_t expected) {
  std::size_t cap = 16;
  while (cap < 2 * expected) cap <<= 1;
  keys_.assign(cap, 0);
  slots_.assign(cap, kEmpty);
}

std::size_t VoxelHashIndex::probe_start(std::uint64_t key) const { return mix(key) & (keys_.size() - 1); }

std::optional<std::uint32_t> VoxelHashIndex::find(std::uint64_t key) const {
  const std::size_t mask = keys_.size() - 1;
  for (std::size_t i = probe_start(key);; i = (i + 1) & mask) {
    if (slots_[i] == kEmpty) return std::nullopt;
    if (keys_[i] == key) return slots_[i];
  }
}

std::uint32_t VoxelHashIndex::insert(std::uint64_t key, std::uint32_t slot) {
  if (2 * (size_ + 1) > keys_.size()) grow();
  const std::size_t mask = keys_.size() - 1;
  for (std::size_t i = probe_start(key);; i = (i + 1) & mask) {
    if (slots_[i] == kEmpty) {
      keys_[i] = key;
      slots_[i] = slot;
      ++size_;
      return slot;
    }
    if (keys_[i] == key) return slots_[i];
  }
}

void VoxelHashIndex::grow() {
  std::vector<std::uint64_t> old_keys = std::move(keys_);
  std::vector<std::uint32_t> old_slots = std::move(slots_);
  keys_.assign(old_keys.size() * 2, 0);
  slots_.assign(old_keys.size() * 2, kEmpty);
  size_ = 0;
  for (std::size_t i = 0; i < old_keys.size(); ++i)
    if (old_slots[i] != kEmpty) insert(old_keys[i], old_slots[i]);
}

// ---------------------------------------------------------------- grid

SparseVoxelGrid::SparseVoxelGrid(const NormalizedCloud& nc, int resolution)
    : resolution_(resolution), index_(std::min<std::size_t>(nc.size(), 1u << 20)) {
  if (resolution < 1 || resolution >= kMaxResolution) {
    fail(ErrorCode::InvalidConfig, "voxel resolution must be in [1, 2^21), got " + std::to_string(resolution));
  }
  point_voxel_.resize(nc.size());
  for (std::size_t i = 0; i < nc.size(); ++i) {
    const VoxelKey key = voxel_key(nc.coords[i], resolution);
    const auto slot = index_.insert(pack_key(key), static_cast<std::uint32_t>(entries_.size()));
    if (slot == entries_.size()) entries_.push_back(VoxelEntry{key, 0, {}});
    entries_[slot].count += 1;
    entries_[slot].members.push_back(i);
    point_voxel_[i] = slot;
  }
}

std::optional<std::size_t> SparseVoxelGrid::find(VoxelKey key) const {
  if (key.u < 0 || key.v < 0 || key.w < 0 || key.u >= resolution_ || key.v >= resolution_ || key.w >= resolution_) {
    return std::nullopt;
  }
  if (auto s = index_.find(pack_key(key))) return static_cast<std::size_t>(*s);
  return std::nullopt;
}

SparseVoxelGrid voxelize(const NormalizedCloud& nc, const Tensor& features, int resolution) {
  if (features.rows() != nc.size()) {
    fail(ErrorCode::ShapeError, "voxelize: " + std::to_string(features.rows()) + " feature rows for " +
                                    std::to_string(nc.size()) + " points");
  }
  SparseVoxelGrid grid(nc, resolution);
  const std::size_t d = features.cols();
  grid.features = Tensor(grid.size(), d);
  for (std::size_t v = 0; v < grid.size(); ++v) {
    const auto& e = grid.entries()[v];
    for (std::size_t i : e.members)
      for (std::size_t c = 0; c < d; ++c) grid.features(v, c) += features(i, c);
    for (std::size_t c = 0; c < d; ++c) grid.features(v, c) /= static_cast<double>(e.count);
  }
  return grid;
}

std::shared_ptr<const ad::SparseRows> mean_pool_map(const SparseVoxelGrid& grid, std::size_t points) {
  auto map = std::make_shared<ad::SparseRows>();
  map->input_rows = points;
  for (const auto& e : grid.entries()) {
    const double w = 1.0 / static_cast<double>(e.count);
    for (std::size_t i : e.members) map->push(i, w);
    map->end_row();
  }
  return map;
}

std::shared_ptr<const ad::SparseRows> trilinear_map(const SparseVoxelGrid& grid, const NormalizedCloud& nc) {
  auto map = std::make_shared<ad::SparseRows>();
  map->input_rows = grid.size();
  const int r = grid.resolution();
  std::vector<std::pair<std::size_t, double>> corners;
  for (std::size_t i = 0; i < nc.size(); ++i) {
    const Vec3 mu = nc.coords[i];
    const double g[3] = {mu.x * r - 0.5, mu.y * r - 0.5, mu.z * r - 0.5};
    int base[3];
    double frac[3];
    for (int a = 0; a < 3; ++a) {
      base[a] = static_cast<int>(std::floor(g[a]));
      frac[a] = g[a] - base[a];
    }
    corners.clear();
    double total = 0.0;
    for (int c = 0; c < 8; ++c) {
      const int dx = c & 1, dy = (c >> 1) & 1, dz = (c >> 2) & 1;
      const double w = (dx ? frac[0] : 1.0 - frac[0]) * (dy ? frac[1] : 1.0 - frac[1]) * (dz ? frac[2] : 1.0 - frac[2]);
      if (w <= 0.0) continue;
      const auto slot = grid.find({base[0] + dx, base[1] + dy, base[2] + dz});
      if (!slot) continue;
      corners.emplace_back(*slot, w);
      total += w;
    }
    if (total > 0.0) {
      for (const auto& [slot, w] : corners) map->push(slot, w / total);
    } else {
      map->push(grid.voxel_of(i), 1.0);
    }
    map->end_row();
  }
  return map;
}

Tensor devoxelize(const SparseVoxelGrid& grid, const NormalizedCloud& nc) {
  const auto map = trilinear_map(grid, nc);
  return ad::sparse_rows(ad::constant(grid.features), map).value();
}

// ---------------------------------------------------------------- windows

std::vector<Window> window_partition(const SparseVoxelGrid& grid, int window, bool shifted) {
  if (window < 1 || window > grid.resolution()) {
    fail(ErrorCode::InvalidConfig, "window size " + std::to_string(window) + " outside [1, " +
                                       std::to_string(grid.resolution()) + "]");
  }
  const int shift = shifted ? window / 2 : 0;
  std::map<std::tuple<int, int, int>, std::size_t> by_id;
  std::vector<Window> windows;
  for (std::size_t v = 0; v < grid.size(); ++v) {
    const VoxelKey k = grid.entries()[v].key;
    const std::array<int, 3> id{(k.u + shift) / window, (k.v + shift) / window, (k.w + shift) / window};
    auto [it, inserted] = by_id.try_emplace({id[0], id[1], id[2]}, windows.size());
    if (inserted) {
      Window w;
      w.id = id;
      w.origin = {id[0] * window - shift, id[1] * window - shift, id[2] * window - shift};
      windows.push_back(std::move(w));
    }
    windows[it->second].voxels.push_back(v);
  }
  std::vector<Window> ordered;
  ordered.reserve(windows.size());
  for (const auto& [_, idx] : by_id) ordered.push_back(std::move(windows[idx]));
  return ordered;
}

Tensor window_positions(const SparseVoxelGrid& grid, const std::vector<Window>& windows, int window) {
  Tensor pos(grid.size(), 3);
  const double half = 0.5 * (window - 1);
  for (const auto& w : windows)
    for (std::size_t v : w.voxels) {
      const VoxelKey k = grid.entries()[v].key;
      pos(v, 0) = (k.u - (w.origin[0] + half)) / window;
      pos(v, 1) = (k.v - (w.origin[1] + half)) / window;
      pos(v, 2) = (k.w - (w.origin[2] + half)) / window;
    }
  return pos;
}

// ---------------------------------------------------------------- attention

void append_attention_shapes(std::vector<ParamShape>& out, const AttentionSpec& spec) {
  const auto d = static_cast<std::uint32_t>(spec.width);
  for (const char* m : {"wq", "wk", "wv", "wo"}) out.push_back({spec.prefix + "." + m, {d, d}, spec.width});
  out.push_back({spec.prefix + ".pos", {d, 3}, 3});
}

VoxelLayout make_voxel_layout(const NormalizedCloud& nc, int resolution, int window) {
  VoxelLayout layout;
  layout.resolution = resolution;
  layout.window = window;
  layout.grid = SparseVoxelGrid(nc, resolution);
  layout.pool = mean_pool_map(layout.grid, nc.size());
  layout.unpool = trilinear_map(layout.grid, nc);
  for (int s = 0; s < 2; ++s) {
    layout.windows[s] = window_partition(layout.grid, window, s == 1);
    layout.positions[s] = window_positions(layout.grid, layout.windows[s], window);
    auto groups = std::make_shared<std::vector<std::vector<std::size_t>>>();
    for (const auto& w : layout.windows[s]) groups->push_back(w.voxels);
    layout.groups[s] = std::move(groups);
  }
  return layout;
}

ad::Var sparse_grid_attention(Context& ctx, const ad::Var& voxel_features, const Tensor& positions,
                              std::shared_ptr<const std::vector<std::vector<std::size_t>>> windows,
                              const AttentionSpec& spec) {
  if (voxel_features.cols() != spec.width || positions.rows() != voxel_features.rows()) {
    fail(ErrorCode::ShapeError, spec.prefix + ": attention input " + voxel_features.value().shape_string());
  }
  const ad::Var pos = ad::linear(ctx.input(positions), ctx.param(spec.prefix + ".pos"));
  const ad::Var q = ad::add(ad::linear(voxel_features, ctx.param(spec.prefix + ".wq")), pos);
  const ad::Var k = ad::add(ad::linear(voxel_features, ctx.param(spec.prefix + ".wk")), pos);
  const ad::Var v = ad::linear(voxel_features, ctx.param(spec.prefix + ".wv"));
  const ad::Var o = ad::window_attention(q, k, v, std::move(windows), spec.heads);
  return ad::add(voxel_features, ad::linear(o, ctx.param(spec.prefix + ".wo")));
}

void append_voxel_stage_shapes(std::vector<ParamShape>& out, const VoxelStageSpec& spec) {
  if (spec.project_input) append_linear_shapes(out, spec.prefix + ".in", spec.in_width, spec.width, true);
  append_attention_shapes(out, spec.attention());
}

ad::Var voxel_stage(Context& ctx, const VoxelLayout& layout, const ad::Var& point_features,
                    const VoxelStageSpec& spec) {
  ad::Var h = point_features;
  if (spec.project_input) {
    h = ad::linear(h, ctx.param(spec.prefix + ".in.weight"), ctx.param(spec.prefix + ".in.bias"));
    h = ad::leaky_relu(ad::instance_norm(h), spec.slope);
  }
  ad::Var vox = ad::sparse_rows(h, layout.pool);
  for (int s = 0; s < 2; ++s) vox = sparse_grid_attention(ctx, vox, layout.positions[s], layout.groups[s], spec.attention());
  return ad::sparse_rows(vox, layout.unpool);
}

}  // namespace pvflow
