// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "pvflow/nn.hpp"
#include "pvflow/tensor.hpp"

namespace pvflow {

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  friend Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
  friend Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
  friend Vec3 operator*(double s, Vec3 a) { return {s * a.x, s * a.y, s * a.z}; }
  friend bool operator==(Vec3 a, Vec3 b) = default;
};

inline double dot(Vec3 a, Vec3 b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline Vec3 cross(Vec3 a, Vec3 b) { return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x}; }
inline double norm(Vec3 a) { return std::sqrt(dot(a, a)); }

/// N points in meters plus optional per-point feature channels.
struct PointCloud {
  std::vector<Vec3> positions;
  Tensor features;  // N x C, or empty
  std::string id;

  std::size_t size() const { return positions.size(); }
  /// Throws ShapeError / NonFiniteValue when an invariant is broken.
  void validate() const;
  Tensor positions_tensor() const;
  static PointCloud from_tensor(const Tensor& xyz, std::string id = {});
};

/// K nearest neighbors per point, row-major N x K.
struct NeighborGraph {
  std::size_t k = 0;
  std::vector<std::size_t> indices;

  std::size_t points() const { return k == 0 ? 0 : indices.size() / k; }
  std::span<const std::size_t> row(std::size_t i) const { return {indices.data() + i * k, k}; }
};

/// Exact KNN excluding self, nearest first, ties to the lower index.
/// Throws KTooLarge when k >= N.
NeighborGraph knn(const PointCloud& cloud, std::size_t k);

/// As knn(), but when k > N - 1 each row lists all other points and is padded
/// with the point's own index.
NeighborGraph knn_with_fallback(const PointCloud& cloud, std::size_t k);

/// Permutation sorting neighbors counterclockwise in the xy-plane by azimuth in
/// (-pi, pi]; equal azimuths by xy distance, then index. A neighbor on the
/// vertical axis through the center gets azimuth 0.
std::vector<std::size_t> azimuthal_order(Vec3 center, std::span<const Vec3> neighbors);

std::vector<Vec3> direction_vectors(Vec3 center, std::span<const Vec3> ordered_neighbors);

inline constexpr double kDegenerateSqNorm = 1e-12;

struct UmbrellaNormals {
  std::vector<Vec3> normals;  // unit, or zero for a degenerate pair
  Vec3 averaged;              // unit, or zero when degenerate
  bool degenerate = false;
};

/// Cross products of cyclically adjacent directions (the last pairs with the first).
UmbrellaNormals umbrella_normals(std::span<const Vec3> directions);

struct Polar {
  double r = 0.0, theta = 0.0, phi = 0.0;
};

/// Two-argument arctangents; phi = 0 on the z axis and theta = 0 at the origin.
Polar cartesian_to_polar(Vec3 p);

/// Per-point umbrella geometry. raw holds one row per (point, neighbor) pair:
/// [unit normal (3), polar of the neighbor offset (3)], grouped by point.
struct UmbrellaFeatures {
  std::size_t k = 0;
  Tensor normals;  // N x 3 averaged normals
  Tensor polar;    // N x 3 (r, theta, phi) of each point
  Tensor raw;      // (N * k) x 6
  std::vector<bool> degenerate;
};

UmbrellaFeatures umbrella_features(const PointCloud& cloud, const NeighborGraph& graph);

inline constexpr std::size_t kUmbrellaPairWidth = 6;

/// Surface features: raw pair rows through the shared MLP, max-pooled per point.
ad::Var usfe(Context& ctx, const UmbrellaFeatures& umbrella, const MlpSpec& mlp);

/// Convenience: KNN + umbrella + MLP, no tape.
Tensor usfe(const PointCloud& cloud, std::size_t k, const ParamStore& params, const MlpSpec& mlp);

}  // namespace pvflow
