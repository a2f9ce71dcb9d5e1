// SPDX-License-Identifier: Apache-2.0
#include "pvflow/geometry.hpp"

#include <algorithm>
#include <limits>
#include <numbers>
#include <numeric>

#include "pvflow/parallel.hpp"
#include "pvflow/simd/kernels.hpp"

namespace pvflow {

void PointCloud::validate() const {
  if (positions.empty()) fail(ErrorCode::ShapeError, "point cloud '" + id + "' is empty");
  for (std::size_t i = 0; i < positions.size(); ++i) {
    const Vec3 p = positions[i];
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z)) {
      fail(ErrorCode::NonFiniteValue, "point " + std::to_string(i) + " of '" + id + "' is not finite");
    }
  }
  if (!features.empty() && features.rows() != positions.size()) {
    fail(ErrorCode::ShapeError, "feature rows " + std::to_string(features.rows()) + " != points " +
                                    std::to_string(positions.size()));
  }
}

Tensor PointCloud::positions_tensor() const {
  Tensor t(positions.size(), 3);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    t(i, 0) = positions[i].x;
    t(i, 1) = positions[i].y;
    t(i, 2) = positions[i].z;
  }
  return t;
}

PointCloud PointCloud::from_tensor(const Tensor& xyz, std::string id) {
  if (xyz.cols() != 3) fail(ErrorCode::ShapeError, "positions must be N x 3, got " + xyz.shape_string());
  PointCloud c;
  c.id = std::move(id);
  c.positions.resize(xyz.rows());
  for (std::size_t i = 0; i < xyz.rows(); ++i) c.positions[i] = {xyz(i, 0), xyz(i, 1), xyz(i, 2)};
  return c;
}

namespace {

NeighborGraph knn_impl(const PointCloud& cloud, std::size_t k, std::size_t found) {
  const std::size_t n = cloud.size();
  std::vector<double> xs(n), ys(n), zs(n);
  for (std::size_t i = 0; i < n; ++i) {
    xs[i] = cloud.positions[i].x;
    ys[i] = cloud.positions[i].y;
    zs[i] = cloud.positions[i].z;
  }
  NeighborGraph g;
  g.k = k;
  g.indices.assign(n * k, 0);
  const auto& kern = simd::kernels();
  parallel_for(
      n,
      [&](std::size_t bgn, std::size_t end) {
        std::vector<double> d(n);
        std::vector<std::size_t> order(n);
        for (std::size_t i = bgn; i < end; ++i) {
          const Vec3 p = cloud.positions[i];
          kern.sq_dist3(p.x, p.y, p.z, xs.data(), ys.data(), zs.data(), d.data(), n);
          d[i] = std::numeric_limits<double>::infinity();
          std::iota(order.begin(), order.end(), std::size_t{0});
          auto closer = [&](std::size_t a, std::size_t b) { return d[a] < d[b] || (d[a] == d[b] && a < b); };
          if (found < n) std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(found), order.end(), closer);
          std::sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(found), closer);
          std::size_t* row = g.indices.data() + i * k;
          for (std::size_t j = 0; j < found; ++j) row[j] = order[j];
          for (std::size_t j = found; j < k; ++j) row[j] = i;
        }
      },
      128);
  return g;
}

}  // namespace

NeighborGraph knn(const PointCloud& cloud, std::size_t k) {
  const std::size_t n = cloud.size();
  if (k < 1) fail(ErrorCode::KTooLarge, "k must be at least 1");
  if (k >= n) {
    fail(ErrorCode::KTooLarge, "k = " + std::to_string(k) + " needs at least " + std::to_string(k + 1) +
                                   " points, cloud has " + std::to_string(n));
  }
  return knn_impl(cloud, k, k);
}

NeighborGraph knn_with_fallback(const PointCloud& cloud, std::size_t k) {
  const std::size_t n = cloud.size();
  if (k < 1 || n < 1) fail(ErrorCode::KTooLarge, "k and N must be at least 1");
  return knn_impl(cloud, k, std::min(k, n - 1));
}

std::vector<std::size_t> azimuthal_order(Vec3 center, std::span<const Vec3> neighbors) {
  const std::size_t m = neighbors.size();
  std::vector<double> az(m), rad(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double dx = neighbors[i].x - center.x;
    const double dy = neighbors[i].y - center.y;
    double a = (dx == 0.0 && dy == 0.0) ? 0.0 : std::atan2(dy, dx);
    if (a <= -std::numbers::pi) a = std::numbers::pi;
    az[i] = a;
    rad[i] = dx * dx + dy * dy;
  }
  std::vector<std::size_t> perm(m);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::sort(perm.begin(), perm.end(), [&](std::size_t a, std::size_t b) {
    if (az[a] != az[b]) return az[a] < az[b];
    if (rad[a] != rad[b]) return rad[a] < rad[b];
    return a < b;
  });
  return perm;
}

std::vector<Vec3> direction_vectors(Vec3 center, std::span<const Vec3> ordered_neighbors) {
  std::vector<Vec3> d;
  d.reserve(ordered_neighbors.size());
  for (const Vec3& p : ordered_neighbors) d.push_back(p - center);
  return d;
}

UmbrellaNormals umbrella_normals(std::span<const Vec3> directions) {
  const std::size_t k = directions.size();
  if (k < 2) fail(ErrorCode::ShapeError, "an umbrella needs at least two directions");
  UmbrellaNormals out;
  out.normals.resize(k);
  Vec3 acc;
  for (std::size_t i = 0; i < k; ++i) {
    const Vec3 v = cross(directions[i], directions[(i + 1) % k]);
    const double n2 = dot(v, v);
    if (n2 > kDegenerateSqNorm) {
      out.normals[i] = (1.0 / std::sqrt(n2)) * v;
      acc = acc + out.normals[i];
    }
  }
  acc = (1.0 / static_cast<double>(k)) * acc;
  const double a2 = dot(acc, acc);
  if (a2 > kDegenerateSqNorm) {
    out.averaged = (1.0 / std::sqrt(a2)) * acc;
  } else {
    out.degenerate = true;
  }
  return out;
}

Polar cartesian_to_polar(Vec3 p) {
  Polar out;
  const double rxy = std::sqrt(p.x * p.x + p.y * p.y);
  out.r = std::sqrt(p.x * p.x + p.y * p.y + p.z * p.z);
  out.theta = out.r == 0.0 ? 0.0 : std::atan2(p.z, rxy);
  out.phi = rxy == 0.0 ? 0.0 : std::atan2(p.y, p.x);
  if (out.phi <= -std::numbers::pi) out.phi = std::numbers::pi;
  return out;
}

UmbrellaFeatures umbrella_features(const PointCloud& cloud, const NeighborGraph& graph) {
  const std::size_t n = cloud.size(), k = graph.k;
  if (graph.points() != n) fail(ErrorCode::ShapeError, "neighbor graph does not match cloud");
  if (k < 2) fail(ErrorCode::ShapeError, "umbrella features need k >= 2");
  UmbrellaFeatures u;
  u.k = k;
  u.normals = Tensor(n, 3);
  u.polar = Tensor(n, 3);
  u.raw = Tensor(n * k, kUmbrellaPairWidth);
  u.degenerate.assign(n, false);
  std::vector<char> degenerate(n, 0);
  parallel_for(
      n,
      [&](std::size_t bgn, std::size_t end) {
        std::vector<Vec3> nb(k), ordered(k);
        for (std::size_t i = bgn; i < end; ++i) {
          const Vec3 center = cloud.positions[i];
          const auto row = graph.row(i);
          for (std::size_t j = 0; j < k; ++j) nb[j] = cloud.positions[row[j]];
          const auto perm = azimuthal_order(center, nb);
          for (std::size_t j = 0; j < k; ++j) ordered[j] = nb[perm[j]];
          const auto dirs = direction_vectors(center, ordered);
          const auto um = umbrella_normals(dirs);
          u.normals(i, 0) = um.averaged.x;
          u.normals(i, 1) = um.averaged.y;
          u.normals(i, 2) = um.averaged.z;
          const Polar pp = cartesian_to_polar(center);
          u.polar(i, 0) = pp.r;
          u.polar(i, 1) = pp.theta;
          u.polar(i, 2) = pp.phi;
          degenerate[i] = um.degenerate ? 1 : 0;
          for (std::size_t j = 0; j < k; ++j) {
            double* r = u.raw.data() + (i * k + j) * kUmbrellaPairWidth;
            const Polar q = cartesian_to_polar(dirs[j]);
            r[0] = um.normals[j].x;
            r[1] = um.normals[j].y;
            r[2] = um.normals[j].z;
            r[3] = q.r;
            r[4] = q.theta;
            r[5] = q.phi;
          }
        }
      },
      256);
  for (std::size_t i = 0; i < n; ++i) u.degenerate[i] = degenerate[i] != 0;
  return u;
}

ad::Var usfe(Context& ctx, const UmbrellaFeatures& umbrella, const MlpSpec& mlp) {
  ad::Var rows = ctx.input(umbrella.raw);
  return ad::group_max(mlp_forward(ctx, rows, mlp), umbrella.k);
}

Tensor usfe(const PointCloud& cloud, std::size_t k, const ParamStore& params, const MlpSpec& mlp) {
  const auto graph = knn(cloud, k);
  Context ctx(params);
  return usfe(ctx, umbrella_features(cloud, graph), mlp).value();
}

}  // namespace pvflow
