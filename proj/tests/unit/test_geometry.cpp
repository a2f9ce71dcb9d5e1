// SPDX-License-Identifier: Apache-2.0
#include <numbers>

#include "doctest.h"
#include "../oracles.hpp"

using namespace pvflow;

namespace {
std::vector<std::size_t> as_vec(std::span<const std::size_t> s) { return {s.begin(), s.end()}; }
}  // namespace

TEST_CASE("knn matches brute force and breaks ties by index") {
  const PointCloud c = oracle::random_cloud(120, 4);
  for (std::size_t k : {1u, 5u, 20u}) {
    const NeighborGraph g = knn(c, k);
    const auto ref = oracle::brute_knn(c, k);
    for (std::size_t i = 0; i < c.size(); ++i) CHECK(as_vec(g.row(i)) == ref[i]);
  }
  PointCloud line;
  for (int i = 0; i < 5; ++i) line.positions.push_back({double(i), 0, 0});
  const NeighborGraph g = knn(line, 2);
  CHECK(as_vec(g.row(2)) == std::vector<std::size_t>{1, 3});
  CHECK(as_vec(g.row(0)) == std::vector<std::size_t>{1, 2});
}

TEST_CASE("knn rejects k >= N and the fallback pads with self") {
  const PointCloud c = oracle::random_cloud(4, 1);
  try {
    knn(c, 4);
    FAIL("expected KTooLarge");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::KTooLarge);
  }
  const NeighborGraph g = knn_with_fallback(c, 6);
  CHECK(g.k == 6);
  for (std::size_t i = 0; i < 4; ++i) {
    const auto row = as_vec(g.row(i));
    CHECK(std::count(row.begin(), row.end(), i) == 3);
    for (std::size_t j = 0; j < 4; ++j)
      if (j != i) CHECK(std::count(row.begin(), row.end(), j) == 1);
  }
}

TEST_CASE("azimuthal order is counterclockwise from -pi") {
  const Vec3 c{0, 0, 0};
  const std::vector<Vec3> n = {{1, 0, 0}, {0, 1, 0}, {-1, 0, 0}, {0, -1, 0}, {0, 0, 2}};
  // azimuths: 0, pi/2, pi, -pi/2, and 0 for the vertical one (closer in xy: 0 < 1)
  CHECK(azimuthal_order(c, n) == std::vector<std::size_t>{3, 4, 0, 1, 2});
  const std::vector<Vec3> same = {{2, 2, 0}, {1, 1, 0}, {1, 1, 5}};
  CHECK(azimuthal_order(c, same) == std::vector<std::size_t>{1, 2, 0});
}

TEST_CASE("umbrella normals on a planar fan point along z") {
  std::vector<Vec3> dirs;
  for (int i = 0; i < 6; ++i) {
    const double a = i * std::numbers::pi / 3.0;
    dirs.push_back({std::cos(a), std::sin(a), 0.0});
  }
  const UmbrellaNormals u = umbrella_normals(dirs);
  CHECK_FALSE(u.degenerate);
  for (const Vec3& n : u.normals) CHECK(n.z == doctest::Approx(1.0));
  CHECK(u.averaged.z == doctest::Approx(1.0));

  const std::vector<Vec3> collinear = {{1, 0, 0}, {2, 0, 0}, {-1, 0, 0}};
  const UmbrellaNormals d = umbrella_normals(collinear);
  CHECK(d.degenerate);
  CHECK(norm(d.averaged) == 0.0);
}

TEST_CASE("polar coordinates") {
  const Polar p = cartesian_to_polar({0, 0, 0});
  CHECK(p.r == 0.0);
  CHECK(p.theta == 0.0);
  CHECK(p.phi == 0.0);
  const Polar q = cartesian_to_polar({0, 2, 0});
  CHECK(q.r == doctest::Approx(2.0));
  CHECK(q.theta == 0.0);  // elevation above the xy-plane
  CHECK(q.phi == doctest::Approx(std::numbers::pi / 2));
  const Polar up = cartesian_to_polar({0, 0, 3});
  CHECK(up.theta == doctest::Approx(std::numbers::pi / 2));
  CHECK(up.phi == 0.0);
  CHECK(cartesian_to_polar({-1, -1e-300, 0}).phi == doctest::Approx(std::numbers::pi));
}

TEST_CASE("umbrella feature shapes") {
  const PointCloud c = oracle::random_cloud(50, 8);
  const UmbrellaFeatures u = umbrella_features(c, knn(c, 9));
  CHECK(u.k == 9);
  CHECK(u.raw.rows() == 450);
  CHECK(u.raw.cols() == kUmbrellaPairWidth);
  CHECK(u.normals.rows() == 50);
  for (std::size_t i = 0; i < 50; ++i) {
    const double len = std::sqrt(u.normals(i, 0) * u.normals(i, 0) + u.normals(i, 1) * u.normals(i, 1) +
                                 u.normals(i, 2) * u.normals(i, 2));
    CHECK((u.degenerate[i] ? len == 0.0 : std::abs(len - 1.0) < 1e-12));
  }
}

TEST_CASE("point cloud validation") {
  PointCloud c = oracle::random_cloud(3, 1);
  c.positions[1].y = std::nan("");
  try {
    c.validate();
    FAIL("expected NonFiniteValue");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NonFiniteValue);
  }
  PointCloud d = oracle::random_cloud(3, 1);
  d.features = Tensor(2, 4);
  CHECK_THROWS_AS(d.validate(), Error);
  const PointCloud e = PointCloud::from_tensor(oracle::random_cloud(5, 2).positions_tensor());
  CHECK(e.positions == oracle::random_cloud(5, 2).positions);
}

TEST_CASE("polar coordinates round trip and rotate with z") {
  const PointCloud c = oracle::random_cloud(64, 21);
  const double alpha = 0.7;
  for (const Vec3& raw : c.positions) {
    const Vec3 p = raw - Vec3{1.0, 1.0, 0.5};  // all octants
    const Polar q = cartesian_to_polar(p);
    const Vec3 back{q.r * std::cos(q.theta) * std::cos(q.phi), q.r * std::cos(q.theta) * std::sin(q.phi),
                    q.r * std::sin(q.theta)};
    CHECK(norm(back - p) <= 1e-9 * q.r);

    const Vec3 rot{std::cos(alpha) * p.x - std::sin(alpha) * p.y, std::sin(alpha) * p.x + std::cos(alpha) * p.y, p.z};
    const Polar qr = cartesian_to_polar(rot);
    CHECK(qr.r == doctest::Approx(q.r).epsilon(1e-12));
    CHECK(qr.theta == doctest::Approx(q.theta).epsilon(1e-12));
    const double shift = std::remainder(qr.phi - q.phi - alpha, 2.0 * std::numbers::pi);
    CHECK(std::abs(shift) < 1e-12);
  }
}
