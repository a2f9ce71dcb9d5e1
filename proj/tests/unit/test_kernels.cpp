// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <cstring>
#include <limits>

#include "doctest.h"
#include "../oracles.hpp"
#include "pvflow/parallel.hpp"
#include "pvflow/simd/kernels.hpp"
#include "pvflow/tensor.hpp"

using namespace pvflow;

namespace {

std::vector<double> random_vec(std::size_t n, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  return oracle::random_tensor(1, n, seed, lo, hi).storage();
}

double ulp_distance(double a, double b) {
  if (a == b) return 0.0;
  std::int64_t ia, ib;
  std::memcpy(&ia, &a, 8);
  std::memcpy(&ib, &b, 8);
  return std::abs(static_cast<double>(ia - ib));
}

}  // namespace

TEST_CASE("tensor basics") {
  Tensor t(2, 3, {1, 2, 3, 4, 5, 6});
  CHECK(t(1, 0) == 4);
  CHECK(t.transposed()(2, 1) == 6);
  CHECK(t.shape_string() == "2x3");
  CHECK_THROWS_AS(Tensor(2, 2, std::vector<double>{1, 2, 3}), Error);
  Tensor u = t;
  u(0, 0) = std::numeric_limits<double>::infinity();
  CHECK_FALSE(u.all_finite());
  CHECK(max_abs_diff(t, Tensor(2, 3, {1, 2, 3, 4, 5, 6.5})) == doctest::Approx(0.5));
}

TEST_CASE("scalar kernels match plain loops") {
  const auto& k = simd::scalar_kernels();
  const auto a = random_vec(37, 1), b = random_vec(37, 2);
  double ref = 0.0;
  for (std::size_t i = 0; i < 37; ++i) ref += a[i] * b[i];
  CHECK(k.dot(a.data(), b.data(), 37) == doctest::Approx(ref).epsilon(1e-14));

  const Tensor x = oracle::random_tensor(5, 7, 3), w = oracle::random_tensor(4, 7, 4);
  Tensor y(5, 4);
  k.gemm_nt(x.data(), w.data(), y.data(), 5, 7, 4);
  CHECK(max_abs_diff(y, oracle::matmul(x, w.transposed())) < 1e-14);
}

TEST_CASE("avx2 kernels agree with the scalar reference") {
  const simd::KernelTable* v = simd::avx2_kernels();
  if (v == nullptr) {
    MESSAGE("AVX2 variant unavailable on this machine");
    return;
  }
  const auto& s = simd::scalar_kernels();
  for (std::size_t n : {0u, 1u, 3u, 4u, 5u, 8u, 17u, 64u, 131u}) {
    CAPTURE(n);
    const auto a = random_vec(n, 10 + n), b = random_vec(n, 20 + n);
    const double ds = s.dot(a.data(), b.data(), n), dv = v->dot(a.data(), b.data(), n);
    CHECK(std::abs(ds - dv) <= 1e-14 * (1.0 + std::abs(ds)));

    std::vector<float> fa(a.begin(), a.end()), fb(b.begin(), b.end());
    CHECK(std::abs(s.dot_f32(fa.data(), fb.data(), n) - v->dot_f32(fa.data(), fb.data(), n)) < 1e-5f);

    auto ys = b, yv = b;
    s.axpy(0.7, a.data(), ys.data(), n);
    v->axpy(0.7, a.data(), yv.data(), n);
    for (std::size_t i = 0; i < n; ++i) CHECK(ys[i] == doctest::Approx(yv[i]).epsilon(1e-15));

    const auto xs = random_vec(n, 30 + n, -5, 5), ys3 = random_vec(n, 40 + n, -5, 5), zs = random_vec(n, 50 + n, -5, 5);
    std::vector<double> o1(n), o2(n);
    s.sq_dist3(0.3, -0.2, 1.1, xs.data(), ys3.data(), zs.data(), o1.data(), n);
    v->sq_dist3(0.3, -0.2, 1.1, xs.data(), ys3.data(), zs.data(), o2.data(), n);
    CHECK(o1 == o2);
  }
  for (std::size_t cout : {1u, 3u, 4u, 9u}) {
    const Tensor x = oracle::random_tensor(6, 13, 60), w = oracle::random_tensor(cout, 13, 61);
    Tensor y1(6, cout), y2(6, cout);
    s.gemm_nt(x.data(), w.data(), y1.data(), 6, 13, cout);
    v->gemm_nt(x.data(), w.data(), y2.data(), 6, 13, cout);
    CHECK(max_abs_diff(y1, y2) < 1e-14);
  }
}

TEST_CASE("avx2 exp stays within two ulp of std::exp") {
  const simd::KernelTable* v = simd::avx2_kernels();
  if (v == nullptr) return;
  const std::size_t n = 20001;
  std::vector<double> x(n), shift(n, 0.25), got(n), each(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = -740.0 + 750.0 * static_cast<double>(i) / (n - 1);
  v->exp_sub(x.data(), 0.25, got.data(), n);
  v->exp_sub_each(x.data(), shift.data(), each.data(), n);
  double worst = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double ref = std::exp(x[i] - 0.25);
    if (ref < std::numeric_limits<double>::min()) {
      CHECK(got[i] <= std::numeric_limits<double>::min());
      continue;
    }
    worst = std::max(worst, ulp_distance(got[i], ref));
    CHECK(got[i] == each[i]);
  }
  CHECK(worst <= 2.0);
  double special[] = {0.0, -std::numeric_limits<double>::infinity()};
  double out[2];
  v->exp_sub(special, 0.0, out, 2);
  CHECK(out[0] == 1.0);
  CHECK(out[1] == 0.0);
}

TEST_CASE("isa can be forced to scalar") {
  const simd::Isa before = simd::active_isa();
  CHECK(simd::set_isa(simd::Isa::Scalar));
  CHECK(simd::kernels().isa == simd::Isa::Scalar);
  simd::set_isa(before);
  CHECK(simd::active_isa() == before);
}

TEST_CASE("parallel_for covers every index once") {
  set_num_threads(4);
  std::vector<int> hits(1000, 0);
  parallel_for(hits.size(), [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) ++hits[i];
  }, 1);
  set_num_threads(1);
  for (int h : hits) CHECK(h == 1);
}
