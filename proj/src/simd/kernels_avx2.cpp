// SPDX-License-Identifier: Apache-2.0
// Compiled with -mavx2 -mfma -ffp-contract=off; only reached after a runtime CPU check.
#include <immintrin.h>

#include <cmath>
#include <iterator>

#include "pvflow/simd/kernels.hpp"

namespace pvflow::simd {
namespace {

inline double hsum(__m256d v) {
  const __m128d lo = _mm256_castpd256_pd128(v);
  const __m128d hi = _mm256_extractf128_pd(v, 1);
  const __m128d s = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(_mm_add_sd(s, _mm_unpackhi_pd(s, s)));
}

inline float hsum(__m256 v) {
  const __m128 lo = _mm256_castps256_ps128(v);
  const __m128 hi = _mm256_extractf128_ps(v, 1);
  __m128 s = _mm_add_ps(lo, hi);
  s = _mm_add_ps(s, _mm_movehl_ps(s, s));
  s = _mm_add_ss(s, _mm_shuffle_ps(s, s, 0x55));
  return _mm_cvtss_f32(s);
}

double dot_avx2(const double* a, const double* b, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
  }
  for (; i + 4 <= n; i += 4) acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
  double s = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

float dot_f32_avx2(const float* a, const float* b, std::size_t n) {
  __m256 acc = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) acc = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc);
  float s = hsum(acc);
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

void axpy_avx2(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

// Four output channels per pass so each x load feeds four FMAs.
void gemm_nt_avx2(const double* x, const double* w, double* y, std::size_t rows, std::size_t cin,
                  std::size_t cout) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * cin;
    double* yr = y + r * cout;
    std::size_t o = 0;
    for (; o + 4 <= cout; o += 4) {
      const double* w0 = w + o * cin;
      const double* w1 = w0 + cin;
      const double* w2 = w1 + cin;
      const double* w3 = w2 + cin;
      __m256d a0 = _mm256_setzero_pd(), a1 = _mm256_setzero_pd();
      __m256d a2 = _mm256_setzero_pd(), a3 = _mm256_setzero_pd();
      std::size_t c = 0;
      for (; c + 4 <= cin; c += 4) {
        const __m256d xv = _mm256_loadu_pd(xr + c);
        a0 = _mm256_fmadd_pd(xv, _mm256_loadu_pd(w0 + c), a0);
        a1 = _mm256_fmadd_pd(xv, _mm256_loadu_pd(w1 + c), a1);
        a2 = _mm256_fmadd_pd(xv, _mm256_loadu_pd(w2 + c), a2);
        a3 = _mm256_fmadd_pd(xv, _mm256_loadu_pd(w3 + c), a3);
      }
      double s0 = hsum(a0), s1 = hsum(a1), s2 = hsum(a2), s3 = hsum(a3);
      for (; c < cin; ++c) {
        s0 += xr[c] * w0[c];
        s1 += xr[c] * w1[c];
        s2 += xr[c] * w2[c];
        s3 += xr[c] * w3[c];
      }
      yr[o] = s0;
      yr[o + 1] = s1;
      yr[o + 2] = s2;
      yr[o + 3] = s3;
    }
    for (; o < cout; ++o) {
      const double* wo = w + o * cin;
      __m256d a = _mm256_setzero_pd();
      std::size_t c = 0;
      for (; c + 4 <= cin; c += 4) a = _mm256_fmadd_pd(_mm256_loadu_pd(xr + c), _mm256_loadu_pd(wo + c), a);
      double s = hsum(a);
      for (; c < cin; ++c) s += xr[c] * wo[c];
      yr[o] = s;
    }
  }
}

void gemm_nt_f32_avx2(const float* x, const float* w, float* y, std::size_t rows, std::size_t cin,
                      std::size_t cout) {
  for (std::size_t r = 0; r < rows; ++r) {
    const float* xr = x + r * cin;
    float* yr = y + r * cout;
    for (std::size_t o = 0; o < cout; ++o) yr[o] = dot_f32_avx2(xr, w + o * cin, cin);
  }
}

void sq_dist3_avx2(double px, double py, double pz, const double* xs, const double* ys, const double* zs,
                   double* out, std::size_t n) {
  const __m256d vx = _mm256_set1_pd(px);
  const __m256d vy = _mm256_set1_pd(py);
  const __m256d vz = _mm256_set1_pd(pz);
  std::size_t j = 0;
  for (; j + 4 <= n; j += 4) {
    const __m256d dx = _mm256_sub_pd(_mm256_loadu_pd(xs + j), vx);
    const __m256d dy = _mm256_sub_pd(_mm256_loadu_pd(ys + j), vy);
    const __m256d dz = _mm256_sub_pd(_mm256_loadu_pd(zs + j), vz);
    // same association as the scalar kernel: (dx*dx + dy*dy) + dz*dz, no FMA
    const __m256d s = _mm256_add_pd(_mm256_add_pd(_mm256_mul_pd(dx, dx), _mm256_mul_pd(dy, dy)),
                                    _mm256_mul_pd(dz, dz));
    _mm256_storeu_pd(out + j, s);
  }
  for (; j < n; ++j) {
    const double dx = xs[j] - px;
    const double dy = ys[j] - py;
    const double dz = zs[j] - pz;
    out[j] = dx * dx + dy * dy + dz * dz;
  }
}

// exp(t) = 2^k exp(r), |r| <= ln2 / 2, degree-13 Taylor polynomial for exp(r).
// Results below the smallest normal double flush to zero.
inline __m256d exp4(__m256d t) {
  const __m256d lo = _mm256_set1_pd(-708.39641853226408);  // ln(DBL_MIN)
  const __m256d underflow = _mm256_cmp_pd(t, lo, _CMP_LT_OQ);
  t = _mm256_min_pd(_mm256_max_pd(t, lo), _mm256_set1_pd(709.0));
  const __m256d k = _mm256_round_pd(_mm256_mul_pd(t, _mm256_set1_pd(1.4426950408889634)),
                                    _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
  __m256d r = _mm256_fnmadd_pd(k, _mm256_set1_pd(6.93147180369123816490e-01), t);
  r = _mm256_fnmadd_pd(k, _mm256_set1_pd(1.90821492927058770002e-10), r);
  static constexpr double kInvFact[] = {1.0 / 6227020800.0, 1.0 / 479001600.0, 1.0 / 39916800.0,
                                        1.0 / 3628800.0,    1.0 / 362880.0,    1.0 / 40320.0,
                                        1.0 / 5040.0,       1.0 / 720.0,       1.0 / 120.0,
                                        1.0 / 24.0,         1.0 / 6.0,         0.5,
                                        1.0,                1.0};
  __m256d p = _mm256_set1_pd(kInvFact[0]);
  for (std::size_t i = 1; i < std::size(kInvFact); ++i) p = _mm256_fmadd_pd(p, r, _mm256_set1_pd(kInvFact[i]));
  // 2^k through the exponent field; 1.5 * 2^52 moves k into the low mantissa bits.
  const __m256i ki = _mm256_castpd_si256(_mm256_add_pd(k, _mm256_set1_pd(6755399441055744.0)));
  const __m256i bits = _mm256_slli_epi64(_mm256_add_epi64(ki, _mm256_set1_epi64x(1023)), 52);
  return _mm256_andnot_pd(underflow, _mm256_mul_pd(p, _mm256_castsi256_pd(bits)));
}

void exp_sub_avx2(const double* x, double shift, double* out, std::size_t n) {
  const __m256d s = _mm256_set1_pd(shift);
  std::size_t j = 0;
  for (; j + 4 <= n; j += 4) _mm256_storeu_pd(out + j, exp4(_mm256_sub_pd(_mm256_loadu_pd(x + j), s)));
  for (; j < n; ++j) out[j] = std::exp(x[j] - shift);
}

void exp_sub_each_avx2(const double* x, const double* shift, double* out, std::size_t n) {
  std::size_t j = 0;
  for (; j + 4 <= n; j += 4) {
    _mm256_storeu_pd(out + j, exp4(_mm256_sub_pd(_mm256_loadu_pd(x + j), _mm256_loadu_pd(shift + j))));
  }
  for (; j < n; ++j) out[j] = std::exp(x[j] - shift[j]);
}

}  // namespace

const KernelTable& avx2_table() {
  static const KernelTable table{Isa::Avx2,       dot_avx2,         dot_f32_avx2,  axpy_avx2,
                                 gemm_nt_avx2,    gemm_nt_f32_avx2, sq_dist3_avx2, exp_sub_avx2,
                                 exp_sub_each_avx2};
  return table;
}

}  // namespace pvflow::simd
