// SPDX-License-Identifier: Apache-2.0
#include "pvflow/simd/kernels.hpp"

#include <cmath>

namespace pvflow::simd {
namespace {

double dot_scalar(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

float dot_f32_scalar(const float* a, const float* b, std::size_t n) {
  float s = 0.0f;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

void axpy_scalar(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void gemm_nt_scalar(const double* x, const double* w, double* y, std::size_t rows, std::size_t cin,
                    std::size_t cout) {
  for (std::size_t i = 0; i < rows; ++i) {
    const double* xi = x + i * cin;
    double* yi = y + i * cout;
    for (std::size_t o = 0; o < cout; ++o) yi[o] = dot_scalar(xi, w + o * cin, cin);
  }
}

void gemm_nt_f32_scalar(const float* x, const float* w, float* y, std::size_t rows, std::size_t cin,
                        std::size_t cout) {
  for (std::size_t i = 0; i < rows; ++i) {
    const float* xi = x + i * cin;
    float* yi = y + i * cout;
    for (std::size_t o = 0; o < cout; ++o) yi[o] = dot_f32_scalar(xi, w + o * cin, cin);
  }
}

void sq_dist3_scalar(double px, double py, double pz, const double* xs, const double* ys, const double* zs,
                     double* out, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) {
    const double dx = xs[j] - px;
    const double dy = ys[j] - py;
    const double dz = zs[j] - pz;
    out[j] = dx * dx + dy * dy + dz * dz;
  }
}

void exp_sub_scalar(const double* x, double shift, double* out, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) out[j] = std::exp(x[j] - shift);
}

void exp_sub_each_scalar(const double* x, const double* shift, double* out, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) out[j] = std::exp(x[j] - shift[j]);
}

}  // namespace

const KernelTable& scalar_kernels() {
  static const KernelTable table{Isa::Scalar,     dot_scalar,         dot_f32_scalar,  axpy_scalar,
                                 gemm_nt_scalar,  gemm_nt_f32_scalar, sq_dist3_scalar, exp_sub_scalar,
                                 exp_sub_each_scalar};
  return table;
}

}  // namespace pvflow::simd
