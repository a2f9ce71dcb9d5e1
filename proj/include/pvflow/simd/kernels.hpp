// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string_view>

namespace pvflow::simd {

enum class Isa { Scalar, Avx2 };

constexpr std::string_view to_string(Isa isa) { return isa == Isa::Avx2 ? "avx2" : "scalar"; }

/// Inner-loop kernels used by the dense layers, the cost matrix and KNN.
/// The scalar table is the reference; every other table must agree with it
/// to rounding (bit-exact for sq_dist3, which does no reductions).
struct KernelTable {
  Isa isa;
  double (*dot)(const double* a, const double* b, std::size_t n);
  float (*dot_f32)(const float* a, const float* b, std::size_t n);
  // y += alpha * x
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // y[i, o] = sum_c x[i, c] * w[o, c]; x is rows x cin, w is cout x cin, y is rows x cout
  void (*gemm_nt)(const double* x, const double* w, double* y, std::size_t rows, std::size_t cin,
                  std::size_t cout);
  void (*gemm_nt_f32)(const float* x, const float* w, float* y, std::size_t rows, std::size_t cin,
                      std::size_t cout);
  // out[j] = |(xs[j], ys[j], zs[j]) - (px, py, pz)|^2
  void (*sq_dist3)(double px, double py, double pz, const double* xs, const double* ys, const double* zs,
                   double* out, std::size_t n);
  // out[j] = exp(x[j] - shift); within a few ulp of std::exp
  void (*exp_sub)(const double* x, double shift, double* out, std::size_t n);
  // out[j] = exp(x[j] - shift[j])
  void (*exp_sub_each)(const double* x, const double* shift, double* out, std::size_t n);
};

const KernelTable& scalar_kernels();

/// nullptr when the variant was not compiled in or the CPU lacks the feature.
const KernelTable* avx2_kernels();

/// Best table for this machine unless overridden by set_isa() or PVFLOW_ISA=scalar.
const KernelTable& kernels();

/// Returns false (and changes nothing) when the requested ISA is unavailable.
bool set_isa(Isa isa);
Isa active_isa();

}  // namespace pvflow::simd
