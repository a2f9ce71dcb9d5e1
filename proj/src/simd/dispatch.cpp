// SPDX-License-Identifier: Apache-2.0
#include <atomic>
#include <cstdlib>
#include <string_view>

#include "pvflow/simd/kernels.hpp"

namespace pvflow::simd {

#ifdef PVFLOW_HAVE_AVX2
const KernelTable& avx2_table();
#endif

const KernelTable* avx2_kernels() {
#if defined(PVFLOW_HAVE_AVX2) && (defined(__x86_64__) || defined(__i386__))
  static const bool supported = __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
  return supported ? &avx2_table() : nullptr;
#else
  return nullptr;
#endif
}

namespace {

const KernelTable* initial_table() {
  if (const char* env = std::getenv("PVFLOW_ISA"); env != nullptr && std::string_view(env) == "scalar") {
    return &scalar_kernels();
  }
  if (const KernelTable* t = avx2_kernels()) return t;
  return &scalar_kernels();
}

std::atomic<const KernelTable*>& active_table() {
  static std::atomic<const KernelTable*> table{initial_table()};
  return table;
}

}  // namespace

const KernelTable& kernels() { return *active_table().load(std::memory_order_acquire); }

bool set_isa(Isa isa) {
  const KernelTable* t = isa == Isa::Avx2 ? avx2_kernels() : &scalar_kernels();
  if (t == nullptr) return false;
  active_table().store(t, std::memory_order_release);
  return true;
}

Isa active_isa() { return kernels().isa; }

}  // namespace pvflow::simd
