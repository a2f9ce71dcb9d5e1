// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>

namespace pvflow {

/// Worker count used by parallel_for. 1 (the default) runs inline.
void set_num_threads(int n);
int num_threads();

/// Splits [0, n) into contiguous chunks, one per worker, and calls fn(begin, end)
/// on each. Work is partitioned by index only, so any per-index computation gives
/// the same result for every thread count. Runs inline below min_parallel.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn,
                  std::size_t min_parallel = 64);

}  // namespace pvflow
