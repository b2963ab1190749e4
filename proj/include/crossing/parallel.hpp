#pragma once

#include <cstddef>
#include <functional>

namespace crossing {

// Worker cap: CROSSING_ATTN_THREADS when set to a positive integer, otherwise
// the hardware concurrency (at least 1).
std::size_t worker_count();

// Runs fn(i) for i in [0, n). Each index is handled by exactly one worker, so
// results written to per-index slots are independent of scheduling.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace crossing
