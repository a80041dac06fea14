#pragma once

#include <cstddef>
#include <functional>

namespace tremorank {

/// Worker count used by parallel_for. Defaults to the TREMORANK_THREADS
/// environment variable, else the hardware concurrency.
std::size_t thread_count();
void set_thread_count(std::size_t n);

/// Runs body(i) for i in [0, n). Each index is executed exactly once; callers
/// write results to per-index slots so the outcome never depends on the
/// number of workers.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace tremorank
