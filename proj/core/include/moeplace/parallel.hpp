// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>

namespace moeplace {

/// Worker count for parallel sections: hardware concurrency, capped by the
/// MOE_PLACER_THREADS environment variable when set. Always >= 1.
unsigned worker_count();

/// Runs fn(i) for i in [0, n), fanned out over worker_count() threads.
/// Iterations must be independent; the first exception thrown by any
/// worker is rethrown on the calling thread after all workers join.
void parallel_for(std::size_t n, const std::function<void(std::size_t)> &fn);

} // namespace moeplace
