#pragma once

// Replica-level parallelism. Work items write into their own result slots, so
// outputs do not depend on the number of workers or on scheduling.

#include <cstddef>
#include <functional>

namespace mvflow {

/// Worker count: MVFLOW_WORKERS if set to a positive integer, otherwise the
/// hardware concurrency (at least 1).
int worker_count();

/// Runs body(i) for i in [0, n) on `workers` threads (0 = worker_count()).
/// The first exception thrown by any item is rethrown after all workers stop.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body, int workers = 0);

}  // namespace mvflow
