#pragma once

#include <cstddef>
#include <functional>

namespace bq2 {

// Number of workers to use when the caller asks for 0 (= all logical CPUs).
int resolve_workers(int requested);

// Runs fn(i) for i in [0, n) on up to `workers` threads. Work items must be
// independent; callers write results into per-index slots so the outcome does
// not depend on the schedule. The exception of the lowest failing index is
// rethrown after all workers stop.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn);

}  // namespace bq2
