#pragma once

#include <cstddef>
#include <functional>

namespace prunelab {

/// Worker cap: PRUNELAB_THREADS if set to a positive integer, otherwise the
/// hardware concurrency (at least 1).
std::size_t worker_threads();

/// Runs body(i) for i in [0, count) on up to `threads` workers. Each index is
/// executed exactly once; results must be written to per-index slots so the
/// outcome does not depend on scheduling. The first exception is rethrown.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& body,
                  std::size_t threads = worker_threads());

}  // namespace prunelab
