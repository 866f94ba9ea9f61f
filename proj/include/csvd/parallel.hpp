#pragma once

#include <cstddef>
#include <functional>

namespace csvd {

/// Worker count from CSVD_THREADS (0 or unset = hardware concurrency).
std::size_t thread_count();

/// Runs fn(i) for i in [0, n). Each index is visited exactly once; callers
/// must write results into per-index slots so the outcome does not depend
/// on scheduling.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace csvd
