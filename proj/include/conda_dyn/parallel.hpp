#pragma once

#include <cstddef>
#include <functional>

namespace conda_dyn {

/// Worker count: CONDA_DYN_THREADS if set and positive, else the hardware
/// concurrency (at least 1).
std::size_t worker_count();

/// Runs fn(i) for i in [0, n). Work items are claimed dynamically, but each
/// item writes only its own output slot, so results do not depend on the
/// number of workers. The first exception thrown is rethrown after joining.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

} // namespace conda_dyn
