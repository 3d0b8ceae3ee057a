#pragma once

#include <cstddef>
#include <functional>

namespace absentia {

/// Worker count used by parallel_for; 1 by default.
int num_threads();
void set_num_threads(int n);

/// Calls body(i) for i in [0, n), split over num_threads() workers. Each
/// index is handled exactly once, so results written per index are
/// independent of the thread count. The first exception is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace absentia
