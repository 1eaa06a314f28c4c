#pragma once

#include <functional>

namespace fontctl {

// Runs fn(0..n-1) on up to `workers` threads (static interleaved split).
// The first exception thrown by any call is rethrown after all threads join.
void parallel_for(int n, int workers, const std::function<void(int)>& fn);

// std::thread::hardware_concurrency(), at least 1.
int default_workers();

}  // namespace fontctl
