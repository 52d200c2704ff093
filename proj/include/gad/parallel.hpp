#pragma once

#include <functional>

#include "gad/common.hpp"

namespace gad::par {

// Worker cap: GAD_THREADS env var if set, else hardware concurrency.
int thread_count();
void set_thread_count(int n);

// Runs fn(begin, end) over disjoint chunks of [0, n). Chunks are assigned
// deterministically; fn must only write to its own range.
void for_range(Index n, Index grain, const std::function<void(Index, Index)>& fn);

}  // namespace gad::par
