#pragma once

#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace gramclust {

/// Process-wide worker count for parallel_for; 0 means hardware concurrency.
void set_thread_count(std::size_t n);
std::size_t thread_count();

/// Run fn(i) for i in [0, n) on contiguous index chunks. Each index is
/// visited exactly once; callers must only write to disjoint, index-owned
/// slots so results never depend on the worker count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace gramclust
