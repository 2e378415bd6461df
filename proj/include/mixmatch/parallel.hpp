#ifndef MIXMATCH_PARALLEL_HPP
#define MIXMATCH_PARALLEL_HPP

#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace mixmatch {

// Worker cap for parallel_for. 0 means hardware concurrency. Results never
// depend on the cap: work items are pure and outputs are written by index.
void set_max_threads(int n);
int max_threads();

// Runs fn(i) for i in [0, n) on up to max_threads() workers with static
// contiguous partitioning. The first exception thrown by any worker is
// rethrown on the calling thread after all workers join.
void parallel_for(int n, const std::function<void(int)>& fn);

}  // namespace mixmatch

#endif  // MIXMATCH_PARALLEL_HPP
