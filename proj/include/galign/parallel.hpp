#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <functional>
#include <thread>
#include <vector>

namespace galign {

// Process-wide worker cap, set once from --jobs. 0 = hardware concurrency.
inline int& max_jobs() {
  static int jobs = 0;
  return jobs;
}

inline int effective_jobs() {
  int j = max_jobs();
  if (j <= 0) j = int(std::thread::hardware_concurrency());
  return std::max(1, j);
}

// Static block partition: deterministic work assignment regardless of timing.
// Callers must make any accumulation order-independent or reduce per-block.
template <typename Fn>
void parallel_for(int64_t n, Fn&& fn) {
  int jobs = effective_jobs();
  if (n <= 0) return;
  if (jobs == 1 || n == 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  int workers = int(std::min<int64_t>(jobs, n));
  std::vector<std::thread> threads;
  threads.reserve(workers - 1);
  auto run_block = [&](int w) {
    int64_t lo = n * w / workers, hi = n * (w + 1) / workers;
    for (int64_t i = lo; i < hi; ++i) fn(i);
  };
  for (int w = 1; w < workers; ++w) threads.emplace_back(run_block, w);
  run_block(0);
  for (auto& t : threads) t.join();
}

}  // namespace galign
