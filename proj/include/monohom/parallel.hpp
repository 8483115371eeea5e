#pragma once

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <thread>
#include <vector>

namespace monohom {

/// Worker count: MONOHOM_THREADS when set to a positive integer, otherwise
/// the hardware concurrency (at least 1).
inline int env_thread_count() {
  if (const char* s = std::getenv("MONOHOM_THREADS")) {
    const int v = std::atoi(s);
    if (v >= 1) return v;
  }
  const unsigned hc = std::thread::hardware_concurrency();
  return hc > 0 ? static_cast<int>(hc) : 1;
}

/// Runs fn(i) for i in [0, n).  Work is split by index stride so the i -> fn
/// mapping is independent of the thread count; results must be written to
/// per-index slots for deterministic aggregation.  The exception thrown at
/// the lowest index, if any, is rethrown after all workers join.
template <class Fn>
void parallel_for_index(int n, Fn&& fn) {
  const int threads = std::max(1, std::min(env_thread_count(), n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errs(n);
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (int w = 0; w < threads; ++w)
    pool.emplace_back([&, w] {
      for (int i = w; i < n; i += threads) {
        try {
          fn(i);
        } catch (...) {
          errs[i] = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  for (int i = 0; i < n; ++i)
    if (errs[i]) std::rethrow_exception(errs[i]);
}

}  // namespace monohom
