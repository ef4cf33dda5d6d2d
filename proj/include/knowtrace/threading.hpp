// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace knowtrace {

/// Worker count: KNOWTRACE_THREADS env var, default 1 (fully serial).
inline int thread_count() {
  if (const char* env = std::getenv("KNOWTRACE_THREADS")) {
    int n = std::atoi(env);
    if (n >= 1) return n;
  }
  return 1;
}

// Slot-parallel map: body(i) writes only to slot i of preallocated output,
// so results are identical for any thread count.
inline void parallel_for(size_t n, const std::function<void(size_t)>& body) {
  const int workers = thread_count();
  if (workers <= 1 || n <= 1) {
    for (size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<size_t> next{0};
  std::vector<std::thread> pool;
  const int active = static_cast<int>(std::min<size_t>(workers, n));
  pool.reserve(active);
  for (int w = 0; w < active; ++w) {
    pool.emplace_back([&] {
      for (size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) body(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace knowtrace
