#pragma once

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace mlbseg {

// MLB_BOOT_THREADS caps worker threads; default is hardware concurrency.
inline int thread_cap() {
  if (const char* env = std::getenv("MLB_BOOT_THREADS")) {
    int n = std::atoi(env);
    if (n >= 1) return n;
  }
  unsigned hc = std::thread::hardware_concurrency();
  return hc ? static_cast<int>(hc) : 1;
}

namespace detail {
inline thread_local int par_depth = 0;
}

// Runs f(i) for i in [0,n). Workers own disjoint index ranges; any combining
// of results is the caller's job and must happen in index order so that
// results do not depend on the thread count. Nested calls run serially.
template <class F>
void parallel_for(int n, F&& f) {
  int workers = std::min(n, thread_cap());
  if (workers <= 1 || detail::par_depth > 0) {
    for (int i = 0; i < n; ++i) f(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(workers));
  std::exception_ptr first_error;
  std::mutex error_mu;
  for (int t = 0; t < workers; ++t) {
    pool.emplace_back([&, t] {
      detail::par_depth++;
      try {
        for (int i = t; i < n; i += workers) f(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mu);
        if (!first_error) first_error = std::current_exception();
      }
      detail::par_depth--;
    });
  }
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace mlbseg
