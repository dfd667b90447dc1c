#pragma once

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace sparse_ekp {

/// Thread cap from SPARSE_EKP_THREADS (defaults to hardware concurrency).
inline unsigned thread_budget() {
  unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("SPARSE_EKP_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v >= 1) return static_cast<unsigned>(v);
    } catch (const std::exception&) {
    }
  }
  return hw;
}

/// Runs fn(i) for i in [0, n) on up to `threads` threads. If any call throws,
/// the exception from the lowest failing index is rethrown after all workers
/// finish.
template <typename Fn>
void parallel_for(long n, unsigned threads, Fn&& fn) {
  if (n <= 0) return;
  const long workers = std::min<long>(std::max(1u, threads), n);
  if (workers == 1) {
    for (long i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
  {
    std::vector<std::jthread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (long w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (long i = w; i < n; i += workers) {
          try {
            fn(i);
          } catch (...) {
            errors[static_cast<std::size_t>(i)] = std::current_exception();
          }
        }
      });
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace sparse_ekp
