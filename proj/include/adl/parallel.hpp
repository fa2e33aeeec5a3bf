#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace adl::parallel {

namespace detail {
inline std::atomic<int>& thread_override() {
  static std::atomic<int> value{0};
  return value;
}

inline bool& inside_region() {
  thread_local bool inside = false;
  return inside;
}

struct RegionGuard {
  bool previous;
  RegionGuard() : previous(inside_region()) { inside_region() = true; }
  ~RegionGuard() { inside_region() = previous; }
};
}  // namespace detail

/// Caps the worker count for subsequent parallel loops; 0 restores the default.
inline void set_max_threads(int n) { detail::thread_override().store(std::max(0, n)); }

/// Worker count: explicit override, else ADL_THREADS, else hardware concurrency.
inline int max_threads() {
  if (int o = detail::thread_override().load(); o > 0) return o;
  if (const char* env = std::getenv("ADL_THREADS")) {
    try {
      int n = std::stoi(env);
      if (n > 0) return n;
    } catch (...) {
    }
  }
  return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

/// Runs body(i) for i in [0, n). Every index is processed exactly once and
/// independently, so results never depend on the thread count. Calls made
/// from inside another parallel_for run serially on the calling thread.
template <typename Body>
void parallel_for(std::size_t n, Body&& body) {
  const auto workers =
      detail::inside_region() ? std::size_t{1} : std::min<std::size_t>(static_cast<std::size_t>(max_threads()), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    detail::RegionGuard guard;
    for (;;) {
      std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        body(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        next.store(n);
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace adl::parallel
