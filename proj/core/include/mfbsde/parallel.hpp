#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace mfbsde {

// Process-wide default worker count; 0 means hardware concurrency.
void set_default_threads(int threads);
int default_threads();

// Runs fn(begin, end) over a static partition of [0, count). Each index is
// handled by exactly one call, so results written per index do not depend on
// the thread count.
template <class F>
void parallel_for(std::size_t count, F&& fn, int threads = 0) {
  if (threads <= 0) threads = default_threads();
  std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(threads), count);
  if (workers <= 1) {
    if (count > 0) fn(std::size_t{0}, count);
    return;
  }
  std::vector<std::thread> pool;
  std::exception_ptr error;
  std::mutex error_mutex;
  std::size_t chunk = (count + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    std::size_t begin = w * chunk, end = std::min(count, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&, begin, end] {
      try {
        fn(begin, end);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace mfbsde
