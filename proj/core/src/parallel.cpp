#include "mfbsde/parallel.hpp"

#include <atomic>

namespace mfbsde {

namespace {
std::atomic<int> g_threads{1};
}

void set_default_threads(int threads) {
  if (threads <= 0) threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  g_threads = threads;
}

int default_threads() { return g_threads; }

}  // namespace mfbsde
