#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace fedqif {

// Worker threads: FEDQIF_THREADS when set, otherwise the hardware count.
inline unsigned thread_count() {
  if (const char* env = std::getenv("FEDQIF_THREADS")) {
    const int v = std::atoi(env);
    if (v > 0) return static_cast<unsigned>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

// Runs body(i) for i in [0, count) over a fixed pool; results go to
// caller-owned slots so the outcome does not depend on scheduling.
inline void parallel_for(std::size_t count, const std::function<void(std::size_t)>& body,
                         unsigned threads = thread_count()) {
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, count));
  if (threads <= 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) body(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace fedqif
