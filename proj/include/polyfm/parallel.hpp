#pragma once

#include <algorithm>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace polyfm {

/// Worker count from POLYFM_THREADS (default 1).
inline unsigned thread_count() {
  if (const char* env = std::getenv("POLYFM_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return static_cast<unsigned>(n);
  }
  return 1;
}

/// Runs body(begin, end) over contiguous chunks of [0, n). Chunk boundaries
/// depend only on n and the thread count, so per-chunk results combined in
/// chunk order are reproducible for a fixed thread count.
template <class Body>
void parallel_chunks(std::size_t n, Body&& body, unsigned threads = thread_count()) {
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
  if (threads == 1) {
    body(std::size_t{0}, n, 0u);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (unsigned t = 0; t < threads; ++t) {
    const std::size_t begin = n * t / threads, end = n * (t + 1) / threads;
    pool.emplace_back([&body, begin, end, t] { body(begin, end, t); });
  }
  for (auto& th : pool) th.join();
}

template <class Fn>
void parallel_for(std::size_t n, Fn&& fn, unsigned threads = thread_count()) {
  parallel_chunks(
      n, [&fn](std::size_t b, std::size_t e, unsigned) {
        for (std::size_t i = b; i < e; ++i) fn(i);
      },
      threads);
}

}  // namespace polyfm
