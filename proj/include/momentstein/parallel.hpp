#pragma once

#include <atomic>
#include <cstdlib>
#include <thread>
#include <vector>

namespace momentstein {

/// Worker-thread count used by batch loops. 0 means "decide from the
/// MOMENTSTEIN_THREADS environment variable, defaulting to 1".
inline int& thread_count() {
  static int n = 0;
  return n;
}

inline int resolved_thread_count() {
  int n = thread_count();
  if (n <= 0) {
    if (const char* env = std::getenv("MOMENTSTEIN_THREADS")) n = std::atoi(env);
    if (n <= 0) n = 1;
  }
  return n;
}

/// Runs fn(block_index, begin, end) over [0, total) split into fixed-size
/// blocks. The block layout is independent of the thread count and callers
/// combine per-block results in index order, so any reduction built on top
/// is bit-reproducible for any number of workers.
template <typename Fn>
void parallel_blocks(size_t total, size_t block_size, Fn&& fn) {
  if (total == 0) return;
  const size_t nblocks = (total + block_size - 1) / block_size;
  const int workers = std::min<int>(resolved_thread_count(), static_cast<int>(nblocks));
  if (workers <= 1) {
    for (size_t b = 0; b < nblocks; ++b)
      fn(b, b * block_size, std::min(total, (b + 1) * block_size));
    return;
  }
  std::atomic<size_t> next{0};
  auto work = [&] {
    for (;;) {
      const size_t b = next.fetch_add(1);
      if (b >= nblocks) return;
      fn(b, b * block_size, std::min(total, (b + 1) * block_size));
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int t = 0; t < workers; ++t) pool.emplace_back(work);
  for (auto& t : pool) t.join();
}

}  // namespace momentstein
