#pragma once

// Deterministic fan-out: work is cut into fixed chunks whose boundaries depend
// only on the item count, each chunk writes its own accumulator, and callers
// merge accumulators in chunk order. Results are therefore identical for any
// worker count.

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace rsvio {

/// Worker count from RSVIO_WORKERS, else 1.
inline int default_workers() {
  if (const char* env = std::getenv("RSVIO_WORKERS")) {
    try {
      const int n = std::stoi(env);
      if (n >= 1) return n;
    } catch (const std::exception&) {
    }
  }
  return 1;
}

/// Calls fn(begin, end, acc) for consecutive chunks of [0, n) and returns the
/// per-chunk accumulators in chunk order.
template <class Acc, class Fn>
std::vector<Acc> parallel_chunks(size_t n, size_t chunk_size, int workers, const Acc& init, Fn&& fn) {
  chunk_size = std::max<size_t>(1, chunk_size);
  const size_t num_chunks = (n + chunk_size - 1) / chunk_size;
  std::vector<Acc> acc(num_chunks, init);
  auto run = [&](size_t c) { fn(c * chunk_size, std::min(n, (c + 1) * chunk_size), acc[c]); };
  const size_t threads = std::min<size_t>(std::max(1, workers), num_chunks);
  if (threads <= 1) {
    for (size_t c = 0; c < num_chunks; ++c) run(c);
    return acc;
  }
  std::atomic<size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (size_t c = next++; c < num_chunks; c = next++) {
        try {
          run(c);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
  return acc;
}

}  // namespace rsvio
