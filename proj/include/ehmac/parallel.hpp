#pragma once

#include <atomic>
#include <exception>
#include <stdexcept>
#include <thread>
#include <vector>

namespace ehmac {

/// Runs fn(i) for i in [0, count) on up to `jobs` threads. Work items must be
/// independent; any cross-item state (RNG, accumulators) has to be derived
/// from the index so results match the serial order bit for bit.
template <typename Fn>
void parallel_for(int jobs, int count, Fn&& fn) {
  if (jobs < 1) throw std::invalid_argument("parallel_for: jobs must be >= 1");
  if (count <= 0) return;
  if (jobs == 1 || count == 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::atomic<bool> failed{false};
  auto worker = [&] {
    for (;;) {
      const int i = next.fetch_add(1);
      if (i >= count || failed.load()) return;
      try {
        fn(i);
      } catch (...) {
        if (!failed.exchange(true)) error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  const int n_threads = std::min(jobs, count);
  pool.reserve(n_threads);
  for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (failed.load() && error) std::rethrow_exception(error);
}

}  // namespace ehmac
