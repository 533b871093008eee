#include "gmfc/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <thread>
#include <vector>

namespace gmfc::parallel {

namespace {
std::atomic<int> g_workers{1};
}

void set_workers(int n) { g_workers.store(std::max(1, n)); }

int workers() { return g_workers.load(); }

void for_each_index(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const int k = std::min<std::size_t>(g_workers.load(), n == 0 ? 1 : n);
  if (k <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(k));
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(k));
  for (int w = 0; w < k; ++w) {
    const std::size_t lo = n * static_cast<std::size_t>(w) / static_cast<std::size_t>(k);
    const std::size_t hi =
        n * static_cast<std::size_t>(w + 1) / static_cast<std::size_t>(k);
    pool.emplace_back([&, lo, hi, w] {
      try {
        for (std::size_t i = lo; i < hi; ++i) fn(i);
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace gmfc::parallel
