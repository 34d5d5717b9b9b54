#include "prcnn/parallel.h"

#include <algorithm>
#include <atomic>
#include <exception>
#include <stdexcept>
#include <thread>
#include <vector>

namespace prcnn {

namespace {
std::atomic<int> g_threads{1};
}  // namespace

void set_num_threads(int n) {
  if (n < 1) throw std::invalid_argument("thread count must be >= 1");
  g_threads.store(n);
}

int num_threads() { return g_threads.load(); }

int hardware_threads() {
  return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(int count, const std::function<void(int)>& fn) {
  const int workers = std::min(num_threads(), count);
  if (workers <= 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  pool.reserve(workers);
  for (int t = 0; t < workers; ++t) {
    const int begin = static_cast<int>(static_cast<long long>(count) * t / workers);
    const int end = static_cast<int>(static_cast<long long>(count) * (t + 1) / workers);
    pool.emplace_back([&, t, begin, end] {
      try {
        for (int i = begin; i < end; ++i) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace prcnn
