#include "gad/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <thread>
#include <vector>

namespace gad::par {

namespace {
int g_threads = 0;  // 0 = uninitialized

int detect_threads() {
  if (const char* env = std::getenv("GAD_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw ? static_cast<int>(hw) : 1;
}
}  // namespace

int thread_count() {
  if (g_threads == 0) g_threads = detect_threads();
  return g_threads;
}

void set_thread_count(int n) { g_threads = std::max(1, n); }

void for_range(Index n, Index grain, const std::function<void(Index, Index)>& fn) {
  if (n <= 0) return;
  const int workers = thread_count();
  const Index max_chunks = std::max<Index>(1, (n + grain - 1) / grain);
  const Index chunks = std::min<Index>(workers, max_chunks);
  if (chunks <= 1) {
    fn(0, n);
    return;
  }
  const Index per = (n + chunks - 1) / chunks;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(chunks) - 1);
  std::exception_ptr err;
  std::atomic<bool> failed{false};
  auto run = [&](Index b, Index e) {
    try {
      fn(b, e);
    } catch (...) {
      if (!failed.exchange(true)) err = std::current_exception();
    }
  };
  for (Index c = 1; c < chunks; ++c) {
    const Index b = c * per;
    const Index e = std::min(n, b + per);
    if (b >= e) break;
    pool.emplace_back(run, b, e);
  }
  run(0, std::min(per, n));
  for (auto& t : pool) t.join();
  if (failed.load()) std::rethrow_exception(err);
}

}  // namespace gad::par
