#include "voxreg/common.hpp"

#include <cstdio>
#include <cstdlib>

namespace voxreg {

namespace {
std::atomic<int> g_max_threads{1};
}

int max_threads() { return g_max_threads.load(std::memory_order_relaxed); }

void set_max_threads(int n) {
  if (n < 1) n = 1;
  g_max_threads.store(n, std::memory_order_relaxed);
}

int threads_from_env() {
  const char* v = std::getenv("VOXREG_THREADS");
  if (!v) return 1;
  char* end = nullptr;
  long n = std::strtol(v, &end, 10);
  if (end == v || n < 1) return 1;
  return static_cast<int>(n);
}

void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body) {
  if (n == 0) return;
  const std::size_t k = static_cast<std::size_t>(max_threads());
  if (k <= 1 || n < 2 * k) {
    body(0, n);
    return;
  }
  const std::size_t chunk = (n + k - 1) / k;
  std::vector<std::thread> workers;
  workers.reserve(k);
  for (std::size_t t = 0; t < k; ++t) {
    const std::size_t begin = t * chunk;
    if (begin >= n) break;
    const std::size_t end = std::min(n, begin + chunk);
    workers.emplace_back([&body, begin, end] { body(begin, end); });
  }
  for (auto& w : workers) w.join();
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string format_float(float v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
  return buf;
}

}  // namespace voxreg
