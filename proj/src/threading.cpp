#include "spectr/threading.hpp"

#include <atomic>
#include <cstdlib>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace spectr {

namespace {

std::atomic<int> g_thread_override{-1};
std::atomic<bool> g_deterministic{true};

int env_threads() {
  if (const char* env = std::getenv("SPECTR_THREADS")) {
    int v = std::atoi(env);
    return v <= 0 ? 1 : v;
  }
  return -1;
}

}  // namespace

int max_threads() {
  int o = g_thread_override.load(std::memory_order_relaxed);
  if (o > 0) return o;
  static int env = env_threads();
  if (env > 0) return env;
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_max_threads(int n) {
  g_thread_override.store(n <= 0 ? 1 : n, std::memory_order_relaxed);
}

bool deterministic() { return g_deterministic.load(std::memory_order_relaxed); }

void set_deterministic(bool on) {
  g_deterministic.store(on, std::memory_order_relaxed);
}

}  // namespace spectr
