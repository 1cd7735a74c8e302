#pragma once

#include <cstddef>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace ehrw {

// Global cap on worker threads for the OpenMP kernels. 0 means "use the
// OpenMP default". Kernels derive per-item seeds and write to disjoint
// slots, so results are identical for any thread count.
inline int& thread_cap() {
  static int cap = 0;
  return cap;
}

inline void set_max_threads(int n) { thread_cap() = n; }

inline int effective_threads() {
#ifdef _OPENMP
  int n = thread_cap() > 0 ? thread_cap() : omp_get_max_threads();
  return n < 1 ? 1 : n;
#else
  return 1;
#endif
}

// Parallel loop over [0, n). fn(i) must only touch state owned by item i.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
#ifdef _OPENMP
  const int threads = effective_threads();
  if (threads > 1 && n > 1) {
#pragma omp parallel for schedule(static) num_threads(threads)
    for (long long i = 0; i < static_cast<long long>(n); ++i) {
      fn(static_cast<std::size_t>(i));
    }
    return;
  }
#endif
  for (std::size_t i = 0; i < n; ++i) fn(i);
}

// Serial reference loop. Kept distinct so tests can compare kernel
// outputs against the OpenMP path and the bench tool can time both.
template <typename Fn>
void serial_for(std::size_t n, Fn&& fn) {
  for (std::size_t i = 0; i < n; ++i) fn(i);
}

}  // namespace ehrw
