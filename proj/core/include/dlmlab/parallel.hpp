#pragma once

#include <algorithm>
#include <cstdint>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace dlmlab {

inline int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

// Splits [0, n) into contiguous chunks and runs fn(begin, end) on each.
// Each index must write only its own outputs; under that contract the result
// is bit-identical for every thread count, including 1.
template <typename F>
void parallel_chunks(std::int64_t n, F&& fn) {
  if (n <= 0) return;
#ifdef _OPENMP
  const int threads = omp_get_max_threads();
  if (threads > 1 && n > 1) {
    const std::int64_t chunks = std::min<std::int64_t>(threads, n);
    const std::int64_t per = (n + chunks - 1) / chunks;
#pragma omp parallel for schedule(static)
    for (std::int64_t c = 0; c < chunks; ++c) {
      const std::int64_t begin = c * per;
      const std::int64_t end = std::min(n, begin + per);
      if (begin < end) fn(begin, end);
    }
    return;
  }
#endif
  fn(std::int64_t{0}, n);
}

}  // namespace dlmlab
