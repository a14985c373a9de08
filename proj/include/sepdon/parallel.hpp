#pragma once

#include <cstddef>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace sepdon {

// Thread control for the compute kernels. All parallel loops partition work so
// that each output element has exactly one writer and per-element summation
// order is fixed; results are therefore identical for any thread count.
// Reductions to scalars are always serial.

inline int& max_threads_ref() {
    static int n = 0; // 0 = library default (hardware)
    return n;
}

inline void set_max_threads(int n) { max_threads_ref() = n; }

inline int effective_threads() {
#ifdef _OPENMP
    int n = max_threads_ref();
    return n > 0 ? n : omp_get_max_threads();
#else
    return 1;
#endif
}

// `work` estimates the total scalar operations across all iterations; small
// loops run serially, where fork/join overhead would dominate.
template <typename F>
void parallel_for(std::size_t n, std::size_t work, F&& body) {
#ifdef _OPENMP
    const int nt = effective_threads();
    if (nt > 1 && n > 1 && work >= (std::size_t(1) << 22)) {
#pragma omp parallel for schedule(static) num_threads(nt)
        for (long long i = 0; i < static_cast<long long>(n); ++i)
            body(static_cast<std::size_t>(i));
        return;
    }
#endif
    for (std::size_t i = 0; i < n; ++i) body(i);
}

template <typename F>
void parallel_for(std::size_t n, F&& body) {
    parallel_for(n, n, std::forward<F>(body));
}

} // namespace sepdon
