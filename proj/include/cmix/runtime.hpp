#pragma once

#include <cstdint>
#include <cstdlib>
#include <string>
#include <thread>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace cmix::runtime {

// Number of threads kernels may use. Capped by the CMIX_THREADS environment
// variable; defaults to the hardware concurrency. Read once per process.
inline int max_threads() {
    static const int cached = [] {
        int n = static_cast<int>(std::thread::hardware_concurrency());
        if (n < 1) n = 1;
        if (const char* env = std::getenv("CMIX_THREADS")) {
            int cap = std::atoi(env);
            if (cap >= 1 && cap < n) n = cap;
        }
        return n;
    }();
    return cached;
}

// Static-schedule parallel loop over [0, n). Work items must write disjoint
// outputs; results are independent of the thread count.
template <typename F>
void parallel_for(std::int64_t n, F&& body) {
    if (n <= 0) return;
#ifdef _OPENMP
    const int threads = max_threads();
    if (threads > 1 && n > 1) {
#pragma omp parallel for num_threads(threads) schedule(static)
        for (std::int64_t i = 0; i < n; ++i) body(i);
        return;
    }
#endif
    for (std::int64_t i = 0; i < n; ++i) body(i);
}

}  // namespace cmix::runtime
