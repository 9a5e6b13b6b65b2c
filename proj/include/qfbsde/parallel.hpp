#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <span>
#include <thread>
#include <vector>

namespace qfbsde {

/// Worker count from FBSDE_THREADS, defaulting to 1.
inline int threads_from_env() {
    if (const char* s = std::getenv("FBSDE_THREADS")) {
        const int v = std::atoi(s);
        if (v > 0) return v;
    }
    return 1;
}

/// Runs fn(begin, end) over contiguous chunks of [0, count). Chunks only
/// write their own indices, so results do not depend on `threads`.
/// The first exception thrown by any chunk is rethrown on the caller.
template <typename Fn>
void parallel_for(std::size_t count, int threads, Fn&& fn) {
    if (count == 0) return;
    const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), count);
    if (workers == 1) {
        fn(std::size_t{0}, count);
        return;
    }
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    const std::size_t chunk = (count + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t begin = w * chunk;
        const std::size_t end = std::min(count, begin + chunk);
        if (begin >= end) break;
        pool.emplace_back([&, begin, end] {
            try {
                fn(begin, end);
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
}

/// Pairwise summation in a fixed tree order.
inline double pairwise_sum(std::span<const double> v) {
    if (v.size() <= 8) {
        double s = 0.0;
        for (double x : v) s += x;
        return s;
    }
    const std::size_t half = v.size() / 2;
    return pairwise_sum(v.first(half)) + pairwise_sum(v.subspan(half));
}

struct SampleStats {
    std::size_t count = 0;
    double mean = 0.0;
    double variance = 0.0;  // unbiased
    double rms = 0.0;
    double se = 0.0;        // standard error of the mean
};

inline SampleStats sample_stats(std::span<const double> v) {
    SampleStats s;
    s.count = v.size();
    if (v.empty()) return s;
    s.mean = pairwise_sum(v) / static_cast<double>(v.size());
    std::vector<double> dev(v.size()), sq(v.size());
    for (std::size_t k = 0; k < v.size(); ++k) {
        dev[k] = (v[k] - s.mean) * (v[k] - s.mean);
        sq[k] = v[k] * v[k];
    }
    s.rms = std::sqrt(pairwise_sum(sq) / static_cast<double>(v.size()));
    if (v.size() > 1) {
        s.variance = pairwise_sum(dev) / static_cast<double>(v.size() - 1);
        s.se = std::sqrt(s.variance / static_cast<double>(v.size()));
    }
    return s;
}

}  // namespace qfbsde
