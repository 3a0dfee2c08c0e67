#pragma once

#include <functional>
#include <thread>
#include <vector>

namespace ragdiff {

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Work is split by
/// index stripes; callers that need determinism must keep per-index outputs
/// separate and reduce them in index order afterwards.
inline void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
    if (threads <= 1 || n <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    int workers = std::min(threads, n);
    std::vector<std::thread> pool;
    pool.reserve((size_t)workers);
    for (int w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
            for (int i = w; i < n; i += workers) fn(i);
        });
    for (auto& t : pool) t.join();
}

inline int default_threads() {
    unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : (int)hc;
}

}  // namespace ragdiff
