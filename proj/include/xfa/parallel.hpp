#pragma once

#include "xfa/types.hpp"

#include <algorithm>
#include <exception>
#include <thread>
#include <vector>

namespace xfa {

/// Runs fn(begin, end) over contiguous chunks of [0, n) on up to `threads`
/// workers. Chunks are disjoint, so callers that write only inside their chunk
/// get results independent of the thread count. The first exception thrown by
/// any chunk (lowest chunk index) is rethrown.
template <class Fn>
void parallel_for(Index n, int threads, Fn&& fn)
{
    if (n <= 0) return;
    const Index workers = std::clamp<Index>(threads, 1, n);
    if (workers == 1) {
        fn(Index{0}, n);
        return;
    }
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (Index w = 0; w < workers; ++w) {
        const Index begin = n * w / workers;
        const Index end = n * (w + 1) / workers;
        pool.emplace_back([&, w, begin, end] {
            try {
                fn(begin, end);
            } catch (...) {
                errors[static_cast<std::size_t>(w)] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

} // namespace xfa
