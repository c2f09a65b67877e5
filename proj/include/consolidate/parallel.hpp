#pragma once

#include <atomic>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

#include "consolidate/error.hpp"

namespace consolidate {

/// Worker count from CONSOLIDATE_THREADS (positive integer), default 1.
inline unsigned threads_from_env() {
    const char* raw = std::getenv("CONSOLIDATE_THREADS");
    if (!raw || !*raw) return 1;
    char* end = nullptr;
    const long v = std::strtol(raw, &end, 10);
    if (*end != '\0' || v < 1) fail(ErrorCode::usage, std::string("CONSOLIDATE_THREADS must be a positive integer, got '") + raw + "'");
    return static_cast<unsigned>(v);
}

/// Calls fn(i) for i in [0, n) on up to `threads` workers. Each index must
/// write only its own output slot. If any call throws, the exception of the
/// lowest failing index is rethrown, matching a sequential run.
template <typename Fn>
void parallel_for(std::size_t n, unsigned threads, Fn&& fn) {
    if (threads <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(n);
    {
        std::vector<std::jthread> pool;
        const unsigned workers = static_cast<unsigned>(std::min<std::size_t>(threads, n));
        for (unsigned w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < n; i = next++) {
                    try {
                        fn(i);
                    } catch (...) {
                        errors[i] = std::current_exception();
                    }
                }
            });
        }
    }
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace consolidate
