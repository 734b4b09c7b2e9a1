#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

#include "snapcache/error.hpp"

namespace snapcache {

// Thread cap from SNAPCACHE_THREADS; unset means 1.
inline std::size_t threads_from_env() {
    const char* raw = std::getenv("SNAPCACHE_THREADS");
    if (raw == nullptr || *raw == '\0') return 1;
    char* end = nullptr;
    const long n = std::strtol(raw, &end, 10);
    if (end == raw || *end != '\0' || n < 1) {
        throw ConfigError(std::string("SNAPCACHE_THREADS: expected a positive integer, got '") + raw + "'");
    }
    return static_cast<std::size_t>(n);
}

// Runs fn(i) for i in [0, n) on at most `threads` threads. Each index is
// handled by exactly one thread, so results do not depend on scheduling as
// long as fn(i) only writes state owned by i.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
    threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(n, 1));
    if (threads == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::exception_ptr> errors(threads);
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (std::size_t w = 0; w < threads; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < n; i += threads) fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

} // namespace snapcache
