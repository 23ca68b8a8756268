#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace ditctrl {

namespace detail {
inline std::atomic<std::size_t>& thread_count_slot() {
    static std::atomic<std::size_t> n{1};
    return n;
}
} // namespace detail

// Number of worker threads used by row-parallel kernels. Results do not depend on it.
inline std::size_t thread_count() { return detail::thread_count_slot().load(); }
inline void set_thread_count(std::size_t n) { detail::thread_count_slot().store(std::max<std::size_t>(1, n)); }

// Runs fn(begin, end) over contiguous row blocks of [0, rows). Each output row is owned by
// exactly one call, so any per-row reduction order is unchanged by the partition.
template <typename Fn>
void parallel_rows(std::size_t rows, Fn&& fn) {
    const std::size_t workers = std::min(thread_count(), rows);
    if (workers <= 1) {
        fn(std::size_t{0}, rows);
        return;
    }
    const std::size_t chunk = (rows + workers - 1) / workers;
    std::exception_ptr err;
    std::mutex err_mu;
    {
        std::vector<std::jthread> pool;
        pool.reserve(workers);
        for (std::size_t w = 0; w < workers; ++w) {
            const std::size_t begin = w * chunk;
            const std::size_t end = std::min(rows, begin + chunk);
            if (begin >= end) break;
            pool.emplace_back([&, begin, end] {
                try {
                    fn(begin, end);
                } catch (...) {
                    std::lock_guard lock(err_mu);
                    if (!err) err = std::current_exception();
                }
            });
        }
    }
    if (err) std::rethrow_exception(err);
}

} // namespace ditctrl
