#pragma once

#include <atomic>
#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace smp {

// Runs fn(0..count-1) on up to `jobs` threads. Results must be written to
// pre-sized slots so the output order does not depend on scheduling. The
// first exception thrown by any worker is rethrown after all threads join.
inline void parallel_for_index(int count, int jobs, const std::function<void(int)>& fn) {
    if (count <= 0) return;
    jobs = std::max(1, std::min(jobs, count));
    if (jobs == 1) {
        for (int i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::exception_ptr first_error;
    std::mutex error_mutex;
    std::vector<std::thread> workers;
    workers.reserve(jobs);
    for (int w = 0; w < jobs; ++w)
        workers.emplace_back([&]() {
            for (int i = next.fetch_add(1); i < count; i = next.fetch_add(1)) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!first_error) first_error = std::current_exception();
                }
            }
        });
    for (std::thread& t : workers) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace smp
