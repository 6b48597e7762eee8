#ifndef CVFLOW_PARALLEL_HPP_
#define CVFLOW_PARALLEL_HPP_

#include <condition_variable>
#include <deque>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace cvflow {

// Splits [0, n) into at most `threads` contiguous chunks and runs
// fn(begin, end) on each. Chunks are disjoint, so work that writes only
// inside its own range is deterministic for any thread count.
inline void parallel_for(size_t n, int threads,
                         const std::function<void(size_t, size_t)>& fn) {
    if (n == 0) return;
    size_t nthreads = threads < 1 ? 1 : static_cast<size_t>(threads);
    if (nthreads > n) nthreads = n;
    if (nthreads == 1) {
        fn(0, n);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(nthreads);
    size_t chunk = (n + nthreads - 1) / nthreads;
    for (size_t t = 0; t < nthreads; ++t) {
        size_t begin = t * chunk;
        size_t end = begin + chunk < n ? begin + chunk : n;
        if (begin >= end) break;
        pool.emplace_back(fn, begin, end);
    }
    for (auto& th : pool) th.join();
}

// Single-producer single-consumer bounded queue; used to hand complete
// training batches from the sampling thread to the optimizer.
template <typename T>
class BoundedQueue {
  public:
    explicit BoundedQueue(size_t capacity) : capacity_(capacity) {}

    // Returns false if the queue was closed before the item could be pushed.
    bool push(T item) {
        std::unique_lock<std::mutex> lock(mutex_);
        not_full_.wait(lock, [&] { return items_.size() < capacity_ || closed_; });
        if (closed_) return false;
        items_.push_back(std::move(item));
        not_empty_.notify_one();
        return true;
    }

    // Returns false once the queue is closed and drained.
    bool pop(T& out) {
        std::unique_lock<std::mutex> lock(mutex_);
        not_empty_.wait(lock, [&] { return !items_.empty() || closed_; });
        if (items_.empty()) return false;
        out = std::move(items_.front());
        items_.pop_front();
        not_full_.notify_one();
        return true;
    }

    void close() {
        std::lock_guard<std::mutex> lock(mutex_);
        closed_ = true;
        not_empty_.notify_all();
        not_full_.notify_all();
    }

  private:
    size_t capacity_;
    std::deque<T> items_;
    bool closed_ = false;
    std::mutex mutex_;
    std::condition_variable not_empty_;
    std::condition_variable not_full_;
};

}  // namespace cvflow

#endif
