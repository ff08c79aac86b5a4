#pragma once

// Minimal persistent worker pool. Work is always split into fixed,
// index-ordered ranges, so results do not depend on the number of threads.
// ITARFLOW_THREADS caps the pool size (0 or unset = hardware concurrency).

#include <algorithm>
#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace itarflow {

inline int configured_thread_count() {
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    if (hw <= 0) hw = 1;
    if (const char* env = std::getenv("ITARFLOW_THREADS")) {
        int n = std::atoi(env);
        if (n > 0 && n < hw) return n;
    }
    return hw;
}

class ThreadPool {
public:
    static ThreadPool& instance() {
        static ThreadPool pool(configured_thread_count());
        return pool;
    }

    int size() const { return static_cast<int>(workers_.size()) + 1; }

    // Runs fn(lo, hi) over [begin, end) split into contiguous chunks, one per
    // thread. Blocks until every chunk completes. fn must not touch shared
    // mutable state across chunks.
    void parallel_for(int64_t begin, int64_t end,
                      const std::function<void(int64_t, int64_t)>& fn) {
        int64_t total = end - begin;
        if (total <= 0) return;
        if (size() == 1 || total == 1) {
            fn(begin, end);
            return;
        }
        int64_t chunk_size = (total + size() - 1) / size();
        int nchunks = static_cast<int>((total + chunk_size - 1) / chunk_size);
        uint64_t gen;
        {
            std::unique_lock<std::mutex> lock(mu_);
            task_ = &fn;
            task_begin_ = begin;
            task_end_ = end;
            task_chunk_ = chunk_size;
            next_chunk_ = 0;
            pending_ = nchunks;
            gen = ++generation_;
        }
        cv_.notify_all();
        run_chunks(fn, gen);
        std::unique_lock<std::mutex> lock(mu_);
        done_cv_.wait(lock, [&] { return pending_ == 0; });
        task_ = nullptr;
    }

    ~ThreadPool() {
        {
            std::unique_lock<std::mutex> lock(mu_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& t : workers_) t.join();
    }

private:
    explicit ThreadPool(int nthreads) {
        for (int i = 0; i < nthreads - 1; ++i) {
            workers_.emplace_back([this] { worker_loop(); });
        }
    }

    void run_chunks(const std::function<void(int64_t, int64_t)>& fn, uint64_t gen) {
        for (;;) {
            int64_t lo, hi;
            {
                std::unique_lock<std::mutex> lock(mu_);
                if (generation_ != gen) return;
                lo = task_begin_ + next_chunk_ * task_chunk_;
                if (lo >= task_end_) return;
                ++next_chunk_;
                hi = std::min(task_end_, lo + task_chunk_);
            }
            fn(lo, hi);
            {
                std::unique_lock<std::mutex> lock(mu_);
                if (generation_ == gen && --pending_ == 0) done_cv_.notify_all();
            }
        }
    }

    void worker_loop() {
        uint64_t seen = 0;
        for (;;) {
            const std::function<void(int64_t, int64_t)>* fn = nullptr;
            uint64_t gen;
            {
                std::unique_lock<std::mutex> lock(mu_);
                cv_.wait(lock, [&] { return stop_ || (task_ && generation_ != seen); });
                if (stop_) return;
                seen = gen = generation_;
                fn = task_;
            }
            run_chunks(*fn, gen);
        }
    }

    std::vector<std::thread> workers_;
    std::mutex mu_;
    std::condition_variable cv_, done_cv_;
    const std::function<void(int64_t, int64_t)>* task_ = nullptr;
    int64_t task_begin_ = 0, task_end_ = 0, task_chunk_ = 0, next_chunk_ = 0;
    int pending_ = 0;
    uint64_t generation_ = 0;
    bool stop_ = false;
};

}  // namespace itarflow
