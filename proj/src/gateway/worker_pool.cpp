#include "fabric/gateway/worker_pool.hpp"

#include <algorithm>

namespace fabric::gateway {

WorkerPool::WorkerPool(int workers) {
    if (workers <= 0) workers = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    for (int i = 0; i < workers; ++i) {
        threads_.emplace_back([this] {
            for (;;) {
                std::packaged_task<void()> job;
                {
                    std::unique_lock lock(mutex_);
                    cv_.wait(lock, [this] { return stopping_ || !jobs_.empty(); });
                    if (jobs_.empty()) return;
                    job = std::move(jobs_.front());
                    jobs_.pop();
                }
                job();
            }
        });
    }
}

WorkerPool::~WorkerPool() {
    {
        std::lock_guard lock(mutex_);
        stopping_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
}

std::future<void> WorkerPool::submit(std::function<void()> job) {
    std::packaged_task<void()> task(std::move(job));
    auto future = task.get_future();
    {
        std::lock_guard lock(mutex_);
        jobs_.push(std::move(task));
    }
    cv_.notify_one();
    return future;
}

}  // namespace fabric::gateway
