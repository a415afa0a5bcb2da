#pragma once

#include <condition_variable>
#include <functional>
#include <future>
#include <mutex>
#include <queue>
#include <thread>
#include <vector>

namespace fabric::gateway {

/// Fixed set of threads draining a FIFO of jobs.
class WorkerPool {
public:
    /// 0 picks the hardware concurrency.
    explicit WorkerPool(int workers = 0);
    ~WorkerPool();
    WorkerPool(const WorkerPool&) = delete;
    WorkerPool& operator=(const WorkerPool&) = delete;

    std::future<void> submit(std::function<void()> job);
    int size() const noexcept { return static_cast<int>(threads_.size()); }

private:
    std::vector<std::thread> threads_;
    std::queue<std::packaged_task<void()>> jobs_;
    std::mutex mutex_;
    std::condition_variable cv_;
    bool stopping_ = false;
};

}  // namespace fabric::gateway
