#pragma once

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace robustdistill {

// Shared worker pool. Work is split into index ranges whose boundaries never
// depend on the worker count, and each output element is produced by exactly
// one task, so results are bit-identical for any ROBUSTDISTILL_THREADS value.
class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool;
    return pool;
  }

  int workers() const { return static_cast<int>(threads_.size()) + 1; }

  // Runs fn(begin,end) over [0,n) in blocks of `grain`. Serial when the pool
  // is unavailable, the job is small, or we are already inside a worker
  // (no nested parallelism).
  void parallel_ranges(size_t n, size_t grain, const std::function<void(size_t, size_t)>& fn) {
    if (n == 0) return;
    if (grain == 0) grain = 1;
    size_t blocks = (n + grain - 1) / grain;
    if (blocks <= 1 || threads_.empty() || in_worker()) {
      fn(0, n);
      return;
    }
    std::atomic<size_t> next{0};
    auto run = [&]() {
      for (;;) {
        size_t b = next.fetch_add(1);
        if (b >= blocks) break;
        size_t lo = b * grain;
        size_t hi = std::min(n, lo + grain);
        fn(lo, hi);
      }
    };
    std::atomic<int> pending{0};
    {
      std::lock_guard<std::mutex> lk(mu_);
      for (size_t t = 0; t < threads_.size() && t + 1 < blocks; ++t) {
        pending.fetch_add(1);
        queue_.push_back([&run, &pending, this] {
          in_worker_flag() = true;
          run();
          in_worker_flag() = false;
          {
            std::lock_guard<std::mutex> dlk(done_mu_);
            pending.fetch_sub(1);
          }
          done_cv_.notify_all();
        });
      }
    }
    cv_.notify_all();
    run();
    std::unique_lock<std::mutex> lk(done_mu_);
    done_cv_.wait(lk, [&] { return pending.load() == 0; });
  }

  static bool in_worker() { return in_worker_flag(); }

 private:
  ThreadPool() {
    int n = 0;
    if (const char* env = std::getenv("ROBUSTDISTILL_THREADS")) {
      n = std::atoi(env);
    }
    if (n <= 0) n = static_cast<int>(std::thread::hardware_concurrency());
    if (n < 1) n = 1;
    for (int i = 0; i < n - 1; ++i) {
      threads_.emplace_back([this] { worker_loop(); });
    }
  }

  ~ThreadPool() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  void worker_loop() {
    for (;;) {
      std::function<void()> job;
      {
        std::unique_lock<std::mutex> lk(mu_);
        cv_.wait(lk, [&] { return stop_ || !queue_.empty(); });
        if (stop_ && queue_.empty()) return;
        job = std::move(queue_.back());
        queue_.pop_back();
      }
      job();
    }
  }

  static bool& in_worker_flag() {
    thread_local bool flag = false;
    return flag;
  }

  std::vector<std::thread> threads_;
  std::vector<std::function<void()>> queue_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::mutex done_mu_;
  std::condition_variable done_cv_;
  bool stop_ = false;
};

}  // namespace robustdistill
