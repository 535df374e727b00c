#pragma once

#include <condition_variable>
#include <cstddef>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace voxloc {

// Fixed-partition fork/join pool. parallel_for splits [0, n) into one
// contiguous chunk per worker, so the work done for a given index never
// depends on the thread count; callers keep determinism by writing to
// disjoint ranges and reducing in index order.
class ThreadPool {
 public:
  explicit ThreadPool(std::size_t threads) {
    if (threads < 1) threads = 1;
    for (std::size_t i = 0; i + 1 < threads; ++i) {
      workers_.emplace_back([this] { worker_loop(); });
    }
  }

  ~ThreadPool() {
    {
      std::unique_lock lk(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& w : workers_) w.join();
  }

  std::size_t size() const { return workers_.size() + 1; }

  // f(begin, end) over disjoint ranges covering [0, n)
  void parallel_ranges(std::size_t n, const std::function<void(std::size_t, std::size_t)>& f) {
    if (n == 0) return;
    std::size_t parts = std::min(size(), n);
    if (parts == 1) {
      f(0, n);
      return;
    }
    std::size_t chunk = (n + parts - 1) / parts;
    std::vector<std::function<void()>> tasks;
    for (std::size_t p = 1; p < parts; ++p) {
      std::size_t b = p * chunk, e = std::min(n, (p + 1) * chunk);
      if (b >= e) continue;
      tasks.emplace_back([&f, b, e] { f(b, e); });
    }
    run_and_wait(tasks, [&f, chunk, n] { f(0, std::min(chunk, n)); });
  }

  static ThreadPool& global();
  static void set_global_threads(std::size_t threads);

 private:
  void worker_loop() {
    for (;;) {
      std::function<void()> task;
      {
        std::unique_lock lk(mu_);
        cv_.wait(lk, [this] { return stop_ || !queue_.empty(); });
        if (stop_ && queue_.empty()) return;
        task = std::move(queue_.back());
        queue_.pop_back();
      }
      task();
      {
        std::unique_lock lk(mu_);
        if (--pending_ == 0) done_cv_.notify_all();
      }
    }
  }

  void run_and_wait(std::vector<std::function<void()>>& tasks, const std::function<void()>& own) {
    {
      std::unique_lock lk(mu_);
      pending_ += tasks.size();
      for (auto& t : tasks) queue_.emplace_back(std::move(t));
    }
    cv_.notify_all();
    own();
    std::unique_lock lk(mu_);
    done_cv_.wait(lk, [this] { return pending_ == 0; });
  }

  std::vector<std::thread> workers_;
  std::vector<std::function<void()>> queue_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::condition_variable done_cv_;
  std::size_t pending_ = 0;
  bool stop_ = false;
};

}  // namespace voxloc
