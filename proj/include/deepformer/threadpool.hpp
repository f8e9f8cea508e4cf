#pragma once

#include <condition_variable>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace deepformer {

// Fixed-size pool used only to split independent row ranges of matmuls.
// Every output element is produced by the same sequential inner loop no
// matter how the rows are partitioned, so results are bit-identical for any
// worker count. DEEPFORMER_DETERMINISTIC=1 forces the single-thread path.
class ThreadPool {
 public:
  explicit ThreadPool(unsigned workers) {
    if (std::getenv("DEEPFORMER_DETERMINISTIC") != nullptr) workers = 1;
    if (workers < 1) workers = 1;
    for (unsigned i = 1; i < workers; ++i) {
      threads_.emplace_back([this] { worker_loop(); });
    }
  }

  ~ThreadPool() {
    {
      std::unique_lock<std::mutex> lk(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  ThreadPool(const ThreadPool&) = delete;
  ThreadPool& operator=(const ThreadPool&) = delete;

  unsigned size() const { return static_cast<unsigned>(threads_.size()) + 1; }

  // Runs fn(begin, end) over a partition of [0, n). Blocks until done.
  void parallel_for(size_t n, const std::function<void(size_t, size_t)>& fn) {
    unsigned w = size();
    if (w == 1 || n < 2) {
      fn(0, n);
      return;
    }
    size_t chunk = (n + w - 1) / w;
    unsigned launched = 0;
    {
      std::unique_lock<std::mutex> lk(mu_);
      pending_ = 0;
      for (unsigned i = 1; i < w; ++i) {
        size_t b = i * chunk;
        size_t e = std::min(n, b + chunk);
        if (b >= e) continue;
        tasks_.emplace_back([=, &fn] { fn(b, e); });
        ++launched;
      }
      pending_ = launched;
    }
    cv_.notify_all();
    fn(0, std::min(n, chunk));
    std::unique_lock<std::mutex> lk(mu_);
    done_cv_.wait(lk, [this] { return pending_ == 0 && tasks_.empty(); });
  }

 private:
  void worker_loop() {
    for (;;) {
      std::function<void()> task;
      {
        std::unique_lock<std::mutex> lk(mu_);
        cv_.wait(lk, [this] { return stop_ || !tasks_.empty(); });
        if (stop_ && tasks_.empty()) return;
        task = std::move(tasks_.back());
        tasks_.pop_back();
      }
      task();
      {
        std::unique_lock<std::mutex> lk(mu_);
        --pending_;
      }
      done_cv_.notify_all();
    }
  }

  std::vector<std::thread> threads_;
  std::vector<std::function<void()>> tasks_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::condition_variable done_cv_;
  unsigned pending_ = 0;
  bool stop_ = false;
};

// Process-wide pool; size settable once before first use (CLI --threads).
inline ThreadPool& global_pool(unsigned workers_on_first_use = 1) {
  static ThreadPool pool(workers_on_first_use);
  return pool;
}

}  // namespace deepformer
