#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

#include "st3d/common.hpp"

namespace st3d {
namespace detail {

// Shared worker pool for the compute kernels. Every work item writes only its
// own output slice and performs its reductions in a fixed sequential order,
// so results are bit-identical for any worker count. Not reentrant: kernels
// must not call parallel_for from inside a work item.
class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool;
    return pool;
  }

  int size() const { return static_cast<int>(workers_.size()) + 1; }

  void run(i64 count, const std::function<void(i64)>& fn) {
    if (count <= 0) return;
    if (workers_.empty() || count == 1) {
      for (i64 i = 0; i < count; ++i) fn(i);
      return;
    }
    {
      std::lock_guard<std::mutex> lk(mu_);
      fn_ = &fn;
      end_ = count;
      next_.store(0, std::memory_order_relaxed);
      active_ = static_cast<int>(workers_.size());
      ++epoch_;
    }
    cv_.notify_all();
    drain(fn);
    std::unique_lock<std::mutex> lk(mu_);
    done_cv_.wait(lk, [&] { return active_ == 0; });
    fn_ = nullptr;
  }

  ThreadPool(const ThreadPool&) = delete;
  ThreadPool& operator=(const ThreadPool&) = delete;

 private:
  ThreadPool() {
    int n = default_threads();
    for (int i = 0; i + 1 < n; ++i) {
      workers_.emplace_back([this] { worker_loop(); });
    }
  }

  ~ThreadPool() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      stop_ = true;
      ++epoch_;
    }
    cv_.notify_all();
    for (auto& w : workers_) w.join();
  }

  static int default_threads() {
    if (const char* env = std::getenv("ST3D_THREADS")) {
      int v = std::atoi(env);
      if (v >= 1) return v;
    }
    unsigned hc = std::thread::hardware_concurrency();
    return hc ? static_cast<int>(hc) : 1;
  }

  void drain(const std::function<void(i64)>& fn) {
    i64 i;
    while ((i = next_.fetch_add(1, std::memory_order_relaxed)) < end_) fn(i);
  }

  void worker_loop() {
    std::uint64_t seen = 0;
    for (;;) {
      const std::function<void(i64)>* fn = nullptr;
      {
        std::unique_lock<std::mutex> lk(mu_);
        cv_.wait(lk, [&] { return stop_ || epoch_ != seen; });
        if (stop_) return;
        seen = epoch_;
        fn = fn_;
      }
      if (fn) drain(*fn);
      {
        std::lock_guard<std::mutex> lk(mu_);
        if (--active_ == 0) done_cv_.notify_all();
      }
    }
  }

  std::vector<std::thread> workers_;
  std::mutex mu_;
  std::condition_variable cv_, done_cv_;
  const std::function<void(i64)>* fn_ = nullptr;
  std::atomic<i64> next_{0};
  i64 end_ = 0;
  int active_ = 0;
  std::uint64_t epoch_ = 0;
  bool stop_ = false;
};

}  // namespace detail

// Runs fn(0..count-1); items may execute on any worker but must write
// disjoint outputs.
inline void parallel_for(i64 count, const std::function<void(i64)>& fn) {
  detail::ThreadPool::instance().run(count, fn);
}

}  // namespace st3d
