#pragma once

// Deterministic work sharing. Ranges are cut into fixed-size chunks whose
// boundaries depend only on the range and grain, never on the thread count;
// workers race for whole chunks, and any reduction happens serially in chunk
// order afterwards. Outputs are therefore identical at any thread count as
// long as chunk bodies write to disjoint slots.

#include <condition_variable>
#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace mvmnp {

class WorkerPool {
 public:
  explicit WorkerPool(int threads) : threads_(threads < 1 ? 1 : threads) {
    for (int t = 0; t < threads_ - 1; ++t) {
      workers_.emplace_back([this] { worker_loop(); });
    }
  }

  WorkerPool(const WorkerPool&) = delete;
  WorkerPool& operator=(const WorkerPool&) = delete;

  ~WorkerPool() {
    {
      std::unique_lock<std::mutex> lock(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& w : workers_) w.join();
  }

  int threads() const { return threads_; }

  // f(chunk_index, begin, end) over [begin, end) cut into chunks of `grain`.
  void for_chunks(std::int64_t begin, std::int64_t end, std::int64_t grain,
                  const std::function<void(std::int64_t, std::int64_t, std::int64_t)>& f) {
    if (end <= begin) return;
    if (grain < 1) grain = 1;
    const std::int64_t count = (end - begin + grain - 1) / grain;
    if (threads_ == 1 || count == 1) {
      for (std::int64_t c = 0; c < count; ++c) {
        const std::int64_t lo = begin + c * grain;
        const std::int64_t hi = std::min(end, lo + grain);
        f(c, lo, hi);
      }
      return;
    }
    {
      std::unique_lock<std::mutex> lock(mu_);
      job_ = &f;
      job_begin_ = begin;
      job_end_ = end;
      job_grain_ = grain;
      job_chunks_ = count;
      next_chunk_ = 0;
      pending_ = count;
      error_ = nullptr;
      ++generation_;
    }
    cv_.notify_all();
    run_chunks();
    std::unique_lock<std::mutex> lock(mu_);
    done_cv_.wait(lock, [this] { return pending_ == 0; });
    job_ = nullptr;
    if (error_) std::rethrow_exception(error_);
  }

  // f(i) for each i; grain chosen so chunk bodies stay coarse.
  void for_each(std::int64_t begin, std::int64_t end, std::int64_t grain,
                const std::function<void(std::int64_t)>& f) {
    for_chunks(begin, end, grain, [&f](std::int64_t, std::int64_t lo, std::int64_t hi) {
      for (std::int64_t i = lo; i < hi; ++i) f(i);
    });
  }

 private:
  void run_chunks() {
    for (;;) {
      std::int64_t c;
      {
        std::unique_lock<std::mutex> lock(mu_);
        if (next_chunk_ >= job_chunks_) return;
        c = next_chunk_++;
      }
      const std::int64_t lo = job_begin_ + c * job_grain_;
      const std::int64_t hi = std::min(job_end_, lo + job_grain_);
      try {
        (*job_)(c, lo, hi);
      } catch (...) {
        std::unique_lock<std::mutex> lock(mu_);
        if (!error_) error_ = std::current_exception();
      }
      std::unique_lock<std::mutex> lock(mu_);
      if (--pending_ == 0) done_cv_.notify_all();
    }
  }

  void worker_loop() {
    std::uint64_t seen = 0;
    for (;;) {
      {
        std::unique_lock<std::mutex> lock(mu_);
        cv_.wait(lock, [this, seen] { return stop_ || generation_ != seen; });
        if (stop_) return;
        seen = generation_;
        if (next_chunk_ >= job_chunks_) continue;
      }
      run_chunks();
    }
  }

  int threads_;
  std::vector<std::thread> workers_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::condition_variable done_cv_;
  bool stop_ = false;
  std::uint64_t generation_ = 0;
  const std::function<void(std::int64_t, std::int64_t, std::int64_t)>* job_ = nullptr;
  std::int64_t job_begin_ = 0, job_end_ = 0, job_grain_ = 1, job_chunks_ = 0;
  std::int64_t next_chunk_ = 0, pending_ = 0;
  std::exception_ptr error_;
};

}  // namespace mvmnp
