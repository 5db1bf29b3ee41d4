#pragma once

#include <algorithm>
#include <condition_variable>
#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace mftc {

// Fixed-size pool running index-parallel loops with a static partition.
// Every index writes only its own output slot, so results do not depend on
// the worker count. Exceptions from workers are rethrown on the caller
// (the one from the lowest chunk wins).
class WorkerPool {
 public:
  explicit WorkerPool(unsigned workers = 1) : n_(std::max(1u, workers)) {
    for (unsigned w = 1; w < n_; ++w) threads_.emplace_back([this, w] { loop(w); });
  }
  ~WorkerPool() {
    {
      std::lock_guard<std::mutex> lk(m_);
      stop_ = true;
      ++gen_;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }
  WorkerPool(const WorkerPool&) = delete;
  WorkerPool& operator=(const WorkerPool&) = delete;

  unsigned size() const { return n_; }

  // Calls body(i) for i in [0, n). Loops shorter than min_chunk per worker
  // run inline.
  void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body, std::size_t min_chunk = 4) {
    if (n_ == 1 || n < 2 * min_chunk) {
      for (std::size_t i = 0; i < n; ++i) body(i);
      return;
    }
    std::unique_lock<std::mutex> lk(m_);
    body_ = &body;
    count_ = n;
    errors_.assign(n_, nullptr);
    pending_ = n_ - 1;
    ++gen_;
    lk.unlock();
    cv_.notify_all();
    run_chunk(0);
    lk.lock();
    done_.wait(lk, [this] { return pending_ == 0; });
    body_ = nullptr;
    for (auto& e : errors_)
      if (e) std::rethrow_exception(e);
  }

 private:
  void run_chunk(unsigned w) {
    std::size_t lo = count_ * w / n_, hi = count_ * (w + 1) / n_;
    try {
      for (std::size_t i = lo; i < hi; ++i) (*body_)(i);
    } catch (...) {
      errors_[w] = std::current_exception();
    }
  }

  void loop(unsigned w) {
    std::size_t seen = 0;
    for (;;) {
      std::unique_lock<std::mutex> lk(m_);
      cv_.wait(lk, [&] { return gen_ != seen; });
      seen = gen_;
      if (stop_) return;
      lk.unlock();
      run_chunk(w);
      lk.lock();
      if (--pending_ == 0) done_.notify_one();
    }
  }

  unsigned n_;
  std::vector<std::thread> threads_;
  std::mutex m_;
  std::condition_variable cv_, done_;
  const std::function<void(std::size_t)>* body_ = nullptr;
  std::size_t count_ = 0;
  std::size_t gen_ = 0;
  unsigned pending_ = 0;
  bool stop_ = false;
  std::vector<std::exception_ptr> errors_;
};

// Runs inline when no pool is given.
inline void parallel_for(WorkerPool* pool, std::size_t n, const std::function<void(std::size_t)>& body) {
  if (pool)
    pool->parallel_for(n, body);
  else
    for (std::size_t i = 0; i < n; ++i) body(i);
}

}  // namespace mftc
