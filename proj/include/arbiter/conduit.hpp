#pragma once

// Inter-lane message passing: a bounded single-producer single-consumer ring
// for demand streams and a one-slot cache-line mailbox for handing off
// pointers.

#include <atomic>
#include <bit>
#include <chrono>
#include <cstddef>
#include <thread>
#include <vector>

namespace arbiter {

constexpr std::size_t kCacheLineBytes = 64;

inline void cpu_relax() {
#if defined(__x86_64__) || defined(__i386__)
  __builtin_ia32_pause();
#endif
}

// Spin briefly, then yield, then nap. Lanes may outnumber cores, so a lane
// that stays idle must hand the CPU back.
class Backoff {
 public:
  void pause() {
    if (spins_ < kSpinLimit) {
      ++spins_;
      cpu_relax();
    } else if (spins_ < kYieldLimit) {
      ++spins_;
      std::this_thread::yield();
    } else {
      std::this_thread::sleep_for(std::chrono::microseconds(kNapUs));
    }
  }
  void reset() { spins_ = 0; }

 private:
  static constexpr unsigned kSpinLimit = 16;
  static constexpr unsigned kYieldLimit = kSpinLimit + 64;
  static constexpr unsigned kNapUs = 20;
  unsigned spins_ = 0;
};

template <typename T>
class SpscRing {
 public:
  explicit SpscRing(std::size_t capacity)
      : mask_(std::bit_ceil(capacity < 2 ? std::size_t{2} : capacity) - 1),
        slots_(mask_ + 1) {}

  SpscRing(const SpscRing&) = delete;
  SpscRing& operator=(const SpscRing&) = delete;

  std::size_t capacity() const { return mask_ + 1; }

  // Producer side.
  bool try_push(const T& v) {
    const std::size_t tail = tail_.load(std::memory_order_relaxed);
    if (tail - head_cache_ > mask_) {
      head_cache_ = head_.load(std::memory_order_acquire);
      if (tail - head_cache_ > mask_) return false;
    }
    slots_[tail & mask_] = v;
    tail_.store(tail + 1, std::memory_order_release);
    return true;
  }

  // Consumer side. front() is valid until the next pop().
  const T* front() {
    const std::size_t head = head_.load(std::memory_order_relaxed);
    if (head == tail_cache_) {
      tail_cache_ = tail_.load(std::memory_order_acquire);
      if (head == tail_cache_) return nullptr;
    }
    return &slots_[head & mask_];
  }

  void pop() {
    head_.store(head_.load(std::memory_order_relaxed) + 1,
                std::memory_order_release);
  }

  bool try_pop(T& out) {
    const T* v = front();
    if (v == nullptr) return false;
    out = *v;
    pop();
    return true;
  }

  std::size_t size_approx() const {
    return tail_.load(std::memory_order_acquire) -
           head_.load(std::memory_order_acquire);
  }
  bool empty() const { return size_approx() == 0; }

  // Only valid while neither side is active.
  template <typename F>
  void for_each_quiescent(F&& f) const {
    const std::size_t head = head_.load(std::memory_order_acquire);
    const std::size_t tail = tail_.load(std::memory_order_acquire);
    for (std::size_t i = head; i != tail; ++i) f(slots_[i & mask_]);
  }

 private:
  const std::size_t mask_;
  std::vector<T> slots_;
  alignas(kCacheLineBytes) std::atomic<std::size_t> head_{0};
  std::size_t tail_cache_ = 0;
  alignas(kCacheLineBytes) std::atomic<std::size_t> tail_{0};
  std::size_t head_cache_ = 0;
};

// One-slot handoff of a pointer. The writer stores the pointer and then sets
// the full flag; the reader takes the pointer and clears it. Each side only
// acts when the flag is in its state, so the contents never get copied.
template <typename T>
class alignas(kCacheLineBytes) Mailbox {
 public:
  bool try_put(T* item) {
    if (full_.load(std::memory_order_acquire)) return false;
    slot_ = item;
    full_.store(true, std::memory_order_release);
    return true;
  }

  T* try_take() {
    if (!full_.load(std::memory_order_acquire)) return nullptr;
    T* item = slot_;
    full_.store(false, std::memory_order_release);
    return item;
  }

  void put(T* item) {
    Backoff backoff;
    while (!try_put(item)) backoff.pause();
  }

  T* take() {
    Backoff backoff;
    T* item = nullptr;
    while ((item = try_take()) == nullptr) backoff.pause();
    return item;
  }

  bool full() const { return full_.load(std::memory_order_acquire); }

  // Reader-side look at the pending handle without consuming it.
  T* peek() const {
    return full_.load(std::memory_order_acquire) ? slot_ : nullptr;
  }

 private:
  std::atomic<bool> full_{false};
  T* slot_ = nullptr;
};

}  // namespace arbiter
