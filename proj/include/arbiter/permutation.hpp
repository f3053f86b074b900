#pragma once

// Per-round invertible shuffles of K lane indices: y = (A*x + B) mod K with
// A a unit mod K. The schedule keeps A fixed over each block of K rounds and
// steps B by one per round, so every (x, y) pairing occurs exactly once per
// block.

#include <cstdint>
#include <numeric>

#include "arbiter/core_model.hpp"

namespace arbiter {

// Modular inverse of a mod m, or 0 when gcd(a, m) != 1.
inline std::uint64_t mod_inverse(std::uint64_t a, std::uint64_t m) {
  if (m == 1) return 0;
  std::int64_t old_r = static_cast<std::int64_t>(a % m);
  std::int64_t r = static_cast<std::int64_t>(m);
  std::int64_t old_s = 1;
  std::int64_t s = 0;
  while (r != 0) {
    const std::int64_t q = old_r / r;
    std::int64_t t = old_r - q * r;
    old_r = r;
    r = t;
    t = old_s - q * s;
    old_s = s;
    s = t;
  }
  if (old_r != 1) return 0;
  const auto mm = static_cast<std::int64_t>(m);
  return static_cast<std::uint64_t>(((old_s % mm) + mm) % mm);
}

class AffinePermutation {
 public:
  AffinePermutation(std::uint32_t k, std::uint64_t a, std::uint64_t b)
      : k_(k), a_(k ? a % k : 0), b_(k ? b % k : 0) {
    if (k == 0) throw ConfigError("permutation size must be positive");
    if (std::gcd(a_, std::uint64_t{k}) != 1 && k > 1) {
      throw ConfigError("permutation multiplier must be coprime to K");
    }
    a_inv_ = k > 1 ? mod_inverse(a_, k) : 0;
  }

  std::uint32_t size() const { return k_; }
  std::uint64_t a() const { return a_; }
  std::uint64_t b() const { return b_; }

  std::uint32_t permute(std::uint32_t x) const {
    return static_cast<std::uint32_t>((a_ * (x % k_) + b_) % k_);
  }

  std::uint32_t invert(std::uint32_t y) const {
    const std::uint64_t shifted = (y % k_ + k_ - b_) % k_;
    return static_cast<std::uint32_t>(a_inv_ * shifted % k_);
  }

 private:
  std::uint32_t k_;
  std::uint64_t a_;
  std::uint64_t b_;
  std::uint64_t a_inv_ = 0;
};

class PermutationSchedule {
 public:
  PermutationSchedule(std::uint32_t k, std::uint64_t p1 = 2654435761ULL,
                      std::uint64_t p2 = 40503ULL)
      : k_(k), p1_(p1), p2_(p2) {
    if (k == 0) throw ConfigError("permutation size must be positive");
  }

  std::uint32_t size() const { return k_; }

  AffinePermutation round(std::uint64_t i) const {
    const std::uint64_t block = i / k_;
    return AffinePermutation(k_, multiplier(block),
                             (block % k_ * (p2_ % k_) + i) % k_);
  }

  std::uint32_t permute(std::uint32_t x, std::uint64_t i) const {
    return round(i).permute(x);
  }
  std::uint32_t invert(std::uint32_t y, std::uint64_t i) const {
    return round(i).invert(y);
  }

 private:
  // (block * P1) mod K, walked forward to the next unit.
  std::uint64_t multiplier(std::uint64_t block) const {
    if (k_ == 1) return 0;
    std::uint64_t a = (block % k_) * (p1_ % k_) % k_;
    while (std::gcd(a, std::uint64_t{k_}) != 1) a = (a + 1) % k_;
    return a;
  }

  std::uint32_t k_;
  std::uint64_t p1_;
  std::uint64_t p2_;
};

}  // namespace arbiter
