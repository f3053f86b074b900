#include <gtest/gtest.h>

#include <cstdint>
#include <thread>
#include <vector>

#include "arbiter/conduit.hpp"

namespace arbiter {
namespace {

TEST(SpscRing, CapacityRoundsUpToPowerOfTwo) {
  EXPECT_EQ(SpscRing<int>(5).capacity(), 8u);
  EXPECT_EQ(SpscRing<int>(1).capacity(), 2u);
  EXPECT_EQ(SpscRing<int>(16).capacity(), 16u);
}

TEST(SpscRing, FifoAndBackpressure) {
  SpscRing<int> ring(4);
  for (int i = 0; i < 4; ++i) EXPECT_TRUE(ring.try_push(i));
  EXPECT_FALSE(ring.try_push(99));
  EXPECT_EQ(ring.size_approx(), 4u);
  int v = -1;
  ASSERT_TRUE(ring.try_pop(v));
  EXPECT_EQ(v, 0);
  EXPECT_TRUE(ring.try_push(4));
  std::vector<int> seen;
  ring.for_each_quiescent([&](int x) { seen.push_back(x); });
  EXPECT_EQ(seen, (std::vector<int>{1, 2, 3, 4}));
  for (int want = 1; want <= 4; ++want) {
    ASSERT_NE(ring.front(), nullptr);
    EXPECT_EQ(*ring.front(), want);
    ring.pop();
  }
  EXPECT_EQ(ring.front(), nullptr);
  EXPECT_TRUE(ring.empty());
}

TEST(SpscRing, ThreadedTransferKeepsOrder) {
  constexpr std::uint64_t kCount = 200'000;
  SpscRing<std::uint64_t> ring(64);
  std::thread producer([&] {
    Backoff backoff;
    for (std::uint64_t i = 0; i < kCount; ++i) {
      while (!ring.try_push(i)) backoff.pause();
      backoff.reset();
    }
  });
  std::uint64_t expected = 0;
  Backoff backoff;
  while (expected < kCount) {
    std::uint64_t v = 0;
    if (ring.try_pop(v)) {
      ASSERT_EQ(v, expected);
      ++expected;
      backoff.reset();
    } else {
      backoff.pause();
    }
  }
  producer.join();
  EXPECT_TRUE(ring.empty());
}

TEST(Mailbox, SingleSlotHandoff) {
  Mailbox<int> box;
  int a = 1;
  int b = 2;
  EXPECT_EQ(box.try_take(), nullptr);
  EXPECT_TRUE(box.try_put(&a));
  EXPECT_TRUE(box.full());
  EXPECT_FALSE(box.try_put(&b));
  EXPECT_EQ(box.peek(), &a);
  EXPECT_EQ(box.try_take(), &a);
  EXPECT_FALSE(box.full());
  EXPECT_EQ(box.peek(), nullptr);
}

TEST(Mailbox, PingPongBetweenThreads) {
  constexpr int kRounds = 20'000;
  Mailbox<int> to_worker;
  Mailbox<int> to_main;
  int token = 0;
  std::thread worker([&] {
    for (int i = 0; i < kRounds; ++i) {
      int* t = to_worker.take();
      ++*t;
      to_main.put(t);
    }
  });
  for (int i = 0; i < kRounds; ++i) {
    to_worker.put(&token);
    EXPECT_EQ(to_main.take(), &token);
  }
  worker.join();
  EXPECT_EQ(token, kRounds);
}

TEST(Mailbox, AlignedToCacheLine) {
  EXPECT_EQ(alignof(Mailbox<int>), kCacheLineBytes);
}

}  // namespace
}  // namespace arbiter
