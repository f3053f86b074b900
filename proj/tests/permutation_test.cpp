#include <gtest/gtest.h>

#include <set>
#include <vector>

#include "arbiter/permutation.hpp"

namespace arbiter {
namespace {

TEST(ModInverse, Basics) {
  EXPECT_EQ(mod_inverse(3, 4), 3u);
  EXPECT_EQ(mod_inverse(3, 7), 5u);
  EXPECT_EQ(mod_inverse(2, 4), 0u);
  EXPECT_EQ(mod_inverse(5, 1), 0u);
}

TEST(AffinePermutation, WorkedExample) {
  const AffinePermutation p(4, 3, 1);
  std::vector<std::uint32_t> ys;
  for (std::uint32_t x = 0; x < 4; ++x) ys.push_back(p.permute(x));
  EXPECT_EQ(ys, (std::vector<std::uint32_t>{1, 0, 3, 2}));
  EXPECT_EQ(p.invert(3), 2u);
}

TEST(AffinePermutation, RejectsNonUnitMultiplier) {
  EXPECT_THROW(AffinePermutation(4, 2, 0), ConfigError);
  EXPECT_THROW(AffinePermutation(6, 3, 1), ConfigError);
  EXPECT_THROW(AffinePermutation(0, 1, 0), ConfigError);
  EXPECT_NO_THROW(AffinePermutation(1, 0, 0));
}

TEST(AffinePermutation, InverseRoundTrips) {
  for (std::uint32_t k : {1U, 2U, 3U, 4U, 7U, 8U, 12U, 16U}) {
    for (std::uint64_t a = 1; a < 2 * k + 1; ++a) {
      if (std::gcd(a, std::uint64_t{k}) != 1 && k > 1) continue;
      for (std::uint64_t b = 0; b < k; ++b) {
        const AffinePermutation p(k, a, b);
        std::set<std::uint32_t> image;
        for (std::uint32_t x = 0; x < k; ++x) {
          image.insert(p.permute(x));
          ASSERT_EQ(p.invert(p.permute(x)), x);
        }
        ASSERT_EQ(image.size(), k);
      }
    }
  }
}

TEST(PermutationSchedule, EveryPairingOncePerBlock) {
  for (std::uint32_t k : {1U, 2U, 3U, 4U, 5U, 8U, 12U}) {
    const PermutationSchedule sched(k);
    for (std::uint64_t block = 0; block < 6; ++block) {
      std::vector<std::vector<int>> hits(k, std::vector<int>(k, 0));
      for (std::uint64_t i = block * k; i < (block + 1) * k; ++i) {
        for (std::uint32_t x = 0; x < k; ++x) {
          const std::uint32_t y = sched.permute(x, i);
          ASSERT_EQ(sched.invert(y, i), x);
          ++hits[x][y];
        }
      }
      for (std::uint32_t x = 0; x < k; ++x) {
        for (std::uint32_t y = 0; y < k; ++y) {
          EXPECT_EQ(hits[x][y], 1) << "k=" << k << " block=" << block;
        }
      }
    }
  }
}

TEST(PermutationSchedule, MultiplierVariesAcrossBlocks) {
  const PermutationSchedule sched(8);
  std::set<std::uint64_t> multipliers;
  for (std::uint64_t block = 0; block < 16; ++block) {
    multipliers.insert(sched.round(block * 8).a());
  }
  EXPECT_GT(multipliers.size(), 1u);
}

}  // namespace
}  // namespace arbiter
