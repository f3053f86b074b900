#include <gtest/gtest.h>

#include <random>

#include "arbiter/greedy_allocator.hpp"
#include "arbiter/oracle.hpp"
#include "test_support.hpp"

namespace arbiter {
namespace {

using testing::demand;

std::uint64_t offsets(std::initializer_list<unsigned> bits) {
  std::uint64_t row = 0;
  for (unsigned b : bits) row |= std::uint64_t{1} << b;
  return row;
}

TEST(FirstFreeSlot, Examples) {
  EXPECT_EQ(first_free_slot(0xFF, 0xFF), 0u);
  EXPECT_FALSE(first_free_slot(0x00, 0xFF).has_value());
  EXPECT_EQ(first_free_slot(offsets({2, 4, 5, 7}), offsets({0, 2, 7})), 2u);
}

TEST(FirstFreeSlot, MatchesLinearScan) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 10000; ++i) {
    const std::uint64_t a = rng();
    const std::uint64_t b = rng();
    std::optional<unsigned> expect;
    for (unsigned s = 0; s < 64; ++s) {
      if (((a >> s) & 1) && ((b >> s) & 1)) {
        expect = s;
        break;
      }
    }
    EXPECT_EQ(first_free_slot(a, b), expect);
  }
}

TEST(BinIndex, Examples) {
  EXPECT_EQ(bin_index(0, 40), 0u);
  EXPECT_EQ(bin_index(100, 132), 0u);
  EXPECT_EQ(bin_index(50, 50), 31u);
  EXPECT_EQ(bin_index(90, 100), 21u);
  EXPECT_EQ(bin_index(0, 9), 22u);
  // last_alloc ahead of current saturates to the lowest priority.
  EXPECT_EQ(bin_index(60, 50), 31u);
}

TEST(BinIndex, MonotoneInGap) {
  for (TimeslotIndex gap = 0; gap < 64; ++gap) {
    EXPECT_GE(bin_index(100, 100 + gap), bin_index(100, 100 + gap + 1));
  }
}

TEST(RelaxMask, Schedule) {
  EXPECT_EQ(relax_mask(0, 7), AllowedMask::top_only());
  EXPECT_EQ(relax_mask(7, 7), AllowedMask::all(32));
  EXPECT_EQ(relax_mask(0, 0), AllowedMask::all(32));
  EXPECT_EQ(relax_mask(1, 2).bits(), low_bits(17));
  for (std::uint64_t t = 0; t < 10; ++t) {
    EXPECT_TRUE(relax_mask(t + 1, 10).includes(relax_mask(t, 10)));
  }
}

TEST(SortIntoBins, GapOrderAndFifo) {
  PriorityBins bins(32, 8);
  const std::vector<Demand> ds = {demand(1, 2, 1, 60, 0), demand(3, 4, 1, 20, 1),
                                  demand(5, 6, 1, 20, 2)};
  EXPECT_EQ(sort_into_bins(ds, 60, bins), 3u);
  EXPECT_EQ(bins.coarse(31).size(), 1u);
  ASSERT_EQ(bins.coarse(0).size(), 2u);
  EXPECT_EQ(bins.coarse(0)[0].id, 1u);
  EXPECT_EQ(bins.coarse(0)[1].id, 2u);

  AvailabilityBitmap bm(8, 1);
  const BatchOutcome out = allocate_batch(bins, AllowedMask::all(32), bm,
                                          AllocationMode::kBatchProcessing, 61);
  // The gap-40 demand drains before the just-served one.
  ASSERT_EQ(out.admitted.edges.size(), 3u);
  EXPECT_EQ(out.admitted.edges[0].src, NodeId(3));
  EXPECT_EQ(out.admitted.edges[2].src, NodeId(1));
}

TEST(SortIntoBins, EmptyInputAndBackpressure) {
  PriorityBins bins(32, 8, 2);
  EXPECT_EQ(sort_into_bins({}, 0, bins), 0u);
  const std::vector<Demand> ds = {demand(1, 2), demand(2, 3), demand(3, 4)};
  EXPECT_EQ(sort_into_bins(ds, 10, bins), 2u);
  EXPECT_TRUE(bins.full());
}

TEST(AllocateBatch, FiveDemand) {
  PriorityBins bins(32, 1);
  for (const Demand& d : testing::five_demand_example()) bins.push(0, d);
  AvailabilityBitmap bm(5, 1);
  const BatchOutcome out = allocate_batch(bins, AllowedMask::top_only(), bm,
                                          AllocationMode::kBatchProcessing, 1);
  using P = std::pair<std::uint32_t, std::uint32_t>;
  EXPECT_EQ(testing::pairs(out.admitted),
            (std::vector<P>{{1, 3}, {2, 1}, {3, 4}, {4, 2}}));
  ASSERT_EQ(out.remainders.size(), 1u);
  EXPECT_EQ(out.remainders[0].src, NodeId(2));
  EXPECT_EQ(out.remainders[0].dst, NodeId(3));
  EXPECT_FALSE(verify_admitted(out.admitted).has_value());
}

TEST(AllocateBatch, BatchModeWorkedExampleTwoLanes) {
  // Lane 1 owns slots 1..8, lane 2 owns 9..16.
  PriorityBins lane1(32, 8);
  sort_into_bins(std::vector<Demand>{demand(1, 2, 100, 0, 0), demand(3, 2, 2, 0, 1)},
                 1, lane1);
  AvailabilityBitmap bm1(4, 8);
  const BatchOutcome first = allocate_batch(lane1, AllowedMask::all(32), bm1,
                                            AllocationMode::kBatchProcessing, 1);
  ASSERT_EQ(first.admitted.edges.size(), 8u);
  for (const Edge& e : first.admitted.edges) EXPECT_EQ(e.src, NodeId(1));
  ASSERT_EQ(first.remainders.size(), 2u);
  EXPECT_EQ(first.remainders[0], demand(1, 2, 92, 8, 0));
  EXPECT_EQ(first.remainders[1], demand(3, 2, 2, 0, 1));

  PriorityBins lane2(32, 8);
  sort_into_bins(first.remainders, 9, lane2);
  AvailabilityBitmap bm2(4, 8);
  const BatchOutcome second = allocate_batch(lane2, AllowedMask::all(32), bm2,
                                             AllocationMode::kBatchProcessing, 9);
  ASSERT_EQ(second.admitted.edges.size(), 8u);
  for (const Edge& e : second.admitted.edges) {
    const TimeslotIndex slot = second.admitted.slot_of(e);
    if (e.src == NodeId(3)) {
      EXPECT_TRUE(slot == 9 || slot == 10) << slot;
    } else {
      EXPECT_GE(slot, 11u);
      EXPECT_LE(slot, 16u);
    }
  }
  ASSERT_EQ(second.remainders.size(), 1u);
  EXPECT_EQ(second.remainders[0], demand(1, 2, 86, 16, 0));
}

TEST(AllocateBatch, EmptyBins) {
  PriorityBins bins(32, 8);
  AvailabilityBitmap bm(4, 8);
  const BatchOutcome out = allocate_batch(bins, AllowedMask::all(32), bm,
                                          AllocationMode::kPerSlot, 1);
  EXPECT_TRUE(out.admitted.edges.empty());
  EXPECT_TRUE(out.remainders.empty());
}

TEST(AllocateBatch, MaskLeavesDisabledBinsQueued) {
  PriorityBins bins(32, 8);
  bins.push(0, demand(1, 2, 1));
  bins.push(5, demand(3, 4, 1));
  AvailabilityBitmap bm(8, 8);
  const BatchOutcome out = allocate_batch(bins, AllowedMask::top_only(), bm,
                                          AllocationMode::kBatchProcessing, 1);
  EXPECT_EQ(out.admitted.edges.size(), 1u);
  EXPECT_EQ(bins.coarse(5).size(), 1u);
}

TEST(AllocateBatch, PerSlotParksInExtraBins) {
  // One demand wanting 3 slots collects offsets 0, 1, 2 via the extra bins.
  PriorityBins bins(32, 8);
  bins.push(0, demand(1, 2, 3));
  AvailabilityBitmap bm(4, 8);
  const BatchOutcome out = allocate_batch(bins, AllowedMask::all(32), bm,
                                          AllocationMode::kPerSlot, 1);
  ASSERT_EQ(out.admitted.edges.size(), 3u);
  EXPECT_EQ(out.admitted.edges[0].offset, 0u);
  EXPECT_EQ(out.admitted.edges[1].offset, 1u);
  EXPECT_EQ(out.admitted.edges[2].offset, 2u);
  EXPECT_TRUE(out.remainders.empty());
}

TEST(AllocateBatch, PerSlotInterleavesWhereBatchModeDoesNot) {
  const std::vector<Demand> ds = {demand(1, 2, 8, 0, 0), demand(3, 2, 8, 0, 1)};
  for (AllocationMode mode : {AllocationMode::kPerSlot,
                              AllocationMode::kBatchProcessing}) {
    PriorityBins bins(32, 8);
    for (const Demand& d : ds) bins.push(0, d);
    AvailabilityBitmap bm(4, 8);
    const BatchOutcome out =
        allocate_batch(bins, AllowedMask::all(32), bm, mode, 1);
    ASSERT_EQ(out.admitted.edges.size(), 8u);
    std::size_t from1 = 0;
    for (const Edge& e : out.admitted.edges) from1 += e.src == NodeId(1);
    if (mode == AllocationMode::kPerSlot) {
      EXPECT_EQ(from1, 4u);
    } else {
      EXPECT_EQ(from1, 8u);
    }
  }
}

TEST(AllocateBatch, BatchModeCapsAtBatchSize) {
  PriorityBins bins(32, 8);
  bins.push(0, demand(1, 2, 3));
  bins.push(0, demand(3, 4, 20));
  AvailabilityBitmap bm(8, 8);
  const BatchOutcome out = allocate_batch(bins, AllowedMask::all(32), bm,
                                          AllocationMode::kBatchProcessing, 1);
  EXPECT_EQ(out.admitted.edges.size(), 11u);
  ASSERT_EQ(out.remainders.size(), 1u);
  EXPECT_EQ(out.remainders[0].remaining, 12u);
  EXPECT_EQ(out.remainders[0].last_alloc, 8u);
}

// Kernel and oracle agree bit for bit on random orders, in both modes.
TEST(AllocateBatch, MatchesOracleOnRandomInstances) {
  std::mt19937_64 rng(20240601);
  for (int trial = 0; trial < 10000; ++trial) {
    const std::uint32_t nodes = 2 + static_cast<std::uint32_t>(rng() % 14);
    const unsigned batch = 1U << (rng() % 4);
    const std::size_t n = rng() % 24;
    const auto mode = (trial & 1) ? AllocationMode::kPerSlot
                                  : AllocationMode::kBatchProcessing;
    const auto ds = testing::random_demands(rng, n, nodes, 12);
    PriorityBins bins(32, batch);
    for (const Demand& d : ds) bins.push(0, d);
    AvailabilityBitmap bm(nodes, batch);
    const TimeslotIndex base = 1 + (rng() % 100) * batch;
    const BatchOutcome got =
        allocate_batch(bins, AllowedMask::top_only(), bm, mode, base);
    const OracleOutcome want = oracle_allocate(ds, batch, mode, base);
    ASSERT_EQ(got.admitted.edges, want.admitted.edges) << "trial " << trial;
    ASSERT_EQ(got.remainders, want.remainders) << "trial " << trial;
    ASSERT_FALSE(verify_admitted(got.admitted).has_value());
    if (mode == AllocationMode::kBatchProcessing) {
      ASSERT_FALSE(verify_maximal(got.admitted, got.remainders, batch).has_value());
    }
  }
}

TEST(AllocateBatch, FairnessBetweenTwoBackloggedFlows) {
  // Two flows into node 0, re-sorted by LRU each batch.
  std::vector<Demand> live = {demand(1, 0, 1'000'000, 0, 0),
                              demand(2, 0, 1'000'000, 0, 1)};
  std::vector<int> owner;
  for (std::uint64_t b = 0; b < 200; ++b) {
    const TimeslotIndex base = 1 + b * 8;
    PriorityBins bins(32, 8);
    sort_into_bins(live, base, bins);
    AvailabilityBitmap bm(3, 8);
    BatchOutcome out = allocate_batch(bins, AllowedMask::all(32), bm,
                                      AllocationMode::kBatchProcessing, base);
    std::vector<int> slot_owner(8, -1);
    for (const Edge& e : out.admitted.edges) {
      slot_owner[e.offset] = static_cast<int>(e.src.value);
    }
    owner.insert(owner.end(), slot_owner.begin(), slot_owner.end());
    live = std::move(out.remainders);
  }
  for (std::size_t start = 0; start + 16 <= owner.size(); ++start) {
    int a = 0;
    int c = 0;
    for (std::size_t i = start; i < start + 16; ++i) {
      a += owner[i] == 1;
      c += owner[i] == 2;
    }
    EXPECT_EQ(a, c) << "window at " << start;
  }
}

// With one slot per batch the result is a maximal matching, hence at least
// half the size of a maximum one.
TEST(AllocateBatch, HalfApproximationOnSmallGraphs) {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::uint32_t nodes = 2 + static_cast<std::uint32_t>(rng() % 3);
    const std::size_t n = 1 + rng() % 10;
    const auto ds = testing::random_demands(rng, n, nodes, 1);
    PriorityBins bins(32, 1);
    std::vector<std::pair<std::uint32_t, std::uint32_t>> edges;
    for (const Demand& d : ds) {
      bins.push(0, d);
      edges.emplace_back(d.src.value, d.dst.value);
    }
    AvailabilityBitmap bm(nodes, 1);
    const BatchOutcome out = allocate_batch(bins, AllowedMask::top_only(), bm,
                                            AllocationMode::kBatchProcessing, 1);
    ASSERT_GE(2 * out.admitted.edges.size(), testing::max_matching_size(edges));
  }
}

TEST(GreedyAllocator, HeldDemandsReleasedOnFlush) {
  GreedyAllocator k(4, 2, 32, AllocationMode::kPerSlot);
  k.reset(1);
  k.accept(demand(1, 2, 5));
  std::vector<Demand> rem;
  k.allocate(AllowedMask::all(32), rem);
  EXPECT_TRUE(rem.empty());
  EXPECT_EQ(k.admitted().edges.size(), 2u);
  EXPECT_EQ(k.pending_slots(), 3u);
  k.flush(rem);
  ASSERT_EQ(rem.size(), 1u);
  EXPECT_EQ(rem[0].remaining, 3u);
  EXPECT_EQ(rem[0].last_alloc, 2u);
}

TEST(GreedyAllocator, RecordsGrants) {
  GreedyAllocator k(4, 8, 32, AllocationMode::kBatchProcessing);
  k.record_grants(true);
  k.reset(9);
  k.accept(demand(1, 2, 2, 5, 42));
  std::vector<Demand> rem;
  k.allocate(AllowedMask::all(32), rem);
  ASSERT_EQ(k.grants().size(), 2u);
  EXPECT_EQ(k.grants()[0].demand_id, 42u);
  EXPECT_EQ(k.grants()[0].prior_last_alloc, 5u);
  EXPECT_EQ(k.grants()[1].prior_last_alloc, 9u);
}

}  // namespace
}  // namespace arbiter
