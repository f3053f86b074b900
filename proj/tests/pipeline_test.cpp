#include <gtest/gtest.h>

#include <map>
#include <random>

#include "arbiter/oracle.hpp"
#include "arbiter/pipeline_arch.hpp"
#include "test_support.hpp"

namespace arbiter {
namespace {

using testing::record;
using testing::Triple;

Config pipe_config(unsigned cores, unsigned batch, std::uint32_t nodes,
                   AllocationMode mode = AllocationMode::kBatchProcessing) {
  Config cfg;
  cfg.architecture = Architecture::kPipelined;
  cfg.pipeline_cores = cores;
  cfg.batch_size = batch;
  cfg.num_nodes = nodes;
  cfg.mode = mode;
  return cfg;
}

RunResult run_kept(const Config& cfg, std::vector<TraceRecord> trace) {
  RunOptions opts;
  opts.keep_batches = true;
  return run_pipeline(cfg, Workload::replay(std::move(trace)), opts);
}

TEST(Pipeline, FiveDemandSingleContext) {
  const RunResult r = run_kept(pipe_config(1, 1, 5), testing::five_demand_trace());
  ASSERT_GE(r.batches.size(), 2u);
  EXPECT_EQ(testing::pairs(r.batches[0]),
            (std::vector<std::pair<std::uint32_t, std::uint32_t>>{
                {1, 3}, {2, 1}, {3, 4}, {4, 2}}));
  EXPECT_EQ(testing::triples(r.batches[1]), (std::vector<Triple>{{2, 2, 3}}));
  EXPECT_TRUE(r.metrics.conserved());
  EXPECT_EQ(r.metrics.pending_slots, 0u);
}

TEST(Pipeline, BatchModeWorkedExample) {
  const RunResult r = run_kept(pipe_config(2, 8, 4),
                               {record(0, 1, 2, 100), record(0, 3, 2, 2)});
  std::map<TimeslotIndex, std::uint32_t> owner;
  for (const auto& [slot, src, dst] : testing::triples(r.batches)) {
    EXPECT_EQ(dst, 2u);
    owner[slot] = src;
  }
  for (TimeslotIndex s = 1; s <= 16; ++s) {
    ASSERT_TRUE(owner.contains(s)) << s;
    EXPECT_EQ(owner[s], (s == 9 || s == 10) ? 3u : 1u) << "slot " << s;
  }
  EXPECT_EQ(r.metrics.allocated_slots, 102u);
  EXPECT_TRUE(r.metrics.conserved());
}

TEST(Pipeline, EmptyTrace) {
  const RunResult r = run_kept(pipe_config(4, 8, 16), {});
  EXPECT_EQ(r.metrics.demanded_slots, 0u);
  EXPECT_EQ(r.metrics.allocated_slots, 0u);
  EXPECT_TRUE(r.metrics.conserved());
  EXPECT_TRUE(r.batches.empty());
}

TEST(Pipeline, RotationReseedsHeadBehindTail) {
  Pipeline pipe(pipe_config(3, 4, 8));
  EXPECT_EQ(pipe.head(), 0u);
  EXPECT_EQ(pipe.at_position(2).batch(), 2u);
  const AdmittedBatch b = pipe.step();
  EXPECT_EQ(b.base_slot, 1u);
  EXPECT_EQ(pipe.head(), 1u);
  EXPECT_EQ(pipe.context(0).batch(), 3u);
  EXPECT_EQ(pipe.context(0).base_slot(), 13u);
  EXPECT_EQ(pipe.at_position(0).batch(), 1u);
}

TEST(Pipeline, MasksRelaxTowardHead) {
  Pipeline pipe(pipe_config(4, 8, 8));
  EXPECT_EQ(pipe.mask_for(3), AllowedMask::top_only());
  EXPECT_EQ(pipe.mask_for(0), AllowedMask::all(32));
  for (unsigned k = 1; k < 4; ++k) {
    EXPECT_TRUE(pipe.mask_for(k - 1).includes(pipe.mask_for(k)));
  }
}

TEST(Pipeline, MidPipelineIngestion) {
  Config cfg = pipe_config(4, 8, 4);
  const RunResult head = run_kept(cfg, {record(0, 1, 2, 1)});
  cfg.mid_pipeline_ingestion = true;
  const RunResult mid = run_kept(cfg, {record(0, 1, 2, 1)});
  EXPECT_EQ(testing::triples(head.batches), (std::vector<Triple>{{1, 1, 2}}));
  // Entering at position 2 puts the first chance two batches later.
  EXPECT_EQ(testing::triples(mid.batches), (std::vector<Triple>{{17, 1, 2}}));
  EXPECT_TRUE(mid.metrics.conserved());
}

TEST(Pipeline, SingleContextMatchesOracleReplay) {
  for (AllocationMode mode : {AllocationMode::kBatchProcessing,
                              AllocationMode::kPerSlot}) {
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
      WorkloadSpec spec;
      spec.seed = seed;
      spec.num_nodes = 16;
      spec.mean_interarrival_ns = 2000.0;
      spec.duration_s = 0.004;
      const auto trace = gen_workload(spec);
      const Config cfg = pipe_config(1, 8, 16, mode);
      const RunResult r = run_kept(cfg, trace);
      const OracleReplay want = oracle_replay(trace, cfg);
      EXPECT_EQ(testing::triples(r.batches), testing::triples(want.batches))
          << to_string(mode) << " seed " << seed;
      EXPECT_TRUE(r.metrics.conserved());
    }
  }
}

TEST(Pipeline, ManyContextsStayValidAndConserve) {
  for (AllocationMode mode : {AllocationMode::kBatchProcessing,
                              AllocationMode::kPerSlot}) {
    for (unsigned cores : {2U, 4U, 7U}) {
      WorkloadSpec spec;
      spec.seed = cores;
      spec.num_nodes = 32;
      spec.mean_interarrival_ns = 300.0;
      spec.duration_s = 0.003;
      Config cfg = pipe_config(cores, 8, 32, mode);
      const RunResult r = run_kept(cfg, gen_workload(spec));
      EXPECT_TRUE(r.metrics.conserved());
      EXPECT_EQ(r.metrics.pending_slots, 0u);
      TimeslotIndex last_base = 0;
      for (const AdmittedBatch& b : r.batches) {
        EXPECT_GT(b.base_slot, last_base);
        last_base = b.base_slot;
        ASSERT_FALSE(verify_admitted(b).has_value());
        for (const Edge& e : b.edges) ASSERT_LT(e.offset, 8u);
      }
    }
  }
}

TEST(Pipeline, PositionCountersAddUp) {
  WorkloadSpec spec;
  spec.seed = 11;
  spec.num_nodes = 64;
  spec.mean_interarrival_ns = 400.0;
  spec.duration_s = 0.003;
  const RunResult r = run_kept(pipe_config(4, 8, 64), gen_workload(spec));
  ASSERT_EQ(r.metrics.lanes.size(), 4u);
  std::uint64_t allocated = 0;
  for (const LaneCounters& c : r.metrics.lanes) {
    std::uint64_t sum = 0;
    for (std::uint64_t n : c.drained_by_position) sum += n;
    EXPECT_EQ(sum, c.drained) << c.name;
    EXPECT_GT(c.drained_by_position[0], 0u) << c.name;
    allocated += c.allocated_slots;
  }
  EXPECT_EQ(allocated, r.metrics.allocated_slots);
}

TEST(Pipeline, FairnessBetweenTwoFlows) {
  const RunResult r = run_kept(pipe_config(4, 8, 3),
                               {record(0, 1, 0, 100000), record(0, 2, 0, 100000)});
  std::map<TimeslotIndex, std::uint32_t> owner;
  for (const auto& [slot, src, dst] : testing::triples(r.batches)) owner[slot] = src;
  for (TimeslotIndex start = 1; start + 64 <= 10'001; ++start) {
    int a = 0;
    for (TimeslotIndex s = start; s < start + 64; ++s) {
      ASSERT_TRUE(owner.contains(s));
      a += owner[s] == 1;
    }
    ASSERT_GE(a, 32 - 8);
    ASSERT_LE(a, 32 + 8);
  }
}

TEST(Pipeline, PacedSmokeRun) {
  Config cfg = pipe_config(2, 8, 32);
  WorkloadSpec spec;
  spec.num_nodes = 32;
  spec.mean_interarrival_ns = 20'000.0;
  RunOptions opts;
  opts.paced = true;
  opts.duration_s = 0.2;
  opts.drain_timeout_s = 1.0;
  opts.keep_batches = true;
  const RunResult r = run_pipeline(cfg, Workload::generated(spec), opts);
  EXPECT_GT(r.metrics.demanded_slots, 0u);
  EXPECT_TRUE(r.metrics.conserved());
  for (const AdmittedBatch& b : r.batches) {
    ASSERT_FALSE(verify_admitted(b).has_value());
  }
}

}  // namespace
}  // namespace arbiter
