#pragma once

// Domain types shared by every allocator architecture: node and slot
// identities, demands, availability bitmaps, admitted batches, run
// configuration, and the timeslot/throughput arithmetic.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace arbiter {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct NodeId {
  std::uint32_t value = 0;

  constexpr NodeId() = default;
  constexpr explicit NodeId(std::uint32_t v) : value(v) {}
  friend constexpr auto operator<=>(NodeId, NodeId) = default;
};

// Logical slot counter. Slot 0 is reserved to mean "never allocated", so
// the first schedulable slot is 1.
using TimeslotIndex = std::uint64_t;

constexpr TimeslotIndex kFirstSlot = 1;
constexpr unsigned kMaxBatchSize = 64;
constexpr unsigned kMaxPriorityBins = 64;

struct Demand {
  NodeId src;
  NodeId dst;
  std::uint32_t remaining = 0;
  TimeslotIndex last_alloc = 0;
  std::uint64_t id = 0;

  friend bool operator==(const Demand&, const Demand&) = default;
};

// One row of the demand trace, as produced by the workload generator or read
// from a trace file.
struct TraceRecord {
  std::int64_t arrival_ns = 0;
  NodeId src;
  NodeId dst;
  std::uint32_t size_packets = 0;

  friend bool operator==(const TraceRecord&, const TraceRecord&) = default;
};

enum class IngestVerdict { kAccept, kDropEmpty, kRejectMalformed };

inline IngestVerdict classify(const TraceRecord& r, std::uint32_t num_nodes) {
  if (r.src.value >= num_nodes || r.dst.value >= num_nodes || r.src == r.dst) {
    return IngestVerdict::kRejectMalformed;
  }
  if (r.size_packets == 0) return IngestVerdict::kDropEmpty;
  return IngestVerdict::kAccept;
}

inline Demand to_demand(const TraceRecord& r, std::uint64_t id) {
  return Demand{r.src, r.dst, r.size_packets, 0, id};
}

inline std::uint64_t low_bits(unsigned width) {
  return width >= 64 ? ~std::uint64_t{0} : (std::uint64_t{1} << width) - 1;
}

// Per-node free-slot bitmaps for one batch, kept separately for the source
// and destination roles. A set bit means the slot is free.
class AvailabilityBitmap {
 public:
  AvailabilityBitmap() = default;
  AvailabilityBitmap(std::uint32_t num_nodes, unsigned batch_size)
      : batch_size_(batch_size),
        full_(low_bits(batch_size)),
        rows_(2 * static_cast<std::size_t>(num_nodes), full_) {}

  unsigned batch_size() const { return batch_size_; }
  std::uint32_t num_nodes() const {
    return static_cast<std::uint32_t>(rows_.size() / 2);
  }
  std::uint64_t full_row() const { return full_; }

  std::uint64_t source_row(NodeId n) const { return rows_[2 * n.value]; }
  std::uint64_t destination_row(NodeId n) const {
    return rows_[2 * n.value + 1];
  }

  void claim(NodeId src, NodeId dst, unsigned offset) {
    const std::uint64_t bit = std::uint64_t{1} << offset;
    rows_[2 * src.value] &= ~bit;
    rows_[2 * dst.value + 1] &= ~bit;
  }

  void reset() { std::fill(rows_.begin(), rows_.end(), full_); }

 private:
  unsigned batch_size_ = 0;
  std::uint64_t full_ = 0;
  // Interleaved (src, dst) rows so one node's two roles share a cache line.
  std::vector<std::uint64_t> rows_;
};

struct Edge {
  std::uint32_t offset = 0;
  NodeId src;
  NodeId dst;

  friend auto operator<=>(const Edge&, const Edge&) = default;
};

struct AdmittedBatch {
  TimeslotIndex base_slot = kFirstSlot;
  std::vector<Edge> edges;

  TimeslotIndex slot_of(const Edge& e) const { return base_slot + e.offset; }
};

enum class Architecture { kPipelined, kParallel, kShuffle };
enum class AllocationMode { kPerSlot, kBatchProcessing };

inline const char* to_string(Architecture a) {
  switch (a) {
    case Architecture::kPipelined: return "pipelined";
    case Architecture::kParallel: return "parallel";
    case Architecture::kShuffle: return "shuffle";
  }
  return "?";
}

inline const char* to_string(AllocationMode m) {
  return m == AllocationMode::kPerSlot ? "per-slot" : "batch";
}

inline std::int64_t timeslot_duration(std::uint64_t mtu_bytes,
                                      double link_rate_bps) {
  if (mtu_bytes == 0) throw ConfigError("mtu_bytes must be positive");
  if (!(link_rate_bps > 0)) throw ConfigError("link_rate_bps must be positive");
  const long double ns = static_cast<long double>(mtu_bytes) * 8.0L * 1e9L /
                         static_cast<long double>(link_rate_bps);
  return static_cast<std::int64_t>(std::llround(ns));
}

inline double throughput_bps(std::uint64_t allocated_slots,
                             std::uint64_t mtu_bytes,
                             std::int64_t wall_elapsed_ns) {
  if (wall_elapsed_ns <= 0) {
    throw std::invalid_argument("wall_elapsed_ns must be positive");
  }
  return static_cast<double>(allocated_slots) *
         static_cast<double>(mtu_bytes) * 8.0 * 1e9 /
         static_cast<double>(wall_elapsed_ns);
}

struct Config {
  std::uint32_t num_nodes = 256;
  unsigned batch_size = 8;
  unsigned num_priority_bins = 32;
  double link_rate_bps = 10e9;
  std::uint32_t mtu_bytes = 1500;

  Architecture architecture = Architecture::kPipelined;
  AllocationMode mode = AllocationMode::kBatchProcessing;
  unsigned pipeline_cores = 4;
  unsigned parallel_lanes = 4;
  unsigned shuffle_sets = 1;

  std::uint64_t seed = 1;
  std::uint64_t gap_bound = 10'000;
  std::size_t mailbox_depth = 4096;
  std::size_t qhead_depth = 4096;
  std::size_t bin_capacity = 64;
  unsigned bins_per_set = 4;
  bool mid_pipeline_ingestion = false;

  std::uint64_t perm_p1 = 2654435761ULL;
  std::uint64_t perm_p2 = 40503ULL;

  std::int64_t slot_ns() const {
    return timeslot_duration(mtu_bytes, link_rate_bps);
  }
  std::int64_t batch_ns() const { return slot_ns() * batch_size; }

  TimeslotIndex base_slot_of(std::uint64_t batch) const {
    return kFirstSlot + batch * batch_size;
  }

  void validate() const {
    if (num_nodes < 2) throw ConfigError("num_nodes must be at least 2");
    if (batch_size == 0 || batch_size > kMaxBatchSize ||
        !std::has_single_bit(batch_size)) {
      throw ConfigError("batch_size must be a power of two in [1, 64]");
    }
    if (num_priority_bins == 0 || num_priority_bins > kMaxPriorityBins) {
      throw ConfigError("num_priority_bins must be in [1, 64]");
    }
    if (bin_capacity == 0) throw ConfigError("bin_capacity must be at least 1");
    if (bins_per_set == 0) throw ConfigError("bins_per_set must be at least 1");
    if (pipeline_cores == 0 || parallel_lanes == 0 || shuffle_sets == 0) {
      throw ConfigError("lane counts must be at least 1");
    }
    if (shuffle_sets > num_nodes) {
      throw ConfigError("shuffle_sets cannot exceed num_nodes");
    }
    if (mailbox_depth < 2 || qhead_depth < 2) {
      throw ConfigError("conduit depths must be at least 2");
    }
    (void)slot_ns();
  }
};

struct LaneCounters {
  std::string name;
  std::uint64_t received = 0;
  std::uint64_t drained = 0;
  std::uint64_t allocated_slots = 0;
  std::uint64_t forwarded = 0;
  // Pipeline only: demands drained while the context sat at each position
  // (index 0 is the head).
  std::vector<std::uint64_t> drained_by_position;
};

struct Metrics {
  std::uint64_t demanded_slots = 0;
  std::uint64_t allocated_slots = 0;
  std::uint64_t pending_slots = 0;
  std::uint64_t cancelled_then_reissued = 0;
  std::int64_t wall_elapsed_ns = 0;
  double throughput_bps = 0.0;

  std::uint64_t demands_ingested = 0;
  std::uint64_t demands_rejected = 0;
  std::uint64_t batches_emitted = 0;
  std::uint64_t max_gap = 0;
  std::uint64_t conduit_overflows = 0;
  std::int64_t max_ingest_lag_ns = 0;
  bool overload = false;
  // Length of the load-generation window: wall time in paced runs,
  // simulated time in deterministic runs.
  std::int64_t window_ns = 0;
  std::vector<LaneCounters> lanes;

  bool conserved() const {
    return demanded_slots == allocated_slots + pending_slots;
  }
};

}  // namespace arbiter
