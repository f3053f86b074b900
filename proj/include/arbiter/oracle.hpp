#pragma once

// Reference greedy allocator and verifiers. Deliberately written against
// plain per-slot node sets rather than the kernel's bitmaps so the two can
// be compared.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "arbiter/core_model.hpp"

namespace arbiter {

// Per-slot sets of sources and destinations already transmitting.
class OracleState {
 public:
  explicit OracleState(unsigned batch_size)
      : used_src_(batch_size), used_dst_(batch_size) {}

  unsigned batch_size() const {
    return static_cast<unsigned>(used_src_.size());
  }

  bool is_free(unsigned slot, NodeId src, NodeId dst) const {
    return !used_src_[slot].contains(src.value) &&
           !used_dst_[slot].contains(dst.value);
  }

  void take(unsigned slot, NodeId src, NodeId dst) {
    used_src_[slot].insert(src.value);
    used_dst_[slot].insert(dst.value);
  }

  std::optional<unsigned> lowest_free(NodeId src, NodeId dst) const {
    for (unsigned s = 0; s < batch_size(); ++s) {
      if (is_free(s, src, dst)) return s;
    }
    return std::nullopt;
  }

 private:
  std::vector<std::set<std::uint32_t>> used_src_;
  std::vector<std::set<std::uint32_t>> used_dst_;
};

struct OracleOutcome {
  AdmittedBatch admitted;
  std::vector<Demand> remainders;
};

// Textbook sequential greedy over an explicit demand order.
inline OracleOutcome oracle_allocate(std::span<const Demand> ordered,
                                     unsigned batch_size, AllocationMode mode,
                                     TimeslotIndex base_slot = kFirstSlot) {
  OracleOutcome out;
  out.admitted.base_slot = base_slot;
  OracleState state(batch_size);

  auto give = [&](Demand& d, unsigned slot) {
    state.take(slot, d.src, d.dst);
    out.admitted.edges.push_back(Edge{slot, d.src, d.dst});
    d.remaining -= 1;
    d.last_alloc = base_slot + slot;
  };

  if (mode == AllocationMode::kBatchProcessing) {
    for (Demand d : ordered) {
      for (unsigned s = 0; s < batch_size && d.remaining > 0; ++s) {
        if (state.is_free(s, d.src, d.dst)) give(d, s);
      }
      if (d.remaining > 0) out.remainders.push_back(d);
    }
    return out;
  }

  // Per slot: one slot per demand on the first pass, then the parked
  // demands are revisited slot by slot.
  std::vector<std::vector<Demand>> parked(batch_size);
  std::vector<Demand> held;
  for (Demand d : ordered) {
    const auto slot = state.lowest_free(d.src, d.dst);
    if (!slot) {
      out.remainders.push_back(d);
      continue;
    }
    give(d, *slot);
    if (d.remaining > 0) parked[*slot].push_back(d);
  }
  for (unsigned j = 0; j < batch_size; ++j) {
    for (std::size_t k = 0; k < parked[j].size(); ++k) {
      Demand d = parked[j][k];
      const auto slot = state.lowest_free(d.src, d.dst);
      if (!slot) {
        held.push_back(d);
        continue;
      }
      give(d, *slot);
      if (d.remaining > 0) parked[*slot].push_back(d);
    }
  }
  out.remainders.insert(out.remainders.end(), held.begin(), held.end());
  return out;
}

enum class Role { kSource, kDestination };

struct Violation {
  TimeslotIndex slot = 0;
  NodeId node;
  Role role = Role::kSource;

  std::string describe() const {
    return "slot " + std::to_string(slot) + " node " +
           std::to_string(node.value) +
           (role == Role::kSource ? " used twice as source"
                                  : " used twice as destination");
  }
};

inline std::optional<Violation> verify_admitted(const AdmittedBatch& batch) {
  std::set<std::pair<TimeslotIndex, std::uint32_t>> srcs;
  std::set<std::pair<TimeslotIndex, std::uint32_t>> dsts;
  for (const Edge& e : batch.edges) {
    const TimeslotIndex slot = batch.slot_of(e);
    if (!srcs.emplace(slot, e.src.value).second) {
      return Violation{slot, e.src, Role::kSource};
    }
    if (!dsts.emplace(slot, e.dst.value).second) {
      return Violation{slot, e.dst, Role::kDestination};
    }
  }
  return std::nullopt;
}

struct MaximalityWitness {
  Demand demand;
  unsigned offset = 0;
};

// Fails when some remainder could still have been placed in a slot where
// both of its endpoints are idle.
inline std::optional<MaximalityWitness> verify_maximal(
    const AdmittedBatch& batch, std::span<const Demand> remainders,
    unsigned batch_size) {
  OracleState state(batch_size);
  for (const Edge& e : batch.edges) state.take(e.offset, e.src, e.dst);
  for (const Demand& d : remainders) {
    if (d.remaining == 0) continue;
    if (const auto slot = state.lowest_free(d.src, d.dst)) {
      return MaximalityWitness{d, *slot};
    }
  }
  return std::nullopt;
}

struct OracleReplay {
  std::vector<AdmittedBatch> batches;
  std::vector<Demand> pending;
};

// Single-lane replay of a trace: every batch period, newly arrived demands
// join the carried-over remainders, the lot is stably ordered
// least-recently-served first (coarsened to num_priority_bins levels), and
// oracle_allocate runs on that order.
inline OracleReplay oracle_replay(std::span<const TraceRecord> trace,
                                  const Config& cfg,
                                  std::uint64_t max_batches = 1'000'000) {
  OracleReplay out;
  const std::int64_t batch_ns = cfg.batch_ns();
  const TimeslotIndex coarsest = cfg.num_priority_bins - 1;
  std::size_t next = 0;
  std::uint64_t next_id = 0;
  std::vector<Demand> pending;

  for (std::uint64_t b = 0; b < max_batches; ++b) {
    const std::int64_t horizon = static_cast<std::int64_t>(b + 1) * batch_ns;
    while (next < trace.size() && trace[next].arrival_ns < horizon) {
      const TraceRecord& r = trace[next++];
      if (classify(r, cfg.num_nodes) == IngestVerdict::kAccept) {
        pending.push_back(to_demand(r, next_id++));
      }
    }
    if (pending.empty() && next == trace.size()) break;

    const TimeslotIndex base = cfg.base_slot_of(b);
    auto staleness = [&](const Demand& d) {
      const TimeslotIndex gap = base > d.last_alloc ? base - d.last_alloc : 0;
      return std::min(gap, coarsest);
    };
    std::stable_sort(pending.begin(), pending.end(),
                     [&](const Demand& a, const Demand& c) {
                       return staleness(a) > staleness(c);
                     });
    OracleOutcome step =
        oracle_allocate(pending, cfg.batch_size, cfg.mode, base);
    out.batches.push_back(std::move(step.admitted));
    pending = std::move(step.remainders);
  }
  out.pending = std::move(pending);
  return out;
}

}  // namespace arbiter
