#pragma once

// Single-lane allocation kernel: coarse LRU priority bins gated by an
// allowed-mask, greedy matching on availability bitmaps, and the per-slot and
// batch-processing allocation modes.

#include <algorithm>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <optional>
#include <span>
#include <vector>

#include "arbiter/core_model.hpp"

namespace arbiter {

// Lowest offset free in both rows, via AND + find-first-set.
inline std::optional<unsigned> first_free_slot(std::uint64_t src_row,
                                               std::uint64_t dst_row) {
  const std::uint64_t both = src_row & dst_row;
  if (both == 0) return std::nullopt;
  return static_cast<unsigned>(std::countr_zero(both));
}

// Larger gaps since the last allocation map to lower-numbered (higher
// priority) bins: bin = (num_bins - 1) - min(gap, num_bins - 1). A
// last_alloc in the future saturates to gap 0.
inline unsigned bin_index(TimeslotIndex last_alloc, TimeslotIndex current,
                          unsigned num_bins = 32) {
  const TimeslotIndex gap = current > last_alloc ? current - last_alloc : 0;
  const TimeslotIndex top = num_bins - 1;
  return static_cast<unsigned>(top - std::min(gap, top));
}

class AllowedMask {
 public:
  constexpr AllowedMask() = default;
  constexpr explicit AllowedMask(std::uint64_t bits) : bits_(bits) {}

  static constexpr AllowedMask top_only() { return AllowedMask(1); }
  static AllowedMask all(unsigned num_bins) {
    return AllowedMask(low_bits(num_bins));
  }

  constexpr bool allows(unsigned bin) const { return (bits_ >> bin) & 1U; }
  constexpr bool includes(AllowedMask other) const {
    return (other.bits_ & ~bits_) == 0;
  }
  constexpr std::uint64_t bits() const { return bits_; }

  friend constexpr bool operator==(AllowedMask, AllowedMask) = default;

 private:
  std::uint64_t bits_ = 1;
};

// Linear relaxation over a context's tenure: bins 0..=floor(steps *
// num_bins / tenure) are enabled. A zero-length tenure enables everything.
inline AllowedMask relax_mask(std::uint64_t steps_elapsed,
                              std::uint64_t tenure_steps,
                              unsigned num_bins = 32) {
  if (tenure_steps == 0 || steps_elapsed >= tenure_steps) {
    return AllowedMask::all(num_bins);
  }
  const std::uint64_t highest = std::min<std::uint64_t>(
      steps_elapsed * num_bins / tenure_steps, num_bins - 1);
  return AllowedMask(low_bits(static_cast<unsigned>(highest) + 1));
}

class PriorityBins {
 public:
  static constexpr std::size_t kDefaultCapacity = std::size_t{1} << 22;

  PriorityBins(unsigned num_bins, unsigned batch_size,
               std::size_t capacity = kDefaultCapacity)
      : coarse_(num_bins), extra_(batch_size), capacity_(capacity) {}

  unsigned num_bins() const { return static_cast<unsigned>(coarse_.size()); }
  unsigned num_extra() const { return static_cast<unsigned>(extra_.size()); }
  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return size_; }
  bool empty() const { return size_ == 0; }
  bool full() const { return size_ >= capacity_; }

  bool push(unsigned bin, const Demand& d) {
    if (full()) return false;
    coarse_[bin].push_back(d);
    ++size_;
    return true;
  }
  void push_extra(unsigned offset, const Demand& d) {
    extra_[offset].push_back(d);
    ++size_;
  }

  bool pop(unsigned bin, Demand& out) { return pop_from(coarse_[bin], out); }
  bool pop_extra(unsigned offset, Demand& out) {
    return pop_from(extra_[offset], out);
  }

  const std::deque<Demand>& coarse(unsigned bin) const { return coarse_[bin]; }
  const std::deque<Demand>& extra(unsigned offset) const {
    return extra_[offset];
  }

  // Moves every queued demand to `out`: coarse bins in priority order, then
  // extra bins in offset order.
  void drain_all(std::vector<Demand>& out) {
    for (auto* group : {&coarse_, &extra_}) {
      for (auto& q : *group) {
        out.insert(out.end(), q.begin(), q.end());
        q.clear();
      }
    }
    size_ = 0;
  }

  std::uint64_t pending_slots() const {
    std::uint64_t total = 0;
    for (const auto* group : {&coarse_, &extra_}) {
      for (const auto& q : *group) {
        for (const Demand& d : q) total += d.remaining;
      }
    }
    return total;
  }

 private:
  bool pop_from(std::deque<Demand>& q, Demand& out) {
    if (q.empty()) return false;
    out = q.front();
    q.pop_front();
    --size_;
    return true;
  }

  std::vector<std::deque<Demand>> coarse_;
  std::vector<std::deque<Demand>> extra_;
  std::size_t capacity_;
  std::size_t size_ = 0;
};

// Appends each demand to its LRU bin in input order. Stops at the first
// demand that does not fit and returns how many were accepted; the rest stay
// with the caller.
inline std::size_t sort_into_bins(std::span<const Demand> demands,
                                  TimeslotIndex current, PriorityBins& bins) {
  std::size_t accepted = 0;
  for (const Demand& d : demands) {
    if (!bins.push(bin_index(d.last_alloc, current, bins.num_bins()), d)) break;
    ++accepted;
  }
  return accepted;
}

// One slot handed to one demand; kept so a reconciler can roll it back.
struct Grant {
  std::uint64_t demand_id = 0;
  NodeId src;
  NodeId dst;
  std::uint32_t offset = 0;
  // The demand's last_alloc just before this grant.
  TimeslotIndex prior_last_alloc = 0;
};

struct AllocationStats {
  std::uint64_t drained = 0;
  std::uint64_t allocated_slots = 0;
};

struct DrainOutputs {
  AdmittedBatch* admitted = nullptr;
  std::vector<Demand>* remainders = nullptr;
  // Per-slot mode: demands that received a slot here but cannot get another.
  // They belong to this lane until its tenure ends. Null routes them to
  // `remainders`.
  std::vector<Demand>* held = nullptr;
  std::vector<Grant>* grants = nullptr;
  AllocationStats* stats = nullptr;
};

namespace detail {

inline std::optional<unsigned> grant_one(Demand& d, AvailabilityBitmap& bm,
                                         TimeslotIndex base_slot,
                                         const DrainOutputs& out) {
  const auto offset =
      first_free_slot(bm.source_row(d.src), bm.destination_row(d.dst));
  if (!offset) return std::nullopt;
  bm.claim(d.src, d.dst, *offset);
  out.admitted->edges.push_back(Edge{*offset, d.src, d.dst});
  if (out.grants != nullptr) {
    out.grants->push_back(Grant{d.id, d.src, d.dst, *offset, d.last_alloc});
  }
  --d.remaining;
  d.last_alloc = base_slot + *offset;
  if (out.stats != nullptr) ++out.stats->allocated_slots;
  return offset;
}

}  // namespace detail

// Drains the bins enabled by `mask` (plus, in per-slot mode, the extra bins)
// and allocates greedily against `bitmaps`.
//
// Batch processing: each drained demand takes as many free slots as it can
// (at most batch_size) in one go; whatever is left, including demands that
// got nothing, goes to `remainders` in drain order.
//
// Per slot: each drained demand takes one slot and, if it still has demand,
// is parked in the extra bin for that offset. Extra bins are then drained in
// offset order, so a demand keeps collecting later slots. Demands that got
// nothing from a coarse bin go to `remainders`; partially served ones that
// run out of room go to `held`.
inline void allocate_into(PriorityBins& bins, AllowedMask mask,
                          AvailabilityBitmap& bitmaps, AllocationMode mode,
                          TimeslotIndex base_slot, const DrainOutputs& out) {
  std::vector<Demand>& held = out.held != nullptr ? *out.held : *out.remainders;
  AllocationStats scratch;
  AllocationStats& stats = out.stats != nullptr ? *out.stats : scratch;
  DrainOutputs o = out;
  o.stats = &stats;

  Demand d;
  for (unsigned bin = 0; bin < bins.num_bins(); ++bin) {
    if (!mask.allows(bin)) continue;
    while (bins.pop(bin, d)) {
      ++stats.drained;
      if (mode == AllocationMode::kBatchProcessing) {
        while (d.remaining > 0 &&
               detail::grant_one(d, bitmaps, base_slot, o).has_value()) {
        }
        if (d.remaining > 0) out.remainders->push_back(d);
      } else {
        const auto offset = detail::grant_one(d, bitmaps, base_slot, o);
        if (!offset) {
          out.remainders->push_back(d);
        } else if (d.remaining > 0) {
          bins.push_extra(*offset, d);
        }
      }
    }
  }
  if (mode != AllocationMode::kPerSlot) return;
  // A demand popped from extra bin j can only land on an offset above j, so
  // one ascending sweep empties every extra bin.
  for (unsigned j = 0; j < bins.num_extra(); ++j) {
    while (bins.pop_extra(j, d)) {
      ++stats.drained;
      const auto offset = detail::grant_one(d, bitmaps, base_slot, o);
      if (!offset) {
        held.push_back(d);
      } else if (d.remaining > 0) {
        bins.push_extra(*offset, d);
      }
    }
  }
}

struct BatchOutcome {
  AdmittedBatch admitted;
  std::vector<Demand> remainders;
};

inline BatchOutcome allocate_batch(PriorityBins& bins, AllowedMask mask,
                                   AvailabilityBitmap& bitmaps,
                                   AllocationMode mode,
                                   TimeslotIndex base_slot) {
  BatchOutcome result;
  result.admitted.base_slot = base_slot;
  std::vector<Demand> held;
  allocate_into(bins, mask, bitmaps, mode, base_slot,
                DrainOutputs{&result.admitted, &result.remainders, &held});
  result.remainders.insert(result.remainders.end(), held.begin(), held.end());
  return result;
}

// A kernel instance bound to one batch at a time. Owns its bins, bitmaps,
// and the admitted edges accumulated for the current batch.
class GreedyAllocator {
 public:
  GreedyAllocator(std::uint32_t num_nodes, unsigned batch_size,
                  unsigned num_bins, AllocationMode mode,
                  std::size_t bins_capacity = PriorityBins::kDefaultCapacity)
      : mode_(mode),
        bins_(num_bins, batch_size, bins_capacity),
        bitmaps_(num_nodes, batch_size) {}

  AllocationMode mode() const { return mode_; }
  unsigned batch_size() const { return bitmaps_.batch_size(); }
  unsigned num_bins() const { return bins_.num_bins(); }
  TimeslotIndex base_slot() const { return admitted_.base_slot; }

  // Starts a new batch with fresh bitmaps. Queued demands stay queued; call
  // flush() first when they must not carry over.
  void reset(TimeslotIndex base_slot) {
    bitmaps_.reset();
    admitted_.base_slot = base_slot;
    admitted_.edges.clear();
    grants_.clear();
  }

  bool accept(const Demand& d) {
    return bins_.push(bin_index(d.last_alloc, base_slot(), num_bins()), d);
  }

  void allocate(AllowedMask mask, std::vector<Demand>& remainders) {
    allocate_into(bins_, mask, bitmaps_, mode_, base_slot(),
                  DrainOutputs{&admitted_, &remainders, &held_,
                               record_grants_ ? &grants_ : nullptr, &stats_});
  }

  // Releases held demands first, then anything still binned.
  void flush(std::vector<Demand>& out) {
    out.insert(out.end(), held_.begin(), held_.end());
    held_.clear();
    bins_.drain_all(out);
  }

  const AdmittedBatch& admitted() const { return admitted_; }
  AdmittedBatch take_admitted() {
    AdmittedBatch out{admitted_.base_slot, std::move(admitted_.edges)};
    admitted_.edges.clear();
    return out;
  }

  void record_grants(bool on) { record_grants_ = on; }
  const std::vector<Grant>& grants() const { return grants_; }

  const AvailabilityBitmap& bitmaps() const { return bitmaps_; }
  const PriorityBins& bins() const { return bins_; }
  const AllocationStats& stats() const { return stats_; }
  std::size_t queued() const { return bins_.size() + held_.size(); }
  bool bins_full() const { return bins_.full(); }

  std::uint64_t pending_slots() const {
    std::uint64_t total = bins_.pending_slots();
    for (const Demand& d : held_) total += d.remaining;
    return total;
  }

 private:
  AllocationMode mode_;
  PriorityBins bins_;
  AvailabilityBitmap bitmaps_;
  AdmittedBatch admitted_;
  std::vector<Demand> held_;
  std::vector<Grant> grants_;
  bool record_grants_ = false;
  AllocationStats stats_;
};

}  // namespace arbiter
