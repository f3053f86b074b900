#pragma once

// Parallel allocator: every lane allocates the same batch on private bitmaps,
// then a reconciler keeps one claim per (slot, node, role) and hands the
// revoked slots back to the lanes that granted them.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <deque>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "arbiter/conduit.hpp"
#include "arbiter/core_model.hpp"
#include "arbiter/greedy_allocator.hpp"
#include "arbiter/run_support.hpp"
#include "arbiter/workload.hpp"

namespace arbiter {

struct LaneAdmission {
  unsigned lane_id = 0;
  AdmittedBatch fragment;
  // grants[i] produced fragment.edges[i]. May be empty when the caller has
  // no demand bookkeeping (revocations then carry no demand ids).
  std::vector<Grant> grants;
};

// Slots taken back from one demand of one lane.
struct Revocation {
  unsigned lane_id = 0;
  std::uint64_t demand_id = 0;
  NodeId src;
  NodeId dst;
  std::uint32_t slots = 0;
  // What the demand's last_alloc becomes once the revoked slots are gone.
  TimeslotIndex restored_last_alloc = 0;
};

struct ReconcileResult {
  AdmittedBatch final;
  std::vector<Revocation> cancelled;

  std::uint64_t cancelled_slots() const {
    std::uint64_t total = 0;
    for (const Revocation& r : cancelled) total += r.slots;
    return total;
  }
};

// Walks lanes in id order and keeps an edge unless an already kept edge uses
// its source or destination in the same slot. Lowest lane wins; cancelled
// edges never block later ones.
inline ReconcileResult reconcile(std::span<const LaneAdmission> fragments) {
  ReconcileResult out;
  if (fragments.empty()) return out;
  out.final.base_slot = fragments.front().fragment.base_slot;
  for (const LaneAdmission& f : fragments) {
    if (f.fragment.base_slot != out.final.base_slot) {
      throw std::invalid_argument("reconcile: fragments target different batches");
    }
  }
  std::vector<const LaneAdmission*> order;
  std::uint32_t max_node = 0;
  for (const LaneAdmission& f : fragments) {
    order.push_back(&f);
    for (const Edge& e : f.fragment.edges) {
      max_node = std::max({max_node, e.src.value, e.dst.value});
    }
  }
  std::stable_sort(order.begin(), order.end(), [](const auto* a, const auto* b) {
    return a->lane_id < b->lane_id;
  });

  std::vector<std::uint64_t> src_used(std::size_t{max_node} + 1, 0);
  std::vector<std::uint64_t> dst_used(std::size_t{max_node} + 1, 0);
  std::vector<bool> clash;
  for (const LaneAdmission* f : order) {
    const auto& edges = f->fragment.edges;
    const bool tracked = f->grants.size() == edges.size();
    auto id_of = [&](std::size_t i) -> std::uint64_t {
      return tracked ? f->grants[i].demand_id : i;
    };
    clash.assign(edges.size(), false);
    std::vector<std::uint64_t> losers;
    for (std::size_t i = 0; i < edges.size(); ++i) {
      const Edge& e = edges[i];
      const std::uint64_t bit = std::uint64_t{1} << e.offset;
      if ((src_used[e.src.value] & bit) != 0 || (dst_used[e.dst.value] & bit) != 0) {
        clash[i] = true;
        losers.push_back(id_of(i));
        continue;
      }
      src_used[e.src.value] |= bit;
      dst_used[e.dst.value] |= bit;
      out.final.edges.push_back(e);
    }
    if (losers.empty()) continue;

    // Only demands that lost a slot need a tally, but it covers all of
    // their grants.
    struct Tally {
      std::uint32_t revoked = 0;
      std::int64_t max_kept = -1;
      std::int64_t min_offset = std::numeric_limits<std::int64_t>::max();
      TimeslotIndex prior = 0;
      NodeId src;
      NodeId dst;
    };
    std::unordered_map<std::uint64_t, Tally> tally;
    std::vector<std::uint64_t> tally_order;
    for (std::uint64_t id : losers) {
      if (tally.try_emplace(id).second) tally_order.push_back(id);
    }
    for (std::size_t i = 0; i < edges.size(); ++i) {
      const auto it = tally.find(id_of(i));
      if (it == tally.end()) continue;
      const Edge& e = edges[i];
      Tally& t = it->second;
      t.src = e.src;
      t.dst = e.dst;
      if (static_cast<std::int64_t>(e.offset) < t.min_offset) {
        t.min_offset = e.offset;
        t.prior = tracked ? f->grants[i].prior_last_alloc : 0;
      }
      if (clash[i]) {
        ++t.revoked;
      } else {
        t.max_kept = std::max<std::int64_t>(t.max_kept, e.offset);
      }
    }
    for (std::uint64_t id : tally_order) {
      const Tally& t = tally[id];
      const TimeslotIndex restored =
          t.max_kept >= 0 ? out.final.base_slot + t.max_kept : t.prior;
      out.cancelled.push_back(
          Revocation{f->lane_id, id, t.src, t.dst, t.revoked, restored});
    }
  }
  return out;
}

// One allocation lane with its carried-over remainders.
class ParallelLane {
 public:
  ParallelLane(const Config& cfg, unsigned id)
      : id_(id),
        num_bins_(cfg.num_priority_bins),
        kernel_(cfg.num_nodes, cfg.batch_size, cfg.num_priority_bins, cfg.mode,
                std::numeric_limits<std::size_t>::max()),
        inbox_(cfg.mailbox_depth) {
    kernel_.record_grants(true);
    counters_.name = "lane" + std::to_string(id);
  }

  unsigned id() const { return id_; }
  SpscRing<Demand>& inbox() { return inbox_; }

  // Remainders first, then new arrivals.
  void begin_batch(TimeslotIndex base_slot) {
    kernel_.reset(base_slot);
    for (const Demand& d : pending_) accept(d);
    pending_.clear();
    pull();
  }

  bool pull() {
    bool any = false;
    Demand d;
    while (inbox_.try_pop(d)) {
      accept(d);
      any = true;
    }
    return any;
  }

  void allocate() {
    const AllocationStats before = kernel_.stats();
    kernel_.allocate(AllowedMask::all(num_bins_), pending_);
    counters_.drained += kernel_.stats().drained - before.drained;
    counters_.allocated_slots +=
        kernel_.stats().allocated_slots - before.allocated_slots;
  }

  // Allocates what is queued and hands over this lane's fragment.
  const LaneAdmission& finish() {
    allocate();
    kernel_.flush(pending_);
    admission_.lane_id = id_;
    admission_.grants = kernel_.grants();
    admission_.fragment = kernel_.take_admitted();
    return admission_;
  }
  const LaneAdmission& admission() const { return admission_; }

  // Gives revoked slots back to their demands.
  void restore(std::span<const Revocation> revs) {
    std::unordered_map<std::uint64_t, const Revocation*> mine;
    for (const Revocation& r : revs) {
      if (r.lane_id == id_) mine.emplace(r.demand_id, &r);
    }
    if (mine.empty()) return;
    for (Demand& d : pending_) {
      const auto it = mine.find(d.id);
      if (it == mine.end()) continue;
      d.remaining += it->second->slots;
      d.last_alloc = it->second->restored_last_alloc;
      mine.erase(it);
    }
    for (const Revocation& r : revs) {
      if (r.lane_id == id_ && mine.contains(r.demand_id)) {
        pending_.push_back(
            Demand{r.src, r.dst, r.slots, r.restored_last_alloc, r.demand_id});
      }
    }
  }

  // Slots owed by this lane, counting grants not yet reconciled as owed.
  std::uint64_t pending_slots(bool include_unreconciled) const {
    std::uint64_t total = kernel_.pending_slots();
    for (const Demand& d : pending_) total += d.remaining;
    inbox_.for_each_quiescent([&](const Demand& d) { total += d.remaining; });
    if (include_unreconciled) total += kernel_.admitted().edges.size();
    return total;
  }

  const LaneCounters& counters() const { return counters_; }

 private:
  void accept(const Demand& d) {
    kernel_.accept(d);
    ++counters_.received;
  }

  unsigned id_;
  unsigned num_bins_;
  GreedyAllocator kernel_;
  SpscRing<Demand> inbox_;
  std::vector<Demand> pending_;
  LaneAdmission admission_;
  LaneCounters counters_;
};

namespace detail {

inline std::vector<LaneCounters> lane_counters(
    const std::vector<std::unique_ptr<ParallelLane>>& lanes) {
  std::vector<LaneCounters> out;
  for (const auto& l : lanes) out.push_back(l->counters());
  return out;
}

inline RunResult run_parallel_deterministic(const Config& cfg,
                                            const Workload& workload,
                                            const RunOptions& opts) {
  const unsigned n = cfg.parallel_lanes;
  std::vector<std::unique_ptr<ParallelLane>> lanes;
  for (unsigned l = 0; l < n; ++l) {
    lanes.push_back(std::make_unique<ParallelLane>(cfg, l));
  }
  SharedCounters counters;
  Emitter emitter(opts, counters);
  Ingestor ingestor(cfg.num_nodes, 0, counters);
  DemandStream stream = workload.stream(0, 1, cfg.num_nodes);
  const std::int64_t batch_ns = cfg.batch_ns();
  std::uint64_t reissued = 0;

  std::deque<Demand> staging;
  std::optional<TraceRecord> next = stream.next();
  std::size_t turn = 0;
  std::uint64_t batch = 0;
  std::uint64_t idle = 0;
  std::int64_t window_ns = 0;
  std::vector<LaneAdmission> fragments(n);
  while (true) {
    const std::int64_t horizon = static_cast<std::int64_t>(batch + 1) * batch_ns;
    while (next && next->arrival_ns < horizon) {
      Demand d;
      if (ingestor.admit(*next, d)) staging.push_back(d);
      next = stream.next();
    }
    while (!staging.empty() &&
           lanes[turn]->inbox().try_push(staging.front())) {
      ingestor.count(staging.front());
      staging.pop_front();
      turn = (turn + 1) % n;
    }
    if (!staging.empty()) counters.overflows.fetch_add(1);

    const bool source_done = !next && staging.empty();
    if (source_done && counters.in_window.load()) {
      counters.in_window.store(false);
      window_ns = horizon;
    }
    if (source_done &&
        counters.allocated_slots.load() == counters.demanded_slots.load()) {
      break;
    }
    if (source_done && ++idle > opts.max_drain_batches) break;

    for (unsigned l = 0; l < n; ++l) {
      lanes[l]->begin_batch(cfg.base_slot_of(batch));
      fragments[l] = lanes[l]->finish();
    }
    ReconcileResult rr = reconcile(fragments);
    reissued += rr.cancelled_slots();
    for (auto& lane : lanes) lane->restore(rr.cancelled);
    emitter.emit(std::move(rr.final));
    ++batch;
  }

  std::uint64_t pending = 0;
  for (const auto& l : lanes) pending += l->pending_slots(false);
  RunResult result;
  const auto sim = static_cast<std::int64_t>(batch) * batch_ns;
  fill_common_metrics(result.metrics, counters, cfg, pending, sim,
                      window_ns > 0 ? window_ns : sim, emitter.batches());
  result.metrics.cancelled_then_reissued = reissued;
  result.metrics.lanes = lane_counters(lanes);
  result.batches = emitter.take_kept();
  return result;
}

inline RunResult run_parallel_paced(const Config& cfg, const Workload& workload,
                                    const RunOptions& opts) {
  const unsigned n = cfg.parallel_lanes;
  std::vector<std::unique_ptr<ParallelLane>> lanes;
  for (unsigned l = 0; l < n; ++l) {
    lanes.push_back(std::make_unique<ParallelLane>(cfg, l));
  }
  SharedCounters counters;
  Emitter emitter(opts, counters);
  PacedClock clock;
  std::atomic<bool> stop{false};
  const std::int64_t batch_ns = cfg.batch_ns();
  const auto window_ns = static_cast<std::int64_t>(opts.duration_s * 1e9);

  // go[l]: reconciler -> lane, carries the revocations and starts a batch.
  // done[l]: lane -> reconciler, carries the lane's fragment.
  std::vector<Mailbox<const std::vector<Revocation>>> go(n);
  std::vector<Mailbox<const LaneAdmission>> done(n);
  std::vector<Revocation> revocations;
  std::uint64_t reissued = 0;
  std::uint64_t reconciled_batches = 0;

  auto lane_loop = [&](unsigned l) {
    ParallelLane& lane = *lanes[l];
    Backoff backoff;
    for (std::uint64_t batch = 0;; ++batch) {
      const std::vector<Revocation>* revs = nullptr;
      while ((revs = go[l].try_take()) == nullptr) {
        if (stop.load(std::memory_order_acquire)) return;
        backoff.pause();
      }
      backoff.reset();
      lane.restore(*revs);
      lane.begin_batch(cfg.base_slot_of(batch));
      const std::int64_t deadline =
          static_cast<std::int64_t>(batch + 1) * batch_ns;
      while (clock.now_ns() < deadline &&
             !stop.load(std::memory_order_acquire)) {
        if (lane.pull()) {
          lane.allocate();
          backoff.reset();
        } else {
          backoff.pause();
        }
      }
      done[l].put(&lane.finish());
    }
  };

  std::vector<LaneAdmission> fragments(n);
  auto reconcile_ready = [&](bool apply_directly) {
    std::size_t ready = 0;
    for (unsigned l = 0; l < n; ++l) ready += done[l].full() ? 1 : 0;
    if (ready == 0 || (!apply_directly && ready < n)) return false;
    std::vector<LaneAdmission> present;
    for (unsigned l = 0; l < n; ++l) {
      if (const LaneAdmission* f = done[l].try_take()) present.push_back(*f);
    }
    ReconcileResult rr = reconcile(present);
    reissued += rr.cancelled_slots();
    revocations = std::move(rr.cancelled);
    emitter.emit(std::move(rr.final));
    ++reconciled_batches;
    if (apply_directly) {
      for (auto& lane : lanes) lane->restore(revocations);
    } else {
      for (unsigned l = 0; l < n; ++l) go[l].put(&revocations);
    }
    return true;
  };

  counters.feeders_running.store(1);
  std::vector<SpscRing<Demand>*> inboxes;
  for (auto& l : lanes) inboxes.push_back(&l->inbox());
  std::vector<std::thread> threads;
  threads.emplace_back(run_feeder, workload.stream(0, 1, cfg.num_nodes),
                       inboxes, Ingestor(cfg.num_nodes, 0, counters),
                       std::cref(clock), window_ns, std::cref(stop),
                       std::ref(counters));
  for (unsigned l = 0; l < n; ++l) go[l].put(&revocations);
  for (unsigned l = 0; l < n; ++l) threads.emplace_back(lane_loop, l);

  const std::int64_t window_end = supervise_paced(
      opts, clock, counters, stop, [&] { return reconcile_ready(false); });
  for (auto& t : threads) t.join();
  const std::int64_t wall = clock.now_ns();

  // Shutdown: revocations a lane never picked up, then any fragments that
  // were delivered but not reconciled.
  for (unsigned l = 0; l < n; ++l) {
    if (const auto* revs = go[l].try_take()) lanes[l]->restore(*revs);
  }
  reconcile_ready(true);

  std::uint64_t pending = 0;
  for (const auto& l : lanes) pending += l->pending_slots(true);
  RunResult result;
  fill_common_metrics(result.metrics, counters, cfg, pending, wall, window_end,
                      emitter.batches());
  result.metrics.cancelled_then_reissued = reissued;
  result.metrics.lanes = lane_counters(lanes);
  result.batches = emitter.take_kept();
  return result;
}

}  // namespace detail

inline RunResult run_parallel(const Config& cfg, const Workload& workload,
                              const RunOptions& opts = {}) {
  cfg.validate();
  return opts.paced ? detail::run_parallel_paced(cfg, workload, opts)
                    : detail::run_parallel_deterministic(cfg, workload, opts);
}

}  // namespace arbiter
