#pragma once

// Plumbing shared by the architecture drivers: run options, the ordered
// batch emitter with its conservation counters, the wall clock used by
// paced runs, and the feeder lane that injects demands at their arrival
// times.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <thread>
#include <vector>

#include "arbiter/conduit.hpp"
#include "arbiter/core_model.hpp"
#include "arbiter/workload.hpp"

namespace arbiter {

using BatchSink = std::function<void(const AdmittedBatch&)>;

struct RunOptions {
  // Paced runs tie batch boundaries to the wall clock and give each lane its
  // own thread. Deterministic runs step every lane on the calling thread.
  bool paced = false;
  double duration_s = 5.0;
  double drain_timeout_s = 5.0;
  // Deterministic runs: extra batches allowed after the trace is exhausted.
  std::uint64_t max_drain_batches = 1'000'000;
  // Receives every admitted batch in increasing base-slot order.
  BatchSink sink;
  bool keep_batches = false;
};

struct RunResult {
  Metrics metrics;
  std::vector<AdmittedBatch> batches;
};

class PacedClock {
 public:
  PacedClock() : start_(std::chrono::steady_clock::now()) {}
  std::int64_t now_ns() const {
    return std::chrono::duration_cast<std::chrono::nanoseconds>(
               std::chrono::steady_clock::now() - start_)
        .count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

// Counters touched by feeder and emitter lanes concurrently.
struct SharedCounters {
  std::atomic<std::uint64_t> demanded_slots{0};
  std::atomic<std::uint64_t> allocated_slots{0};
  std::atomic<std::uint64_t> ingested{0};
  std::atomic<std::uint64_t> rejected{0};
  std::atomic<std::uint64_t> overflows{0};
  std::atomic<std::uint64_t> max_gap{0};
  std::atomic<std::int64_t> max_ingest_lag_ns{0};
  std::atomic<bool> in_window{true};
  std::atomic<unsigned> feeders_running{0};
};

// Hands admitted batches to the sink. Callers guarantee emissions are
// serialized and in slot order; gap samples are only taken while the load
// window is open.
class Emitter {
 public:
  Emitter(const RunOptions& opts, SharedCounters& counters)
      : opts_(opts), counters_(counters) {}

  void emit(AdmittedBatch&& batch) {
    const std::uint64_t allocated =
        counters_.allocated_slots.fetch_add(batch.edges.size(),
                                            std::memory_order_acq_rel) +
        batch.edges.size();
    if (counters_.in_window.load(std::memory_order_relaxed)) {
      const std::uint64_t demanded =
          counters_.demanded_slots.load(std::memory_order_acquire);
      const std::uint64_t gap = demanded > allocated ? demanded - allocated : 0;
      if (gap > counters_.max_gap.load(std::memory_order_relaxed)) {
        counters_.max_gap.store(gap, std::memory_order_relaxed);
      }
    }
    ++batches_;
    if (opts_.sink) opts_.sink(batch);
    if (opts_.keep_batches) kept_.push_back(std::move(batch));
  }

  std::uint64_t batches() const { return batches_; }
  std::vector<AdmittedBatch> take_kept() { return std::move(kept_); }

 private:
  const RunOptions& opts_;
  SharedCounters& counters_;
  std::uint64_t batches_ = 0;
  std::vector<AdmittedBatch> kept_;
};

// Assigns ids and tallies accepted and rejected records.
class Ingestor {
 public:
  Ingestor(std::uint32_t num_nodes, std::uint64_t id_base,
           SharedCounters& counters)
      : num_nodes_(num_nodes), next_id_(id_base), counters_(counters) {}

  // Returns true and fills `out` when the record becomes a live demand.
  bool admit(const TraceRecord& r, Demand& out) {
    switch (classify(r, num_nodes_)) {
      case IngestVerdict::kRejectMalformed:
        counters_.rejected.fetch_add(1, std::memory_order_relaxed);
        return false;
      case IngestVerdict::kDropEmpty:
        return false;
      case IngestVerdict::kAccept:
        out = to_demand(r, next_id_++);
        return true;
    }
    return false;
  }

  // Called once the demand is inside the system.
  void count(const Demand& d) {
    counters_.demanded_slots.fetch_add(d.remaining, std::memory_order_acq_rel);
    counters_.ingested.fetch_add(1, std::memory_order_relaxed);
  }
  // How late a demand entered relative to its arrival time.
  void note_lag(std::int64_t lag_ns) {
    if (lag_ns > counters_.max_ingest_lag_ns.load(std::memory_order_relaxed) &&
        counters_.in_window.load(std::memory_order_relaxed)) {
      counters_.max_ingest_lag_ns.store(lag_ns, std::memory_order_relaxed);
    }
  }
  void uncount(const Demand& d) {
    counters_.demanded_slots.fetch_sub(d.remaining, std::memory_order_acq_rel);
    counters_.ingested.fetch_sub(1, std::memory_order_relaxed);
  }

 private:
  std::uint32_t num_nodes_;
  std::uint64_t next_id_;
  SharedCounters& counters_;
};

// Paced ingestion lane: releases each record of `stream` at its arrival time,
// dealing demands round-robin over `outs`. A full conduit counts one overflow
// per blocked demand; the demand is retried, never dropped. The lane stays up
// until the window closes, even after the stream runs dry; records still
// unfed at that point are never offered.
inline void run_feeder(DemandStream stream, std::vector<SpscRing<Demand>*> outs,
                       Ingestor ingestor, const PacedClock& clock,
                       std::int64_t window_ns, const std::atomic<bool>& stop,
                       SharedCounters& counters) {
  Backoff backoff;
  std::size_t turn = 0;
  while (!stop.load(std::memory_order_relaxed)) {
    auto rec = stream.next();
    if (clock.now_ns() >= window_ns) break;
    const std::int64_t release = rec ? std::min(rec->arrival_ns, window_ns)
                                     : window_ns;
    while (clock.now_ns() < release) {
      if (stop.load(std::memory_order_relaxed)) break;
      if (release - clock.now_ns() > 200'000) {
        std::this_thread::sleep_for(std::chrono::microseconds(50));
      } else {
        std::this_thread::yield();
      }
    }
    if (!rec || rec->arrival_ns >= window_ns) break;
    Demand d;
    if (!ingestor.admit(*rec, d)) continue;
    SpscRing<Demand>& out = *outs[turn];
    turn = (turn + 1) % outs.size();
    ingestor.count(d);
    bool blocked = false;
    bool pushed = true;
    backoff.reset();
    while (!out.try_push(d)) {
      if (!blocked) {
        counters.overflows.fetch_add(1, std::memory_order_relaxed);
        blocked = true;
      }
      if (stop.load(std::memory_order_relaxed)) {
        ingestor.uncount(d);
        pushed = false;
        break;
      }
      backoff.pause();
    }
    if (pushed) ingestor.note_lag(clock.now_ns() - rec->arrival_ns);
  }
  counters.feeders_running.fetch_sub(1, std::memory_order_acq_rel);
}

// Main-thread supervision of a paced run: waits out the load window, then
// the drain, then raises `stop`. `poll` runs on every iteration (the shuffle
// collector uses it) and returns whether it made progress.
template <typename Poll>
std::int64_t supervise_paced(const RunOptions& opts, const PacedClock& clock,
                             SharedCounters& counters,
                             std::atomic<bool>& stop, Poll&& poll) {
  const auto window_ns = static_cast<std::int64_t>(opts.duration_s * 1e9);
  const auto drain_ns = static_cast<std::int64_t>(opts.drain_timeout_s * 1e9);
  Backoff backoff;
  std::int64_t window_end = -1;
  while (true) {
    const bool progressed = poll();
    const std::int64_t now = clock.now_ns();
    if (window_end < 0 &&
        (now >= window_ns ||
         counters.feeders_running.load(std::memory_order_acquire) == 0)) {
      window_end = now;
      counters.in_window.store(false, std::memory_order_relaxed);
    }
    if (window_end >= 0 &&
        counters.feeders_running.load(std::memory_order_acquire) == 0) {
      const bool drained =
          counters.allocated_slots.load(std::memory_order_acquire) >=
          counters.demanded_slots.load(std::memory_order_acquire);
      if (drained || now - window_end >= drain_ns) break;
    }
    if (progressed) {
      backoff.reset();
    } else {
      backoff.pause();
    }
  }
  stop.store(true, std::memory_order_release);
  return window_end;
}

inline void fill_common_metrics(Metrics& m, const SharedCounters& c,
                                const Config& cfg, std::uint64_t pending,
                                std::int64_t wall_ns, std::int64_t window_ns,
                                std::uint64_t batches) {
  m.demanded_slots = c.demanded_slots.load();
  m.allocated_slots = c.allocated_slots.load();
  m.pending_slots = pending;
  m.demands_ingested = c.ingested.load();
  m.demands_rejected = c.rejected.load();
  m.conduit_overflows = c.overflows.load();
  m.overload = m.conduit_overflows > 0;
  m.max_gap = c.max_gap.load();
  m.max_ingest_lag_ns = c.max_ingest_lag_ns.load();
  m.batches_emitted = batches;
  m.wall_elapsed_ns = wall_ns > 0 ? wall_ns : 1;
  m.window_ns = window_ns;
  m.throughput_bps =
      throughput_bps(m.allocated_slots, cfg.mtu_bytes, m.wall_elapsed_ns);
}

}  // namespace arbiter
