#pragma once

// Pipelined allocator: a ring of contexts, each owning one batch of slots.
// The head reads new demands from QHead, allocates, and forwards what it
// could not place to the context holding the next batch. When the head's
// tenure ends it emits its batch and re-seeds itself behind the tail.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <deque>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "arbiter/conduit.hpp"
#include "arbiter/core_model.hpp"
#include "arbiter/greedy_allocator.hpp"
#include "arbiter/run_support.hpp"
#include "arbiter/workload.hpp"

namespace arbiter {

// A remainder in transit, tagged with the earliest batch allowed to take it,
// so a demand never lands in a batch before the one after where it was
// refused.
struct Forwarded {
  Demand demand;
  std::uint64_t target_batch = 0;
};

class PipelineContext {
 public:
  PipelineContext(const Config& cfg, unsigned index)
      : index_(index),
        num_bins_(cfg.num_priority_bins),
        kernel_(cfg.num_nodes, cfg.batch_size, cfg.num_priority_bins, cfg.mode,
                std::numeric_limits<std::size_t>::max()) {
    counters_.name = "ctx" + std::to_string(index);
    counters_.drained_by_position.assign(cfg.pipeline_cores, 0);
  }

  unsigned index() const { return index_; }
  std::uint64_t batch() const { return batch_; }
  TimeslotIndex base_slot() const { return kernel_.base_slot(); }

  void seed(std::uint64_t batch, TimeslotIndex base_slot) {
    batch_ = batch;
    kernel_.reset(base_slot);
    dirty_ = true;
  }

  void accept(const Demand& d) {
    kernel_.accept(d);
    ++counters_.received;
    dirty_ = true;
  }

  // Takes every message at the front of `inbox` aimed at this batch or an
  // earlier one.
  bool pull(SpscRing<Forwarded>& inbox) {
    bool any = false;
    while (const Forwarded* f = inbox.front()) {
      if (f->target_batch > batch_) break;
      accept(f->demand);
      inbox.pop();
      any = true;
    }
    return any;
  }

  bool ingest(SpscRing<Demand>& qhead) {
    bool any = false;
    Demand d;
    while (qhead.try_pop(d)) {
      accept(d);
      any = true;
    }
    return any;
  }

  // Allocates from the bins `mask` allows; unplaced demands are queued for
  // the successor.
  void step(AllowedMask mask, unsigned position) {
    if (!dirty_ && mask == last_mask_) return;
    run_kernel(mask, position);
  }

  // Ends head tenure: allocates everything, releases held demands, and
  // returns the finished batch.
  AdmittedBatch finish() {
    run_kernel(AllowedMask::all(num_bins_), 0);
    scratch_.clear();
    kernel_.flush(scratch_);
    stash(scratch_);
    return kernel_.take_admitted();
  }

  // Current partial batch, for shutdown.
  AdmittedBatch take_partial() { return kernel_.take_admitted(); }

  // Moves stashed remainders into `out` while it has room.
  bool forward(SpscRing<Forwarded>& out) {
    bool any = false;
    while (!stash_.empty() && out.try_push(stash_.front())) {
      stash_.pop_front();
      any = true;
    }
    return any;
  }
  bool has_stash() const { return !stash_.empty(); }

  std::uint64_t pending_slots() const {
    std::uint64_t total = kernel_.pending_slots();
    for (const Forwarded& f : stash_) total += f.demand.remaining;
    return total;
  }

  const LaneCounters& counters() const { return counters_; }

 private:
  void run_kernel(AllowedMask mask, unsigned position) {
    scratch_.clear();
    const AllocationStats before = kernel_.stats();
    kernel_.allocate(mask, scratch_);
    const AllocationStats& after = kernel_.stats();
    counters_.drained += after.drained - before.drained;
    counters_.allocated_slots += after.allocated_slots - before.allocated_slots;
    if (position < counters_.drained_by_position.size()) {
      counters_.drained_by_position[position] += after.drained - before.drained;
    }
    stash(scratch_);
    dirty_ = false;
    last_mask_ = mask;
  }

  void stash(const std::vector<Demand>& out) {
    for (const Demand& d : out) stash_.push_back(Forwarded{d, batch_ + 1});
    counters_.forwarded += out.size();
  }

  unsigned index_;
  unsigned num_bins_;
  std::uint64_t batch_ = 0;
  GreedyAllocator kernel_;
  std::deque<Forwarded> stash_;
  std::vector<Demand> scratch_;
  AllowedMask last_mask_;
  bool dirty_ = true;
  LaneCounters counters_;
};

// The ring plus its conduits. links[c] carries remainders from context c to
// context (c + 1) % P.
class Pipeline {
 public:
  explicit Pipeline(const Config& cfg)
      : cfg_(cfg),
        cores_(cfg.pipeline_cores),
        ingest_position_(cfg.mid_pipeline_ingestion ? cfg.pipeline_cores / 2
                                                    : 0),
        qhead_(cfg.qhead_depth) {
    cfg.validate();
    for (unsigned c = 0; c < cores_; ++c) {
      contexts_.push_back(std::make_unique<PipelineContext>(cfg, c));
      links_.push_back(std::make_unique<SpscRing<Forwarded>>(cfg.mailbox_depth));
      contexts_[c]->seed(c, cfg.base_slot_of(c));
    }
  }

  unsigned cores() const { return cores_; }
  unsigned ingest_position() const { return ingest_position_; }
  unsigned head() const { return head_; }
  std::uint64_t emitted_batches() const { return emitted_; }

  PipelineContext& context(unsigned c) { return *contexts_[c]; }
  const PipelineContext& context(unsigned c) const { return *contexts_[c]; }
  PipelineContext& at_position(unsigned k) {
    return *contexts_[(head_ + k) % cores_];
  }
  SpscRing<Demand>& qhead() { return qhead_; }
  SpscRing<Forwarded>& inbox_of(unsigned c) {
    return *links_[(c + cores_ - 1) % cores_];
  }
  SpscRing<Forwarded>& outbox_of(unsigned c) { return *links_[c]; }

  // Non-head contexts relax linearly from the top bin (tail) to every bin
  // (next in line for head).
  AllowedMask mask_for(unsigned position) const {
    return relax_mask(cores_ - 1 - position, cores_ - 1, cfg_.num_priority_bins);
  }

  bool offer(const Demand& d) { return qhead_.try_push(d); }

  // One deterministic rotation: each context steps from head to tail, the
  // head's batch is returned, and the head moves behind the tail.
  AdmittedBatch step() {
    AdmittedBatch out;
    for (unsigned k = 0; k < cores_; ++k) {
      const unsigned c = (head_ + k) % cores_;
      PipelineContext& ctx = *contexts_[c];
      PipelineContext& pred = *contexts_[(c + cores_ - 1) % cores_];
      SpscRing<Forwarded>& in = inbox_of(c);
      // Conduits behave as unbounded here: keep shuttling until the
      // predecessor has nothing left for this batch.
      while (true) {
        const bool moved = pred.forward(in);
        const bool took = ctx.pull(in);
        if (!moved && !took) break;
      }
      if (k == ingest_position_) ctx.ingest(qhead_);
      if (k == 0) {
        out = ctx.finish();
        ctx.forward(outbox_of(c));
        ctx.seed(ctx.batch() + cores_, cfg_.base_slot_of(ctx.batch() + cores_));
      } else {
        ctx.step(mask_for(k), k);
        ctx.forward(outbox_of(c));
      }
    }
    head_ = (head_ + 1) % cores_;
    ++emitted_;
    return out;
  }

  // Partial batches of every context in slot order. Only for shutdown.
  std::vector<AdmittedBatch> take_partials() {
    std::vector<PipelineContext*> order;
    for (auto& c : contexts_) order.push_back(c.get());
    std::sort(order.begin(), order.end(),
              [](const auto* a, const auto* b) { return a->batch() < b->batch(); });
    std::vector<AdmittedBatch> out;
    for (auto* c : order) out.push_back(c->take_partial());
    return out;
  }

  // Slots still owed anywhere in the ring. Only valid while quiescent.
  std::uint64_t pending_slots() const {
    std::uint64_t total = 0;
    qhead_.for_each_quiescent([&](const Demand& d) { total += d.remaining; });
    for (const auto& l : links_) {
      l->for_each_quiescent(
          [&](const Forwarded& f) { total += f.demand.remaining; });
    }
    for (const auto& c : contexts_) total += c->pending_slots();
    return total;
  }

  std::vector<LaneCounters> counters() const {
    std::vector<LaneCounters> out;
    for (const auto& c : contexts_) out.push_back(c->counters());
    return out;
  }

 private:
  Config cfg_;
  unsigned cores_;
  unsigned ingest_position_;
  unsigned head_ = 0;
  std::uint64_t emitted_ = 0;
  SpscRing<Demand> qhead_;
  std::vector<std::unique_ptr<PipelineContext>> contexts_;
  std::vector<std::unique_ptr<SpscRing<Forwarded>>> links_;
};

namespace detail {

inline RunResult run_pipeline_deterministic(const Config& cfg,
                                            const Workload& workload,
                                            const RunOptions& opts) {
  Pipeline pipe(cfg);
  SharedCounters counters;
  Emitter emitter(opts, counters);
  Ingestor ingestor(cfg.num_nodes, 0, counters);
  DemandStream stream = workload.stream(0, 1, cfg.num_nodes);
  const std::int64_t batch_ns = cfg.batch_ns();

  std::deque<Demand> staging;
  std::optional<TraceRecord> next = stream.next();
  std::uint64_t step = 0;
  std::uint64_t idle_steps = 0;
  std::int64_t window_ns = 0;
  while (true) {
    const std::int64_t horizon = static_cast<std::int64_t>(step + 1) * batch_ns;
    while (next && next->arrival_ns < horizon) {
      Demand d;
      if (ingestor.admit(*next, d)) staging.push_back(d);
      next = stream.next();
    }
    while (!staging.empty() && pipe.offer(staging.front())) {
      ingestor.count(staging.front());
      staging.pop_front();
    }
    if (!staging.empty()) counters.overflows.fetch_add(1);

    const bool source_done = !next && staging.empty();
    if (source_done && counters.in_window.load()) {
      counters.in_window.store(false);
      window_ns = horizon;
    }
    if (source_done && counters.allocated_slots.load() ==
                           counters.demanded_slots.load()) {
      break;
    }
    if (source_done && ++idle_steps > opts.max_drain_batches) break;

    emitter.emit(pipe.step());
    ++step;
  }
  for (AdmittedBatch& b : pipe.take_partials()) {
    if (!b.edges.empty()) emitter.emit(std::move(b));
  }

  RunResult result;
  fill_common_metrics(result.metrics, counters, cfg, pipe.pending_slots(),
                      static_cast<std::int64_t>(step) * batch_ns,
                      window_ns > 0 ? window_ns
                                    : static_cast<std::int64_t>(step) * batch_ns,
                      emitter.batches());
  result.metrics.lanes = pipe.counters();
  result.batches = emitter.take_kept();
  return result;
}

inline RunResult run_pipeline_paced(const Config& cfg, const Workload& workload,
                                    const RunOptions& opts) {
  Pipeline pipe(cfg);
  SharedCounters counters;
  Emitter emitter(opts, counters);
  PacedClock clock;
  std::atomic<bool> stop{false};
  std::atomic<std::uint64_t> emitted_upto{0};
  std::atomic<std::uint64_t> qhead_turn{pipe.ingest_position()};
  const unsigned cores = pipe.cores();
  const unsigned m = pipe.ingest_position();
  const std::int64_t batch_ns = cfg.batch_ns();
  const auto window_ns = static_cast<std::int64_t>(opts.duration_s * 1e9);

  auto context_lane = [&](unsigned c) {
    PipelineContext& ctx = pipe.context(c);
    SpscRing<Forwarded>& in = pipe.inbox_of(c);
    SpscRing<Forwarded>& out = pipe.outbox_of(c);
    Backoff backoff;
    while (!stop.load(std::memory_order_acquire)) {
      bool progress = ctx.forward(out);
      progress |= ctx.pull(in);
      const std::uint64_t e = emitted_upto.load(std::memory_order_acquire);
      const auto position = static_cast<unsigned>(ctx.batch() - e);
      if (qhead_turn.load(std::memory_order_acquire) == ctx.batch()) {
        if (position >= m) {
          progress |= ctx.ingest(pipe.qhead());
        }
        if (position < m) {
          qhead_turn.store(ctx.batch() + 1, std::memory_order_release);
        }
      }
      if (position == 0) {
        const std::int64_t deadline =
            static_cast<std::int64_t>(ctx.batch() + 1) * batch_ns;
        if (clock.now_ns() >= deadline) {
          if (qhead_turn.load(std::memory_order_acquire) == ctx.batch()) {
            ctx.ingest(pipe.qhead());
            qhead_turn.store(ctx.batch() + 1, std::memory_order_release);
          }
          emitter.emit(ctx.finish());
          ctx.forward(out);
          const std::uint64_t next = ctx.batch() + cores;
          ctx.seed(next, cfg.base_slot_of(next));
          emitted_upto.store(e + 1, std::memory_order_release);
          progress = true;
        } else {
          ctx.step(AllowedMask::all(cfg.num_priority_bins), 0);
        }
      } else {
        ctx.step(pipe.mask_for(position), position);
      }
      if (progress) {
        backoff.reset();
      } else {
        backoff.pause();
      }
    }
  };

  counters.feeders_running.store(1);
  std::vector<std::thread> lanes;
  lanes.emplace_back(run_feeder, workload.stream(0, 1, cfg.num_nodes),
                     std::vector<SpscRing<Demand>*>{&pipe.qhead()},
                     Ingestor(cfg.num_nodes, 0, counters),
                     std::cref(clock), window_ns, std::cref(stop),
                     std::ref(counters));
  for (unsigned c = 0; c < cores; ++c) lanes.emplace_back(context_lane, c);

  const std::int64_t window_end =
      supervise_paced(opts, clock, counters, stop, [] { return false; });
  for (auto& t : lanes) t.join();
  const std::int64_t wall = clock.now_ns();

  for (AdmittedBatch& b : pipe.take_partials()) {
    if (!b.edges.empty()) emitter.emit(std::move(b));
  }

  RunResult result;
  fill_common_metrics(result.metrics, counters, cfg, pipe.pending_slots(), wall,
                      window_end, emitter.batches());
  result.metrics.lanes = pipe.counters();
  result.batches = emitter.take_kept();
  return result;
}

}  // namespace detail

inline RunResult run_pipeline(const Config& cfg, const Workload& workload,
                              const RunOptions& opts = {}) {
  cfg.validate();
  return opts.paced ? detail::run_pipeline_paced(cfg, workload, opts)
                    : detail::run_pipeline_deterministic(cfg, workload, opts);
}

}  // namespace arbiter
