#pragma once

// Random-shuffle allocator. Sources are split into K = S backlog shards. Each
// round, every shard fills a bin and the distributor sends it to alloc set
// permute(x, round); the set's alloc lane marks granted slots, its postalloc
// lane turns them into edges, and the inverse distributor returns the bin to
// its origin shard. Set y allocates batches y, y + S, y + 2S, ...

#include <algorithm>
#include <atomic>
#include <bit>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <queue>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "arbiter/conduit.hpp"
#include "arbiter/core_model.hpp"
#include "arbiter/greedy_allocator.hpp"
#include "arbiter/permutation.hpp"
#include "arbiter/run_support.hpp"
#include "arbiter/workload.hpp"

namespace arbiter {

struct BinEntry {
  NodeId src;
  NodeId dst;
  std::uint32_t count = 0;
  TimeslotIndex last_alloc = 0;

  friend bool operator==(const BinEntry&, const BinEntry&) = default;
};

struct Bin {
  std::uint32_t origin = 0;
  std::uint64_t round = 0;
  std::uint64_t batch = 0;
  TimeslotIndex base_slot = kFirstSlot;
  std::vector<BinEntry> entries;
  // result_bits[i]: offsets granted to entries[i] in this bin's batch.
  std::vector<std::uint64_t> result_bits;
  std::int64_t sent_ns = 0;

  std::uint64_t pending_slots() const {
    std::uint64_t total = 0;
    for (const BinEntry& e : entries) total += e.count;
    return total;
  }
};

struct BacklogSlot {
  std::uint64_t accrued = 0;
  bool in_flight = false;
};

// Per-(src, dst) request state for one shard's source range.
class BacklogTable {
 public:
  BacklogTable(std::uint32_t src_lo, std::uint32_t src_hi,
               std::uint32_t num_nodes)
      : lo_(src_lo),
        hi_(src_hi),
        nodes_(num_nodes),
        slots_(static_cast<std::size_t>(src_hi - src_lo) * num_nodes) {}

  bool owns(NodeId src) const { return src.value >= lo_ && src.value < hi_; }
  std::uint32_t src_lo() const { return lo_; }
  std::uint32_t src_hi() const { return hi_; }

  BacklogSlot& at(NodeId src, NodeId dst) {
    return slots_[static_cast<std::size_t>(src.value - lo_) * nodes_ + dst.value];
  }
  const BacklogSlot& at(NodeId src, NodeId dst) const {
    return slots_[static_cast<std::size_t>(src.value - lo_) * nodes_ + dst.value];
  }

 private:
  std::uint32_t lo_;
  std::uint32_t hi_;
  std::uint32_t nodes_;
  std::vector<BacklogSlot> slots_;
};

enum class BacklogDecision { kStaged, kAccrued };

class BacklogShard {
 public:
  BacklogShard(const Config& cfg, std::uint32_t index, std::uint32_t shards)
      : index_(index),
        capacity_(cfg.bin_capacity),
        table_(shard_range(index, shards, cfg.num_nodes).first,
               shard_range(index, shards, cfg.num_nodes).second, cfg.num_nodes) {
    counters_.name = "backlog" + std::to_string(index);
  }

  std::uint32_t index() const { return index_; }
  const BacklogTable& table() const { return table_; }
  bool owns(NodeId src) const { return table_.owns(src); }

  // A pair already in flight only grows its accrued count, so at most one
  // copy of each pair circulates.
  BacklogDecision ingest(const Demand& d) {
    if (!owns(d.src)) throw std::invalid_argument("demand source outside shard");
    ++counters_.received;
    BacklogSlot& slot = table_.at(d.src, d.dst);
    if (slot.in_flight) {
      slot.accrued += d.remaining;
      accrued_ += d.remaining;
      return BacklogDecision::kAccrued;
    }
    slot.in_flight = true;
    stage(BinEntry{d.src, d.dst, d.remaining, d.last_alloc});
    return BacklogDecision::kStaged;
  }

  // Fills `bin` with up to bin_capacity staged entries, least recently
  // allocated first.
  void fill(Bin& bin, std::uint64_t round, std::uint64_t batch,
            TimeslotIndex base_slot) {
    bin.origin = index_;
    bin.round = round;
    bin.batch = batch;
    bin.base_slot = base_slot;
    bin.entries.clear();
    while (bin.entries.size() < capacity_ && !staging_.empty()) {
      std::pop_heap(staging_.begin(), staging_.end(), Later{});
      bin.entries.push_back(staging_.back().entry);
      staging_slots_ -= staging_.back().entry.count;
      staging_.pop_back();
    }
    bin.result_bits.assign(bin.entries.size(), 0);
  }

  // Takes back a circulated bin. Spent pairs reissue their accrued count or
  // leave flight; the rest are staged again.
  void absorb(Bin& bin) {
    for (const BinEntry& e : bin.entries) {
      if (e.count > 0) {
        stage(e);
        continue;
      }
      BacklogSlot& slot = table_.at(e.src, e.dst);
      if (slot.accrued == 0) {
        slot.in_flight = false;
        continue;
      }
      const auto chunk = static_cast<std::uint32_t>(std::min<std::uint64_t>(
          slot.accrued, std::numeric_limits<std::uint32_t>::max()));
      slot.accrued -= chunk;
      accrued_ -= chunk;
      ++reissued_;
      stage(BinEntry{e.src, e.dst, chunk, e.last_alloc});
    }
    bin.entries.clear();
    bin.result_bits.clear();
  }

  std::size_t staged() const { return staging_.size(); }
  std::uint64_t accrued_slots() const { return accrued_; }
  std::uint64_t reissued() const { return reissued_; }
  std::uint64_t pending_slots() const { return staging_slots_ + accrued_; }
  const LaneCounters& counters() const { return counters_; }

 private:
  struct Staged {
    BinEntry entry;
    std::uint64_t seq;
  };
  struct Later {
    bool operator()(const Staged& a, const Staged& b) const {
      if (a.entry.last_alloc != b.entry.last_alloc) {
        return a.entry.last_alloc > b.entry.last_alloc;
      }
      return a.seq > b.seq;
    }
  };

  void stage(const BinEntry& e) {
    staging_.push_back(Staged{e, seq_++});
    std::push_heap(staging_.begin(), staging_.end(), Later{});
    staging_slots_ += e.count;
  }

  std::uint32_t index_;
  std::size_t capacity_;
  BacklogTable table_;
  std::vector<Staged> staging_;
  std::uint64_t seq_ = 0;
  std::uint64_t staging_slots_ = 0;
  std::uint64_t accrued_ = 0;
  std::uint64_t reissued_ = 0;
  LaneCounters counters_;
};

// Marks, per entry and in entry order, up to min(count, batch_size) free
// slots. Counts are left untouched for the postalloc lane.
class AllocLane {
 public:
  AllocLane(const Config& cfg, std::uint32_t set)
      : bitmaps_(cfg.num_nodes, cfg.batch_size) {
    counters_.name = "alloc" + std::to_string(set);
  }

  void process(Bin& bin) {
    if (!open_ || bin.batch != batch_) {
      bitmaps_.reset();
      batch_ = bin.batch;
      open_ = true;
    }
    bin.result_bits.assign(bin.entries.size(), 0);
    for (std::size_t i = 0; i < bin.entries.size(); ++i) {
      const BinEntry& e = bin.entries[i];
      std::uint32_t want = std::min<std::uint32_t>(e.count, bitmaps_.batch_size());
      std::uint64_t bits = 0;
      while (want > 0) {
        const auto offset = first_free_slot(bitmaps_.source_row(e.src),
                                            bitmaps_.destination_row(e.dst));
        if (!offset) break;
        bitmaps_.claim(e.src, e.dst, *offset);
        bits |= std::uint64_t{1} << *offset;
        --want;
      }
      bin.result_bits[i] = bits;
      counters_.allocated_slots += std::popcount(bits);
    }
    counters_.drained += bin.entries.size();
    ++counters_.received;
  }

  const LaneCounters& counters() const { return counters_; }

 private:
  AvailabilityBitmap bitmaps_;
  std::uint64_t batch_ = 0;
  bool open_ = false;
  LaneCounters counters_;
};

// Applies result bits: emits edges into the open batch, charges counts, and
// moves last_alloc to the latest granted slot.
class PostallocLane {
 public:
  explicit PostallocLane(std::uint32_t set) {
    counters_.name = "postalloc" + std::to_string(set);
  }

  void process(Bin& bin) {
    if (!open_ || open_batch_ != bin.batch) {
      open_ = true;
      open_batch_ = bin.batch;
      batch_ = AdmittedBatch{bin.base_slot, {}};
    }
    for (std::size_t i = 0; i < bin.entries.size(); ++i) {
      BinEntry& e = bin.entries[i];
      std::uint64_t bits = i < bin.result_bits.size() ? bin.result_bits[i] : 0;
      if (bits == 0) continue;
      e.last_alloc =
          bin.base_slot + (63 - static_cast<unsigned>(std::countl_zero(bits)));
      e.count -= static_cast<std::uint32_t>(std::popcount(bits));
      while (bits != 0) {
        const auto offset = static_cast<std::uint32_t>(std::countr_zero(bits));
        batch_.edges.push_back(Edge{offset, e.src, e.dst});
        bits &= bits - 1;
      }
    }
    bin.result_bits.assign(bin.entries.size(), 0);
    ++counters_.received;
  }

  bool has_open() const { return open_; }
  std::uint64_t open_batch() const { return open_batch_; }

  AdmittedBatch close() {
    open_ = false;
    counters_.allocated_slots += batch_.edges.size();
    return std::move(batch_);
  }

  const LaneCounters& counters() const { return counters_; }

 private:
  bool open_ = false;
  std::uint64_t open_batch_ = 0;
  AdmittedBatch batch_;
  LaneCounters counters_;
};

using AllocObserver = std::function<void(const Bin&)>;

// All lanes of the shuffle architecture plus the bins they circulate.
class ShuffleFabric {
 public:
  explicit ShuffleFabric(const Config& cfg)
      : cfg_(cfg),
        sets_(cfg.shuffle_sets),
        rounds_(cfg.bins_per_set),
        schedule_(cfg.shuffle_sets, cfg.perm_p1, cfg.perm_p2) {
    cfg.validate();
    for (std::uint32_t s = 0; s < sets_; ++s) {
      shards_.push_back(std::make_unique<BacklogShard>(cfg, s, sets_));
      allocs_.push_back(std::make_unique<AllocLane>(cfg, s));
      posts_.push_back(std::make_unique<PostallocLane>(s));
      pools_.emplace_back();
      for (unsigned b = 0; b < rounds_; ++b) {
        pools_.back().push_back(std::make_unique<Bin>());
      }
    }
  }

  const Config& config() const { return cfg_; }
  std::uint32_t sets() const { return sets_; }
  unsigned rounds_per_period() const { return rounds_; }
  const PermutationSchedule& schedule() const { return schedule_; }
  BacklogShard& shard(std::uint32_t x) { return *shards_[x]; }
  const BacklogShard& shard(std::uint32_t x) const { return *shards_[x]; }
  AllocLane& alloc(std::uint32_t y) { return *allocs_[y]; }
  PostallocLane& postalloc(std::uint32_t y) { return *posts_[y]; }
  std::vector<std::unique_ptr<Bin>>& pool(std::uint32_t x) { return pools_[x]; }

  std::uint32_t shard_of(NodeId src) const {
    for (std::uint32_t x = 0; x < sets_; ++x) {
      if (shards_[x]->owns(src)) return x;
    }
    throw std::invalid_argument("source outside every shard");
  }

  BacklogDecision ingest(const Demand& d) {
    return shards_[shard_of(d.src)]->ingest(d);
  }

  std::uint64_t batch_for(std::uint64_t round, std::uint32_t set) const {
    return round / rounds_ * sets_ + set;
  }

  void set_alloc_observer(AllocObserver obs) { on_alloc_ = std::move(obs); }

  // One deterministic period: rounds_per_period rounds over every shard,
  // then the S batches of the period in slot order.
  std::vector<AdmittedBatch> period() {
    for (unsigned j = 0; j < rounds_; ++j) {
      const std::uint64_t r = period_ * rounds_ + j;
      const AffinePermutation perm = schedule_.round(r);
      for (std::uint32_t x = 0; x < sets_; ++x) {
        const std::uint32_t y = perm.permute(x);
        const std::uint64_t b = batch_for(r, y);
        Bin& bin = *pools_[x][0];
        shards_[x]->fill(bin, r, b, cfg_.base_slot_of(b));
        allocs_[y]->process(bin);
        if (on_alloc_) on_alloc_(bin);
        posts_[y]->process(bin);
        shards_[perm.invert(y)]->absorb(bin);
      }
    }
    std::vector<AdmittedBatch> out;
    for (std::uint32_t y = 0; y < sets_; ++y) out.push_back(posts_[y]->close());
    ++period_;
    return out;
  }

  std::uint64_t backlog_pending_slots() const {
    std::uint64_t total = 0;
    for (const auto& s : shards_) total += s->pending_slots();
    return total;
  }

  std::uint64_t reissued() const {
    std::uint64_t total = 0;
    for (const auto& s : shards_) total += s->reissued();
    return total;
  }

  std::vector<LaneCounters> counters() const {
    std::vector<LaneCounters> out;
    for (std::uint32_t s = 0; s < sets_; ++s) {
      out.push_back(shards_[s]->counters());
      out.push_back(allocs_[s]->counters());
      out.push_back(posts_[s]->counters());
    }
    return out;
  }

 private:
  Config cfg_;
  std::uint32_t sets_;
  unsigned rounds_;
  PermutationSchedule schedule_;
  std::vector<std::unique_ptr<BacklogShard>> shards_;
  std::vector<std::unique_ptr<AllocLane>> allocs_;
  std::vector<std::unique_ptr<PostallocLane>> posts_;
  std::vector<std::vector<std::unique_ptr<Bin>>> pools_;
  AllocObserver on_alloc_;
  std::uint64_t period_ = 0;
};

namespace detail {

inline RunResult run_shuffle_deterministic(const Config& cfg,
                                           const Workload& workload,
                                           const RunOptions& opts,
                                           AllocObserver on_alloc) {
  ShuffleFabric fabric(cfg);
  fabric.set_alloc_observer(std::move(on_alloc));
  SharedCounters counters;
  Emitter emitter(opts, counters);
  Ingestor ingestor(cfg.num_nodes, 0, counters);
  DemandStream stream = workload.stream(0, 1, cfg.num_nodes);
  const std::int64_t period_ns = cfg.batch_ns() * fabric.sets();

  std::optional<TraceRecord> next = stream.next();
  std::uint64_t p = 0;
  std::uint64_t idle = 0;
  std::int64_t window_ns = 0;
  while (true) {
    const std::int64_t horizon = static_cast<std::int64_t>(p + 1) * period_ns;
    while (next && next->arrival_ns < horizon) {
      Demand d;
      if (ingestor.admit(*next, d)) {
        ingestor.count(d);
        fabric.ingest(d);
      }
      next = stream.next();
    }
    const bool source_done = !next;
    if (source_done && counters.in_window.load()) {
      counters.in_window.store(false);
      window_ns = horizon;
    }
    if (source_done &&
        counters.allocated_slots.load() == counters.demanded_slots.load()) {
      break;
    }
    if (source_done && ++idle > opts.max_drain_batches) break;
    for (AdmittedBatch& b : fabric.period()) emitter.emit(std::move(b));
    ++p;
  }

  RunResult result;
  const auto sim = static_cast<std::int64_t>(p) * period_ns;
  fill_common_metrics(result.metrics, counters, cfg,
                      fabric.backlog_pending_slots(), sim,
                      window_ns > 0 ? window_ns : sim, emitter.batches());
  result.metrics.cancelled_then_reissued = fabric.reissued();
  result.metrics.lanes = fabric.counters();
  result.batches = emitter.take_kept();
  return result;
}

// Threaded circulation shared by paced runs and the latency benchmark.
// Each set runs a backlog, an alloc, and a postalloc lane. dist[x][y] is the
// mailbox from shard x to set y; back[y][x] returns bins from set y to x.
class ShuffleThreads {
 public:
  struct Options {
    bool pace = true;
    // Stop sending after this many rounds; 0 means unbounded.
    std::uint64_t max_rounds = 0;
  };

  ShuffleThreads(const Config& cfg, const Workload& workload,
                 const RunOptions& run_opts, Options opts)
      : cfg_(cfg),
        workload_(workload),
        run_opts_(run_opts),
        opts_(opts),
        fabric_(cfg),
        sets_(fabric_.sets()),
        rounds_(fabric_.rounds_per_period()),
        emitter_(run_opts, counters_) {
    dist_.resize(sets_);
    for (auto& row : dist_) {
      row = std::vector<Mailbox<Bin>>(sets_);
    }
    back_.resize(sets_);
    for (std::uint32_t y = 0; y < sets_; ++y) {
      for (std::uint32_t x = 0; x < sets_; ++x) {
        back_[y].push_back(std::make_unique<SpscRing<Bin*>>(rounds_));
      }
      to_post_.push_back(std::make_unique<SpscRing<Bin*>>(sets_ * rounds_));
      out_.push_back(std::make_unique<SpscRing<AdmittedBatch>>(1024));
      leftovers_.emplace_back();
    }
    latency_sum_ns_ = std::vector<std::int64_t>(sets_, 0);
    latency_count_ = std::vector<std::uint64_t>(sets_, 0);
    returned_.resize(sets_);
    for (auto& r : returned_) r = std::make_unique<std::atomic<std::uint64_t>>(0);
  }

  void start() {
    counters_.feeders_running.store(sets_);
    for (std::uint32_t s = 0; s < sets_; ++s) {
      threads_.emplace_back([this, s] { backlog_loop(s); });
      threads_.emplace_back([this, s] { alloc_loop(s); });
      threads_.emplace_back([this, s] { postalloc_loop(s); });
    }
  }

  // Emits closed batches in slot order. Main thread only.
  bool collect() {
    bool any = false;
    while (true) {
      SpscRing<AdmittedBatch>& ring = *out_[next_batch_ % sets_];
      const AdmittedBatch* front = ring.front();
      if (front == nullptr) break;
      AdmittedBatch b = *front;
      ring.pop();
      emitter_.emit(std::move(b));
      ++next_batch_;
      any = true;
    }
    return any;
  }

  bool all_returned(std::uint64_t rounds) const {
    for (const auto& r : returned_) {
      if (r->load(std::memory_order_acquire) < rounds) return false;
    }
    return true;
  }

  void stop_and_join() {
    stop_.store(true, std::memory_order_release);
    for (auto& t : threads_) t.join();
    threads_.clear();
  }

  // After join: finish bins that were between alloc and postalloc, then
  // emit every remaining batch in slot order.
  void flush() {
    std::vector<AdmittedBatch> rest;
    for (std::uint32_t y = 0; y < sets_; ++y) {
      Bin* bin = nullptr;
      while (to_post_[y]->try_pop(bin)) {
        if (finish_bin(y, *bin)) leftovers_[y].push_back(fabric_.postalloc(y).close());
      }
      AdmittedBatch b;
      while (out_[y]->try_pop(b)) rest.push_back(std::move(b));
      for (AdmittedBatch& l : leftovers_[y]) rest.push_back(std::move(l));
      leftovers_[y].clear();
      if (fabric_.postalloc(y).has_open()) rest.push_back(fabric_.postalloc(y).close());
    }
    std::sort(rest.begin(), rest.end(),
              [](const AdmittedBatch& a, const AdmittedBatch& b) {
                return a.base_slot < b.base_slot;
              });
    for (AdmittedBatch& b : rest) emitter_.emit(std::move(b));
  }

  std::uint64_t pending_slots() const {
    std::uint64_t total = fabric_.backlog_pending_slots();
    for (std::uint32_t x = 0; x < sets_; ++x) {
      for (std::uint32_t y = 0; y < sets_; ++y) {
        if (const Bin* b = dist_[x][y].peek()) total += b->pending_slots();
        back_[y][x]->for_each_quiescent(
            [&](Bin* const& b) { total += b->pending_slots(); });
      }
    }
    return total;
  }

  double mean_latency_ns() const {
    std::int64_t sum = 0;
    std::uint64_t n = 0;
    for (std::uint32_t s = 0; s < sets_; ++s) {
      sum += latency_sum_ns_[s];
      n += latency_count_[s];
    }
    return n == 0 ? 0.0 : static_cast<double>(sum) / static_cast<double>(n);
  }

  SharedCounters& counters() { return counters_; }
  Emitter& emitter() { return emitter_; }
  const PacedClock& clock() const { return clock_; }
  ShuffleFabric& fabric() { return fabric_; }
  std::atomic<bool>& stop_flag() { return stop_; }

 private:
  void backlog_loop(std::uint32_t x) {
    BacklogShard& shard = fabric_.shard(x);
    const PermutationSchedule& sched = fabric_.schedule();
    std::vector<Bin*> free_bins;
    for (auto& b : fabric_.pool(x)) free_bins.push_back(b.get());
    DemandStream stream = workload_.stream(x, sets_, cfg_.num_nodes);
    Ingestor ingestor(cfg_.num_nodes, std::uint64_t{x} << 40, counters_);
    const auto window_ns = static_cast<std::int64_t>(run_opts_.duration_s * 1e9);
    const std::int64_t period_ns = cfg_.batch_ns() * sets_;
    std::optional<TraceRecord> rec;
    bool feeding = true;
    std::uint64_t next_send = 0;
    std::uint64_t next_return = 0;
    Backoff backoff;

    while (!stop_.load(std::memory_order_acquire)) {
      bool progress = false;
      const std::int64_t now = clock_.now_ns();
      while (feeding) {
        if (!rec) rec = stream.next();
        if (now >= window_ns) {
          feeding = false;
          counters_.feeders_running.fetch_sub(1, std::memory_order_acq_rel);
          break;
        }
        if (!rec || rec->arrival_ns > now) break;
        Demand d;
        if (ingestor.admit(*rec, d)) {
          ingestor.count(d);
          shard.ingest(d);
          ingestor.note_lag(now - rec->arrival_ns);
        }
        rec.reset();
        progress = true;
      }
      while (next_return < next_send) {
        const std::uint32_t y = sched.permute(x, next_return);
        SpscRing<Bin*>& ring = *back_[y][x];
        Bin* const* front = ring.front();
        if (front == nullptr || (*front)->round != next_return) break;
        Bin* bin = *front;
        ring.pop();
        latency_sum_ns_[x] += clock_.now_ns() - bin->sent_ns;
        ++latency_count_[x];
        shard.absorb(*bin);
        free_bins.push_back(bin);
        ++next_return;
        returned_[x]->store(next_return, std::memory_order_release);
        progress = true;
      }
      if (!free_bins.empty() &&
          (opts_.max_rounds == 0 || next_send < opts_.max_rounds)) {
        const std::uint64_t r = next_send;
        const std::uint64_t p = r / rounds_;
        const std::uint64_t j = r % rounds_;
        const std::int64_t release =
            opts_.pace ? static_cast<std::int64_t>(p) * period_ns +
                             static_cast<std::int64_t>(j) * period_ns /
                                 static_cast<std::int64_t>(rounds_)
                       : 0;
        const std::uint32_t y = sched.permute(x, r);
        if (now >= release && !dist_[x][y].full()) {
          Bin* bin = free_bins.back();
          free_bins.pop_back();
          const std::uint64_t b = fabric_.batch_for(r, y);
          shard.fill(*bin, r, b, cfg_.base_slot_of(b));
          bin->sent_ns = clock_.now_ns();
          dist_[x][y].try_put(bin);
          ++next_send;
          progress = true;
        }
      }
      if (progress) {
        backoff.reset();
      } else {
        backoff.pause();
      }
    }
    if (feeding) counters_.feeders_running.fetch_sub(1, std::memory_order_acq_rel);
  }

  void alloc_loop(std::uint32_t y) {
    AllocLane& lane = fabric_.alloc(y);
    const PermutationSchedule& sched = fabric_.schedule();
    Backoff backoff;
    for (std::uint64_t r = 0;;) {
      const std::uint32_t x = sched.invert(y, r);
      Bin* bin = dist_[x][y].try_take();
      if (bin == nullptr) {
        if (stop_.load(std::memory_order_acquire)) return;
        backoff.pause();
        continue;
      }
      backoff.reset();
      lane.process(*bin);
      to_post_[y]->try_push(bin);
      ++r;
    }
  }

  // Returns true when the bin was the last of its batch.
  bool finish_bin(std::uint32_t y, Bin& bin) {
    fabric_.postalloc(y).process(bin);
    back_[y][bin.origin]->try_push(&bin);
    return bin.round % rounds_ == rounds_ - 1;
  }

  void postalloc_loop(std::uint32_t y) {
    Backoff backoff;
    while (true) {
      Bin* bin = nullptr;
      if (!to_post_[y]->try_pop(bin)) {
        if (stop_.load(std::memory_order_acquire)) return;
        backoff.pause();
        continue;
      }
      backoff.reset();
      if (!finish_bin(y, *bin)) continue;
      AdmittedBatch closed = fabric_.postalloc(y).close();
      while (!out_[y]->try_push(closed)) {
        if (stop_.load(std::memory_order_acquire)) {
          leftovers_[y].push_back(std::move(closed));
          break;
        }
        backoff.pause();
      }
    }
  }

  Config cfg_;
  const Workload& workload_;
  const RunOptions& run_opts_;
  Options opts_;
  ShuffleFabric fabric_;
  std::uint32_t sets_;
  unsigned rounds_;
  SharedCounters counters_;
  Emitter emitter_;
  PacedClock clock_;
  std::atomic<bool> stop_{false};
  std::vector<std::vector<Mailbox<Bin>>> dist_;
  std::vector<std::vector<std::unique_ptr<SpscRing<Bin*>>>> back_;
  std::vector<std::unique_ptr<SpscRing<Bin*>>> to_post_;
  std::vector<std::unique_ptr<SpscRing<AdmittedBatch>>> out_;
  std::vector<std::vector<AdmittedBatch>> leftovers_;
  std::vector<std::int64_t> latency_sum_ns_;
  std::vector<std::uint64_t> latency_count_;
  std::vector<std::unique_ptr<std::atomic<std::uint64_t>>> returned_;
  std::uint64_t next_batch_ = 0;
  std::vector<std::thread> threads_;
};

inline RunResult run_shuffle_paced(const Config& cfg, const Workload& workload,
                                   const RunOptions& opts) {
  ShuffleThreads fabric(cfg, workload, opts, ShuffleThreads::Options{});
  fabric.start();
  const std::int64_t window_end =
      supervise_paced(opts, fabric.clock(), fabric.counters(),
                      fabric.stop_flag(), [&] { return fabric.collect(); });
  fabric.stop_and_join();
  const std::int64_t wall = fabric.clock().now_ns();
  fabric.collect();
  fabric.flush();

  RunResult result;
  fill_common_metrics(result.metrics, fabric.counters(), cfg,
                      fabric.pending_slots(), wall, window_end,
                      fabric.emitter().batches());
  result.metrics.cancelled_then_reissued = fabric.fabric().reissued();
  result.metrics.lanes = fabric.fabric().counters();
  result.batches = fabric.emitter().take_kept();
  return result;
}

}  // namespace detail

inline RunResult run_shuffle(const Config& cfg, const Workload& workload,
                             const RunOptions& opts = {},
                             AllocObserver on_alloc = {}) {
  cfg.validate();
  return opts.paced
             ? detail::run_shuffle_paced(cfg, workload, opts)
             : detail::run_shuffle_deterministic(cfg, workload, opts,
                                                 std::move(on_alloc));
}

struct CirculationLatency {
  std::uint32_t sets = 0;
  std::uint64_t rounds = 0;
  double mean_ns = 0.0;
};

// Unpaced circulation of empty bins for `rounds` rounds per shard; reports
// the mean time from a backlog sending a bin to getting it back.
inline CirculationLatency measure_circulation(Config cfg, std::uint32_t sets,
                                              std::uint64_t rounds) {
  cfg.shuffle_sets = sets;
  cfg.validate();
  const Workload empty = Workload::replay({});
  RunOptions opts;
  opts.duration_s = 0;
  detail::ShuffleThreads fabric(
      cfg, empty, opts, detail::ShuffleThreads::Options{false, rounds});
  fabric.start();
  Backoff backoff;
  while (!fabric.all_returned(rounds)) {
    if (!fabric.collect()) backoff.pause();
  }
  fabric.stop_and_join();
  return CirculationLatency{sets, rounds, fabric.mean_latency_ns()};
}

}  // namespace arbiter
