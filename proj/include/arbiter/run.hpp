#pragma once

// Architecture dispatch and the probe runner used by the load search.

#include <cstdint>

#include "arbiter/core_model.hpp"
#include "arbiter/parallel_arch.hpp"
#include "arbiter/pipeline_arch.hpp"
#include "arbiter/run_support.hpp"
#include "arbiter/shuffle_arch.hpp"
#include "arbiter/stress.hpp"
#include "arbiter/workload.hpp"

namespace arbiter {

inline RunResult run_arbiter(const Config& cfg, const Workload& workload,
                             const RunOptions& opts = {}) {
  switch (cfg.architecture) {
    case Architecture::kPipelined: return run_pipeline(cfg, workload, opts);
    case Architecture::kParallel: return run_parallel(cfg, workload, opts);
    case Architecture::kShuffle: return run_shuffle(cfg, workload, opts);
  }
  throw ConfigError("unknown architecture");
}

// Each probe is a fresh paced run of `duration_s` on a generated workload.
inline ProbeRunner paced_probe(const Config& cfg, WorkloadSpec base,
                               double duration_s, double drain_timeout_s = 1.0) {
  return [=](double mean_t_ns) {
    WorkloadSpec spec = base;
    spec.mean_interarrival_ns = mean_t_ns;
    spec.duration_s = duration_s;
    spec.num_nodes = cfg.num_nodes;
    RunOptions opts;
    opts.paced = true;
    opts.duration_s = duration_s;
    opts.drain_timeout_s = drain_timeout_s;
    const RunResult r = run_arbiter(cfg, Workload::generated(spec), opts);
    ProbeOutcome o;
    const SustainVerdict v = sustain_check(r.metrics, cfg.gap_bound);
    o.sustained = v.sustained;
    o.reason = v.reason;
    o.max_gap = r.metrics.max_gap;
    o.offered_load_bps = spec.offered_load_bps(cfg.mtu_bytes);
    o.throughput_bps = r.metrics.throughput_bps;
    return o;
  };
}

}  // namespace arbiter
