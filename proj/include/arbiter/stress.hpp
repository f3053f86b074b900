#pragma once

// Stress-test verdicts and the adaptive search for the highest load an
// allocator sustains.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "arbiter/core_model.hpp"

namespace arbiter {

struct SustainVerdict {
  bool sustained = false;
  std::string reason;
};

constexpr std::int64_t kDefaultMaxIngestLagNs = 100'000'000;

// Passes when the demand/allocation gap stayed within gap_bound for the
// whole window, no conduit overflowed, and demands entered no later than
// max_lag_ns after their arrival time. Windows shorter than one second are
// rejected.
inline SustainVerdict sustain_check(
    const Metrics& m, std::uint64_t gap_bound,
    std::int64_t min_window_ns = 1'000'000'000,
    std::int64_t max_lag_ns = kDefaultMaxIngestLagNs) {
  if (m.window_ns < min_window_ns) {
    throw std::invalid_argument("sustain_check needs a window of at least " +
                                std::to_string(min_window_ns) + " ns");
  }
  if (m.conduit_overflows > 0) {
    return {false, std::to_string(m.conduit_overflows) + " conduit overflows"};
  }
  if (m.max_ingest_lag_ns > max_lag_ns) {
    return {false, "ingestion fell " + std::to_string(m.max_ingest_lag_ns) +
                       " ns behind"};
  }
  if (m.max_gap > gap_bound) {
    return {false, "gap " + std::to_string(m.max_gap) + " exceeds bound " +
                       std::to_string(gap_bound)};
  }
  return {true, "sustained"};
}

struct ProbeOutcome {
  bool sustained = false;
  double offered_load_bps = 0.0;
  double throughput_bps = 0.0;
  std::uint64_t max_gap = 0;
  std::string reason;
};

struct SearchStep {
  double mean_t_ns = 0.0;
  double factor = 0.0;
  ProbeOutcome outcome;
};

struct SearchParams {
  double initial_mean_t_ns = 10'000.0;
  double initial_factor = 2.0;
  double min_factor = 1.02;
  unsigned max_probes = 64;
  // Wall-clock budget for the whole search; 0 means none.
  double time_budget_s = 0.0;
};

struct SearchResult {
  double max_sustained_load_bps = 0.0;
  double throughput_bps = 0.0;
  double final_mean_t_ns = 0.0;
  // Lowest offered load that failed, if any probe failed.
  std::optional<double> lowest_failing_load_bps;
  bool converged = false;
  std::vector<SearchStep> trajectory;
};

class SearchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using ProbeRunner = std::function<ProbeOutcome(double mean_t_ns)>;

// Repeats a probe up to `repeats` times and reports the majority verdict,
// stopping as soon as the majority is decided.
inline ProbeRunner majority_probe(ProbeRunner runner, unsigned repeats) {
  if (repeats == 0) throw std::invalid_argument("repeats must be positive");
  return [runner = std::move(runner), repeats](double mean_t_ns) {
    const unsigned needed = repeats / 2 + 1;
    unsigned passed = 0;
    unsigned failed = 0;
    std::optional<ProbeOutcome> last_pass;
    std::optional<ProbeOutcome> last_fail;
    while (passed < needed && failed < needed) {
      ProbeOutcome o = runner(mean_t_ns);
      if (o.sustained) {
        ++passed;
        last_pass = std::move(o);
      } else {
        ++failed;
        last_fail = std::move(o);
      }
    }
    return passed >= needed ? *last_pass : *last_fail;
  };
}

// Geometric descent on mean_t: divide by `factor` while probes pass; on a
// failure go back to the last passing mean_t and shrink the factor to its
// square root. Stops once factor <= min_factor.
inline SearchResult auto_search(const ProbeRunner& runner,
                                const SearchParams& params) {
  if (!(params.initial_factor > 1.0) || !(params.min_factor > 1.0)) {
    throw std::invalid_argument("search factors must exceed 1");
  }
  if (!(params.initial_mean_t_ns > 0.0)) {
    throw std::invalid_argument("initial mean_t must be positive");
  }
  const auto started = std::chrono::steady_clock::now();
  auto out_of_time = [&] {
    if (params.time_budget_s <= 0) return false;
    const std::chrono::duration<double> spent =
        std::chrono::steady_clock::now() - started;
    return spent.count() >= params.time_budget_s;
  };

  SearchResult result;
  double mean_t = params.initial_mean_t_ns;
  double factor = params.initial_factor;
  std::optional<double> last_good;

  for (unsigned probe = 0; probe < params.max_probes; ++probe) {
    const ProbeOutcome o = runner(mean_t);
    result.trajectory.push_back(SearchStep{mean_t, factor, o});
    if (o.sustained) {
      last_good = mean_t;
      result.max_sustained_load_bps = o.offered_load_bps;
      result.throughput_bps = o.throughput_bps;
      result.final_mean_t_ns = mean_t;
    } else {
      if (!last_good) {
        throw SearchError(
            "initial load is not sustainable; retry with a larger initial "
            "mean_t");
      }
      if (!result.lowest_failing_load_bps ||
          o.offered_load_bps < *result.lowest_failing_load_bps) {
        result.lowest_failing_load_bps = o.offered_load_bps;
      }
      factor = std::sqrt(factor);
      if (factor <= params.min_factor) {
        result.converged = true;
        break;
      }
    }
    if (out_of_time()) break;
    mean_t = *last_good / factor;
  }
  return result;
}

}  // namespace arbiter
