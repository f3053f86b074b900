#pragma once

// Synthetic stress workload (Poisson arrivals, uniform endpoints, clamped
// Gaussian sizes) and the CSV trace format used to record and replay it.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <memory>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "arbiter/core_model.hpp"

namespace arbiter {

struct WorkloadSpec {
  std::uint64_t seed = 1;
  std::uint32_t num_nodes = 256;
  double mean_interarrival_ns = 1000.0;
  double size_mean_packets = 10.0;
  double size_stddev = 3.0;
  double duration_s = 5.0;

  void validate() const {
    if (num_nodes < 2) throw ConfigError("workload needs at least 2 nodes");
    if (!(mean_interarrival_ns > 0)) {
      throw ConfigError("mean interarrival time must be positive");
    }
    if (size_stddev < 0) throw ConfigError("size stddev must be non-negative");
    if (duration_s < 0) throw ConfigError("duration must be non-negative");
  }

  // Offered load in bits per second when every packet is one MTU.
  double offered_load_bps(std::uint32_t mtu_bytes) const {
    return 1e9 / mean_interarrival_ns * size_mean_packets * mtu_bytes * 8.0;
  }
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t shard_seed(std::uint64_t master, std::uint32_t shard) {
  return splitmix64(master ^ splitmix64(shard + 1));
}

// Contiguous source range owned by shard `x` of `k`.
inline std::pair<std::uint32_t, std::uint32_t> shard_range(std::uint32_t x,
                                                           std::uint32_t k,
                                                           std::uint32_t nodes) {
  const auto lo = static_cast<std::uint32_t>(std::uint64_t{x} * nodes / k);
  const auto hi = static_cast<std::uint32_t>(std::uint64_t{x + 1} * nodes / k);
  return {lo, hi};
}

class WorkloadGenerator {
 public:
  explicit WorkloadGenerator(const WorkloadSpec& spec)
      : WorkloadGenerator(spec, 0, spec.num_nodes, spec.seed) {}

  // Sources restricted to [src_lo, src_hi); the arrival rate is scaled to
  // that share of the nodes so shard generators add up to the full load.
  WorkloadGenerator(const WorkloadSpec& spec, std::uint32_t src_lo,
                    std::uint32_t src_hi, std::uint64_t seed)
      : spec_(spec),
        src_lo_(src_lo),
        src_hi_(src_hi),
        rng_(seed),
        gap_(1.0 / (spec.mean_interarrival_ns * spec.num_nodes /
                    static_cast<double>(src_hi - src_lo))),
        size_(spec.size_mean_packets,
              spec.size_stddev > 0 ? spec.size_stddev : 1.0),
        horizon_ns_(spec.duration_s * 1e9) {
    spec.validate();
    if (src_lo >= src_hi || src_hi > spec.num_nodes) {
      throw ConfigError("invalid generator source range");
    }
  }

  std::optional<TraceRecord> next() {
    clock_ns_ += gap_(rng_);
    if (clock_ns_ >= horizon_ns_) return std::nullopt;
    TraceRecord r;
    r.arrival_ns = static_cast<std::int64_t>(clock_ns_);
    std::uniform_int_distribution<std::uint32_t> src(src_lo_, src_hi_ - 1);
    std::uniform_int_distribution<std::uint32_t> dst(0, spec_.num_nodes - 1);
    r.src = NodeId(src(rng_));
    do {
      r.dst = NodeId(dst(rng_));
    } while (r.dst == r.src);
    double size = spec_.size_mean_packets;
    if (spec_.size_stddev > 0) size = size_(rng_);
    r.size_packets =
        static_cast<std::uint32_t>(std::max<long long>(1, std::llround(size)));
    return r;
  }

 private:
  WorkloadSpec spec_;
  std::uint32_t src_lo_;
  std::uint32_t src_hi_;
  std::mt19937_64 rng_;
  std::exponential_distribution<double> gap_;
  std::normal_distribution<double> size_;
  double horizon_ns_;
  double clock_ns_ = 0.0;
};

inline std::vector<TraceRecord> gen_workload(const WorkloadSpec& spec) {
  WorkloadGenerator gen(spec);
  std::vector<TraceRecord> out;
  while (auto r = gen.next()) out.push_back(*r);
  return out;
}

class TraceParseError : public std::runtime_error {
 public:
  TraceParseError(std::size_t line, const std::string& what)
      : std::runtime_error("trace line " + std::to_string(line) + ": " + what),
        line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

inline constexpr std::string_view kTraceHeader =
    "arrival_ns,src,dst,size_packets";

inline void record_trace(std::span<const TraceRecord> records,
                         std::ostream& os) {
  os << kTraceHeader << '\n';
  for (const TraceRecord& r : records) {
    os << r.arrival_ns << ',' << r.src.value << ',' << r.dst.value << ','
       << r.size_packets << '\n';
  }
}

inline void record_trace(std::span<const TraceRecord> records,
                         const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open trace for writing: " + path);
  record_trace(records, os);
}

namespace detail {

template <typename Int>
Int parse_field(std::string_view text, std::size_t line, const char* name) {
  Int v{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size() || text.empty()) {
    throw TraceParseError(line, std::string("bad ") + name + " '" +
                                    std::string(text) + "'");
  }
  return v;
}

}  // namespace detail

inline std::vector<TraceRecord> replay_trace(std::istream& is) {
  std::vector<TraceRecord> out;
  std::string line;
  std::size_t line_no = 0;
  bool seen_header = false;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!seen_header) {
      if (line != kTraceHeader) {
        throw TraceParseError(line_no, "expected header '" +
                                           std::string(kTraceHeader) + "'");
      }
      seen_header = true;
      continue;
    }
    if (line.empty()) continue;
    std::string_view rest(line);
    std::string_view fields[4];
    for (int i = 0; i < 4; ++i) {
      const auto comma = rest.find(',');
      if ((comma == std::string_view::npos) != (i == 3)) {
        throw TraceParseError(line_no, "expected 4 comma-separated fields");
      }
      fields[i] = rest.substr(0, comma);
      rest = comma == std::string_view::npos ? std::string_view{}
                                             : rest.substr(comma + 1);
    }
    TraceRecord r;
    r.arrival_ns =
        detail::parse_field<std::int64_t>(fields[0], line_no, "arrival_ns");
    r.src = NodeId(detail::parse_field<std::uint32_t>(fields[1], line_no, "src"));
    r.dst = NodeId(detail::parse_field<std::uint32_t>(fields[2], line_no, "dst"));
    r.size_packets =
        detail::parse_field<std::uint32_t>(fields[3], line_no, "size_packets");
    if (!out.empty() && r.arrival_ns < out.back().arrival_ns) {
      throw TraceParseError(line_no, "arrival_ns goes backwards");
    }
    out.push_back(r);
  }
  return out;
}

inline std::vector<TraceRecord> replay_trace(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open trace: " + path);
  return replay_trace(is);
}

// Pull-based demand source for one ingestion lane: either a live generator or
// a cursor over a shared trace filtered to a source range.
class DemandStream {
 public:
  explicit DemandStream(WorkloadGenerator gen) : impl_(std::move(gen)) {}
  DemandStream(std::shared_ptr<const std::vector<TraceRecord>> trace,
               std::uint32_t src_lo, std::uint32_t src_hi)
      : impl_(Cursor{std::move(trace), 0, src_lo, src_hi}) {}

  std::optional<TraceRecord> next() {
    if (auto* gen = std::get_if<WorkloadGenerator>(&impl_)) return gen->next();
    auto& c = std::get<Cursor>(impl_);
    while (c.index < c.trace->size()) {
      const TraceRecord& r = (*c.trace)[c.index++];
      if (r.src.value >= c.lo && r.src.value < c.hi) return r;
    }
    return std::nullopt;
  }

 private:
  struct Cursor {
    std::shared_ptr<const std::vector<TraceRecord>> trace;
    std::size_t index;
    std::uint32_t lo;
    std::uint32_t hi;
  };
  std::variant<WorkloadGenerator, Cursor> impl_;
};

// Where a run's demands come from: a recorded trace or a generator spec.
struct Workload {
  std::shared_ptr<const std::vector<TraceRecord>> trace;
  std::optional<WorkloadSpec> spec;

  static Workload replay(std::vector<TraceRecord> records) {
    return Workload{
        std::make_shared<const std::vector<TraceRecord>>(std::move(records)),
        std::nullopt};
  }
  static Workload generated(const WorkloadSpec& s) {
    return Workload{nullptr, s};
  }

  // Stream for shard `x` of `k`, covering sources [lo, hi).
  DemandStream stream(std::uint32_t x, std::uint32_t k, std::uint32_t nodes) const {
    const auto [lo, hi] = shard_range(x, k, nodes);
    if (trace) return DemandStream(trace, lo, hi);
    const std::uint64_t seed = k == 1 ? spec->seed : shard_seed(spec->seed, x);
    return DemandStream(WorkloadGenerator(*spec, lo, hi, seed));
  }

  std::shared_ptr<const std::vector<TraceRecord>> materialize() const {
    if (trace) return trace;
    return std::make_shared<const std::vector<TraceRecord>>(gen_workload(*spec));
  }
};

}  // namespace arbiter
