#pragma once

// JSON rendering of run metrics and search results, plus the admitted-batch
// CSV used for offline verification.

#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "arbiter/core_model.hpp"
#include "arbiter/stress.hpp"
#include "arbiter/workload.hpp"

namespace arbiter {

inline nlohmann::json to_json(const LaneCounters& c) {
  nlohmann::json j = {{"name", c.name},
                      {"received", c.received},
                      {"drained", c.drained},
                      {"allocated_slots", c.allocated_slots},
                      {"forwarded", c.forwarded}};
  if (!c.drained_by_position.empty()) {
    j["drained_by_position"] = c.drained_by_position;
  }
  return j;
}

inline nlohmann::json to_json(const Metrics& m) {
  nlohmann::json lanes = nlohmann::json::array();
  for (const LaneCounters& c : m.lanes) lanes.push_back(to_json(c));
  return {{"demanded_slots", m.demanded_slots},
          {"allocated_slots", m.allocated_slots},
          {"pending_slots", m.pending_slots},
          {"cancelled_then_reissued", m.cancelled_then_reissued},
          {"conserved", m.conserved()},
          {"wall_elapsed_ns", m.wall_elapsed_ns},
          {"window_ns", m.window_ns},
          {"throughput_bps", m.throughput_bps},
          {"demands_ingested", m.demands_ingested},
          {"demands_rejected", m.demands_rejected},
          {"batches_emitted", m.batches_emitted},
          {"max_gap", m.max_gap},
          {"conduit_overflows", m.conduit_overflows},
          {"max_ingest_lag_ns", m.max_ingest_lag_ns},
          {"overload", m.overload},
          {"lanes", lanes}};
}

inline nlohmann::json to_json(const SearchResult& r) {
  nlohmann::json steps = nlohmann::json::array();
  for (const SearchStep& s : r.trajectory) {
    steps.push_back({{"mean_t_ns", s.mean_t_ns},
                     {"factor", s.factor},
                     {"sustained", s.outcome.sustained},
                     {"offered_load_bps", s.outcome.offered_load_bps},
                     {"throughput_bps", s.outcome.throughput_bps},
                     {"max_gap", s.outcome.max_gap},
                     {"reason", s.outcome.reason}});
  }
  nlohmann::json j = {{"max_sustained_load_bps", r.max_sustained_load_bps},
                      {"throughput_bps", r.throughput_bps},
                      {"final_mean_t_ns", r.final_mean_t_ns},
                      {"converged", r.converged},
                      {"trajectory", steps}};
  if (r.lowest_failing_load_bps) {
    j["lowest_failing_load_bps"] = *r.lowest_failing_load_bps;
  }
  return j;
}

inline constexpr const char* kAdmittedHeader = "slot,src,dst";

inline void write_admitted_header(std::ostream& os) {
  os << kAdmittedHeader << '\n';
}

inline void write_admitted(const AdmittedBatch& b, std::ostream& os) {
  for (const Edge& e : b.edges) {
    os << b.slot_of(e) << ',' << e.src.value << ',' << e.dst.value << '\n';
  }
}

struct AdmittedRow {
  TimeslotIndex slot = 0;
  NodeId src;
  NodeId dst;
};

inline std::vector<AdmittedRow> read_admitted(std::istream& is) {
  std::vector<AdmittedRow> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no == 1) {
      if (line != kAdmittedHeader) {
        throw TraceParseError(line_no, "expected header 'slot,src,dst'");
      }
      continue;
    }
    if (line.empty()) continue;
    const auto c1 = line.find(',');
    const auto c2 = c1 == std::string::npos ? c1 : line.find(',', c1 + 1);
    if (c2 == std::string::npos || line.find(',', c2 + 1) != std::string::npos) {
      throw TraceParseError(line_no, "expected 3 comma-separated fields");
    }
    const std::string_view v(line);
    AdmittedRow r;
    r.slot = detail::parse_field<TimeslotIndex>(v.substr(0, c1), line_no, "slot");
    r.src = NodeId(detail::parse_field<std::uint32_t>(
        v.substr(c1 + 1, c2 - c1 - 1), line_no, "src"));
    r.dst = NodeId(detail::parse_field<std::uint32_t>(v.substr(c2 + 1), line_no,
                                                      "dst"));
    out.push_back(r);
  }
  return out;
}

}  // namespace arbiter
