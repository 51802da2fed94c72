#pragma once

/// @file report.hpp
/// @brief Run artifacts: the event log, per-rank activity segments, channel
///        statistics, and their CSV/JSON/Gantt renderings.

#include <cstdint>
#include <mutex>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

namespace situ {

enum class EventKind {
  TaskStart, TaskEnd,
  FileOpen, FileClose, DatasetWrite,
  HookBeforeOpen, HookAfterOpen, HookBeforeClose, HookAfterClose, HookAfterWrite,
  DecisionServe, DecisionSkip, DecisionBuffer, Drop, Flush,
  Ready, Ownership, PieceReq, Piece, QueryMore, More, AllDone, End, Bcast,
  FileSpill, FileRead,
};

inline std::string_view event_name(EventKind k) {
  switch (k) {
    case EventKind::TaskStart: return "task_start";
    case EventKind::TaskEnd: return "task_end";
    case EventKind::FileOpen: return "open";
    case EventKind::FileClose: return "close";
    case EventKind::DatasetWrite: return "write";
    case EventKind::HookBeforeOpen: return "hook_before_open";
    case EventKind::HookAfterOpen: return "hook_after_open";
    case EventKind::HookBeforeClose: return "hook_before_close";
    case EventKind::HookAfterClose: return "hook_after_close";
    case EventKind::HookAfterWrite: return "hook_after_write";
    case EventKind::DecisionServe: return "decision_serve";
    case EventKind::DecisionSkip: return "decision_skip";
    case EventKind::DecisionBuffer: return "decision_buffer";
    case EventKind::Drop: return "drop";
    case EventKind::Flush: return "flush";
    case EventKind::Ready: return "ready";
    case EventKind::Ownership: return "ownership";
    case EventKind::PieceReq: return "piece_req";
    case EventKind::Piece: return "piece";
    case EventKind::QueryMore: return "query_more";
    case EventKind::More: return "more";
    case EventKind::AllDone: return "all_done";
    case EventKind::End: return "end";
    case EventKind::Bcast: return "bcast";
    case EventKind::FileSpill: return "file_spill";
    case EventKind::FileRead: return "file_read";
  }
  return "?";
}

/// One timestamped row of the run log, attributed to the originating rank.
struct Event {
  double time = 0;
  int rank = -1;
  EventKind kind{};
  std::string filename;
  long timestep = -1;   // channel serve ordinal where applicable, else -1
  uint64_t bytes = 0;
  int channel = -1;     // not part of the CSV schema; kept for JSON audits
};

/// A span of rank activity for occupancy accounting and Gantt rendering.
struct Segment {
  enum class Kind { Compute, Idle, Transfer } kind{};
  int rank = -1;
  double start = 0, end = 0;
  std::string label;
};

inline std::string_view segment_name(Segment::Kind k) {
  switch (k) {
    case Segment::Kind::Compute: return "compute";
    case Segment::Kind::Idle: return "idle";
    case Segment::Kind::Transfer: return "transfer";
  }
  return "?";
}

struct ChannelStats {
  int id = -1;
  std::string producer, consumer;   // instance names
  std::string filename_pattern;     // producer-side pattern
  std::string flow;                 // strategy name
  std::vector<long> consumed;       // served timesteps in serve order
  uint64_t payload_bytes = 0;       // piece payloads only
  uint64_t file_bytes = 0;          // spilled container bytes
  long drops = 0;                   // buffered snapshots replaced (latest)
  long serves = 0;
};

struct RankStats {
  int rank = -1;
  std::string instance;
  int local_rank = 0;
  bool io_rank = false;
  double compute = 0, idle = 0, transfer = 0;
  long invocations = 0;
};

struct RunReport {
  bool ok = true;
  std::string error;
  double completion_time = 0;
  int total_ranks = 0;
  std::string clock;  // "virtual" | "real"
  std::vector<Event> events;
  std::vector<Segment> segments;
  std::vector<ChannelStats> channels;
  std::vector<RankStats> ranks;

  const ChannelStats& channel(int id) const {
    for (const auto& c : channels)
      if (c.id == id) return c;
    throw Error(fmt::format("no channel {} in report", id));
  }
};

// ---------------------------------------------------------------------------
// renderings

/// Event log CSV: time,rank,kind,filename,timestep,bytes
inline std::string events_csv(const RunReport& r) {
  fmt::memory_buffer b;
  fmt::format_to(std::back_inserter(b), "time,rank,kind,filename,timestep,bytes\n");
  for (const auto& e : r.events)
    fmt::format_to(std::back_inserter(b), "{},{},{},{},{},{}\n", e.time, e.rank,
                   event_name(e.kind), e.filename, e.timestep, e.bytes);
  return fmt::to_string(b);
}

/// Gantt CSV: rank,start,end,kind,label (segments in log order).
inline std::string gantt_csv(const RunReport& r) {
  fmt::memory_buffer b;
  fmt::format_to(std::back_inserter(b), "rank,start,end,kind,label\n");
  for (const auto& s : r.segments)
    fmt::format_to(std::back_inserter(b), "{},{},{},{},{}\n", s.rank, s.start, s.end,
                   segment_name(s.kind), s.label);
  return fmt::to_string(b);
}

inline nlohmann::json report_to_json(const RunReport& r) {
  nlohmann::json j;
  j["ok"] = r.ok;
  if (!r.ok) j["error"] = r.error;
  j["clock"] = r.clock;
  j["completion_time"] = r.completion_time;
  j["total_ranks"] = r.total_ranks;
  j["channels"] = nlohmann::json::array();
  for (const auto& c : r.channels) {
    j["channels"].push_back({{"id", c.id},
                             {"producer", c.producer},
                             {"consumer", c.consumer},
                             {"filename", c.filename_pattern},
                             {"flow", c.flow},
                             {"consumed", c.consumed},
                             {"payload_bytes", c.payload_bytes},
                             {"file_bytes", c.file_bytes},
                             {"drops", c.drops},
                             {"serves", c.serves}});
  }
  j["ranks"] = nlohmann::json::array();
  for (const auto& k : r.ranks) {
    j["ranks"].push_back({{"rank", k.rank},
                          {"instance", k.instance},
                          {"local_rank", k.local_rank},
                          {"io_rank", k.io_rank},
                          {"compute", k.compute},
                          {"idle", k.idle},
                          {"transfer", k.transfer},
                          {"invocations", k.invocations}});
  }
  j["events"] = nlohmann::json::array();
  for (const auto& e : r.events) {
    j["events"].push_back({{"time", e.time},
                           {"rank", e.rank},
                           {"kind", std::string(event_name(e.kind))},
                           {"filename", e.filename},
                           {"timestep", e.timestep},
                           {"bytes", e.bytes},
                           {"channel", e.channel}});
  }
  return j;
}

/// FNV-1a over the canonical JSON rendering; equal runs hash equal.
inline uint64_t report_hash(const RunReport& r) {
  const std::string s = report_to_json(r).dump();
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace situ
