#pragma once

/// @file transport.hpp
/// @brief Per-channel coupling state: flow-control decisions, serve-cycle
///        bookkeeping, piece-transfer planning, and the data structures the
///        runtime drives the serve/fetch protocol over.

#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "situ/config.hpp"
#include "situ/datamodel.hpp"
#include "situ/fabric.hpp"
#include "situ/glob.hpp"

namespace situ {

enum class FlowDecision { Serve, Skip, Buffer };

inline std::string_view decision_name(FlowDecision d) {
  switch (d) {
    case FlowDecision::Serve: return "serve";
    case FlowDecision::Skip: return "skip";
    case FlowDecision::Buffer: return "buffer";
  }
  return "?";
}

/// The per-serve-point decision. @p close_index counts serve points on the
/// channel (1-based). All: serve every time. Some(n): serve every n-th point,
/// and always on the final flush. Latest: serve when every consumer rank is
/// already waiting, otherwise buffer the snapshot for later replacement.
inline FlowDecision apply_flow_control(const FlowControl& fc, long close_index,
                                       bool consumer_pending, bool is_final) {
  switch (fc.kind) {
    case FlowControl::Kind::All:
      return FlowDecision::Serve;
    case FlowControl::Kind::Some:
      return (is_final || close_index % fc.n == 0) ? FlowDecision::Serve
                                                   : FlowDecision::Skip;
    case FlowControl::Kind::Latest:
      if (is_final || consumer_pending) return FlowDecision::Serve;
      return FlowDecision::Buffer;
  }
  throw Error("apply_flow_control: bad strategy");
}

/// M x N matrix of owner-part/target-part overlaps for one dataset shape.
/// Entry (m, n) is empty iff io-rank m and consumer rank n exchange nothing.
inline std::vector<std::vector<Selection>> transfer_matrix(
    const std::vector<uint64_t>& extents, int m_parts, int n_parts) {
  auto owners = decompose(extents, m_parts);
  auto targets = decompose(extents, n_parts);
  std::vector<std::vector<Selection>> mx(m_parts);
  for (int m = 0; m < m_parts; ++m) {
    mx[m].reserve(n_parts);
    for (int n = 0; n < n_parts; ++n) mx[m].push_back(intersect(owners[m], targets[n]));
  }
  return mx;
}

/// One matched (outport dset, inport dset) pattern pair on a channel, with
/// the transport realization taken from the consumer side.
struct ChannelPair {
  std::string out_pat, in_pat;
  bool memory = true;
  bool file = false;
};

/// Reply to a consumer's QUERY_MORE.
struct QueryReply {
  bool all_done = false;
  std::vector<std::string> files;
};

/// Runtime state of one link. Mutations happen under the fabric state mutex;
/// on the virtual clock the strict handoff already serializes them.
struct Channel {
  // static wiring
  int id = -1;
  int prod_start = 0, prod_nprocs = 0, w = 0;  // io ranks: prod_start..prod_start+w
  int cons_start = 0, cons_nprocs = 0;
  std::string prod_name, cons_name;
  std::string out_filename_pat, in_filename_pat;
  FlowControl fc;
  std::vector<ChannelPair> pairs;
  bool stateless_consumer = false;

  // serve-cycle bookkeeping
  std::vector<long> close_count;             // per io-rank serve points seen
  std::map<long, FlowDecision> decisions;    // cycle -> decision (first reporter)
  std::map<long, int> cycle_seq;             // cycle -> serve sequence number
  std::map<int, std::pair<std::string, long>> seq_file;  // seq -> (filename, cycle)
  int served = 0;                            // serve sequences assigned
  std::vector<long> ready_count;             // per consumer rank, cumulative
  std::vector<int> fetched;                  // per consumer rank, completed seq

  /// Snapshot parked by a Buffer decision, newest close only.
  struct ArmedState {
    long cycle = -1;
    std::string filename;
    std::vector<std::shared_ptr<const DataTree>> trees;  // size w
    std::vector<bool> have;
    bool any() const { return cycle >= 0; }
    bool complete() const {
      for (bool b : have)
        if (!b) return false;
      return cycle >= 0;
    }
  } armed;

  /// An in-flight channel-driven serve of the armed snapshot (the producer
  /// ranks are not occupied; piece requests are answered on delivery).
  struct ServiceState {
    bool open = false;
    int seq = 0;
    long cycle = -1;
    std::string filename;
    std::vector<std::shared_ptr<const DataTree>> trees;
    long expected_reqs = 0;
  } service;

  /// Newest closed-but-unserved snapshot per io-rank, for the final flush.
  struct Unserved {
    std::shared_ptr<const DataTree> tree;
    long cycle = -1;
    std::string filename;
  };
  std::vector<std::optional<Unserved>> last_unserved;

  // stateless consumer queries parked until the next decision
  std::vector<bool> parked;
  std::vector<std::optional<QueryReply>> query_reply;

  bool ended = false;
  std::vector<bool> io_done;

  // stats
  std::vector<long> consumed;   // cycles in serve order
  uint64_t payload_bytes = 0;
  uint64_t file_bytes = 0;
  long drops = 0;

  void init_dynamic() {
    close_count.assign(w, 0);
    ready_count.assign(cons_nprocs, 0);
    fetched.assign(cons_nprocs, 0);
    last_unserved.assign(w, std::nullopt);
    parked.assign(cons_nprocs, false);
    query_reply.assign(cons_nprocs, std::nullopt);
    io_done.assign(w, false);
  }

  bool all_ready_for(int seq) const {
    for (long r : ready_count)
      if (r < seq) return false;
    return true;
  }
  /// True iff every consumer rank has posted the READY for the next serve.
  bool consumer_pending() const { return all_ready_for(served + 1); }

  /// The matched pair a literal dataset path flows under, if any.
  const ChannelPair* pair_of(const std::string& dset_path) const {
    for (const auto& p : pairs)
      if (glob_match(p.out_pat, dset_path) && glob_match(p.in_pat, dset_path)) return &p;
    return nullptr;
  }
  /// True iff a literal filename satisfies both ends of the link.
  bool carries(const std::string& fname) const {
    return glob_match(out_filename_pat, fname) && glob_match(in_filename_pat, fname);
  }
};

}  // namespace situ
