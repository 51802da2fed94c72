#pragma once

/// @file runtime.hpp
/// @brief The workflow engine: runs task bodies on simulated ranks, couples
///        them through channels with serve-on-close / fetch-on-open
///        semantics, applies flow control, and collects the run report.

#include <algorithm>
#include <array>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "situ/config.hpp"
#include "situ/datamodel.hpp"
#include "situ/fabric.hpp"
#include "situ/glob.hpp"
#include "situ/graph.hpp"
#include "situ/report.hpp"
#include "situ/transport.hpp"

namespace situ {

class Engine;
class TaskContext;

// ---------------------------------------------------------------------------
// hooks

enum class HookPoint {
  BeforeFileOpen = 0,
  AfterFileOpen,
  BeforeFileClose,
  AfterFileClose,
  AfterDatasetWrite,
};
inline constexpr int hook_point_count = 5;

class ControlHandle;

/// Context handed to hook callbacks.
struct HookInfo {
  ControlHandle& vol;
  std::string filename;
  std::string dataset;        // AfterDatasetWrite only
  int local_rank = 0;
  long closes_of_file = 0;    // completed closes of this filename (pre-increment)
  long file_close_counter = 0;  // completed closes on this rank (pre-increment)
  long dataset_write_counter = 0;  // writes on this rank including this one
};

using HookFn = std::function<void(HookInfo&)>;

/// Per-rank control surface exposed to actions and bodies: hook
/// registration, the serve built-ins, and rank-local counters. The engine
/// owns one per rank; it stays alive across stateless re-invocations.
class ControlHandle {
public:
  void register_hook(HookPoint p, HookFn fn);
  void set_serve_on_close(bool on);

  /// Serves every closed-but-unserved tree (and any open tree with writes
  /// not yet shipped) on all outgoing channels, bypassing flow control.
  void serve_all();
  /// A flow-controlled serve point over the newest unserved closed tree.
  void serve_step();
  /// Rank 0 of the instance sends all retained trees to its peers; other
  /// ranks block until that delivery arrives.
  void broadcast_files();
  /// Drops retained trees and empties any open trees on this rank.
  void clear_files();

  int local_rank() const;
  int local_size() const;
  bool is_io_rank() const;
  long file_close_counter() const;
  long closes_of_file(const std::string& filename) const;
  long dataset_write_counter() const;

private:
  friend class Engine;
  ControlHandle(Engine* e, int rank) : eng_(e), rank_(rank) {}
  Engine* eng_;
  int rank_;
};

// ---------------------------------------------------------------------------
// task-facing API

enum class OpenMode { Truncate, Append };

/// One assembled dataset block from a fetch: this rank's decomposed part.
struct FetchBlock {
  std::string path;
  DType dtype{};
  std::vector<uint64_t> extents;  // global
  Selection sel;                  // this rank's part, global coordinates
  std::vector<std::byte> data;    // row-major for sel

  template <class T>
  std::vector<T> as() const {
    if (dtype_of<T>::value != dtype)
      throw Error("fetch block " + path + " read with wrong scalar type");
    std::vector<T> out(data.size() / sizeof(T));
    std::memcpy(out.data(), data.data(), data.size());
    return out;
  }
};

struct FetchResult {
  bool eos = false;
  std::string filename;
  long timestep = -1;
  std::vector<FetchBlock> blocks;

  const FetchBlock* block(const std::string& path) const {
    for (const auto& b : blocks)
      if (b.path == path) return &b;
    return nullptr;
  }
};

class FileHandle {
public:
  /// No-op on non-writer ranks (subset writers): the calls succeed and do
  /// nothing, mirroring collective I/O stacks where only io-ranks hit disk.
  void create_dataset(const std::string& path, DType dtype,
                      const std::vector<uint64_t>& extents);
  template <class T>
  void create_dataset(const std::string& path, const std::vector<uint64_t>& extents) {
    create_dataset(path, dtype_of<T>::value, extents);
  }
  void write(const std::string& path, const void* data, size_t bytes,
             const std::optional<Selection>& sel = std::nullopt);
  template <class T>
  void write(const std::string& path, const std::vector<T>& vals,
             const std::optional<Selection>& sel = std::nullopt) {
    write(path, vals.data(), vals.size() * sizeof(T), sel);
  }
  void close();
  bool active() const { return active_; }

private:
  friend class TaskContext;
  FileHandle(Engine* e, int rank, std::string name, bool active)
      : eng_(e), rank_(rank), name_(std::move(name)), active_(active) {}
  Engine* eng_;
  int rank_;
  std::string name_;
  bool active_;
  bool closed_ = false;
};

/// What a task body sees: its rank within the instance, its args, timed
/// compute, file I/O, and fetches. Deliberately no instance index, global
/// rank, or workflow topology — a body behaves identically however the
/// instance is embedded.
class TaskContext {
public:
  int local_rank() const;
  int local_size() const;
  bool is_io_rank() const;
  int io_index() const;   // -1 on non-writer ranks
  int writers() const;

  const std::map<std::string, ScalarValue>& args() const;
  int64_t arg_int(const std::string& key, int64_t dflt) const;
  double arg_num(const std::string& key, double dflt) const;
  std::string arg_str(const std::string& key, const std::string& dflt) const;

  void compute(double units, const std::string& label = "compute");
  ControlHandle& vol();

  FileHandle open_file(const std::string& name, OpenMode mode = OpenMode::Truncate);
  /// Concrete per-step filename derived from the first outport pattern:
  /// each '*' becomes the zero-padded step number.
  std::string step_filename(long step) const;
  /// This writer's part of the leading-dimension decomposition.
  Selection my_block(const std::vector<uint64_t>& extents) const;

  /// Next file from the linked channels (round-robin over live channels;
  /// unmatched file-only inports drain afterwards). eos when nothing is left.
  FetchResult fetch_file();

private:
  friend class Engine;
  TaskContext(Engine* e, int rank) : eng_(e), rank_(rank) {}
  Engine* eng_;
  int rank_;
  // stateless invocations get a single pre-assigned file
  int assigned_channel_ = -1;
  std::string assigned_file_;
  bool fetched_once_ = false;
};

// ---------------------------------------------------------------------------
// registries

enum class BodyKind { Stateful, Stateless };

struct TaskEntry {
  BodyKind kind = BodyKind::Stateful;
  std::function<void(TaskContext&)> body;
};

class TaskRegistry {
public:
  void add(const std::string& func, BodyKind kind, std::function<void(TaskContext&)> body) {
    map_[func] = TaskEntry{kind, std::move(body)};
  }
  const TaskEntry* find(const std::string& func) const {
    auto it = map_.find(func);
    return it == map_.end() ? nullptr : &it->second;
  }

private:
  std::map<std::string, TaskEntry> map_;
};

using ActionSetup = std::function<void(ControlHandle&, int local_rank)>;

class ActionRegistry {
public:
  void add(const std::string& script, const std::string& function, ActionSetup setup) {
    map_[{script, function}] = std::move(setup);
  }
  const ActionSetup* find(const std::pair<std::string, std::string>& key) const {
    auto it = map_.find(key);
    return it == map_.end() ? nullptr : &it->second;
  }

private:
  std::map<std::pair<std::string, std::string>, ActionSetup> map_;
};

// ---------------------------------------------------------------------------
// engine

class Engine {
public:
  struct Options {
    ClockKind clock = ClockKind::Virtual;
    double per_byte = 0;       // time units per transferred payload byte
    double latency = 0;        // time units per costed message
    double real_unit_ms = 1;   // wall milliseconds per unit (real clock)
    std::string data_dir = "situ_data";
    int log_level = -1;        // -1: read WLK_LOG from the environment
  };

  Engine(TaskGraph graph, TaskRegistry bodies, ActionRegistry actions)
      : Engine(std::move(graph), std::move(bodies), std::move(actions), Options{}) {}

  Engine(TaskGraph graph, TaskRegistry bodies, ActionRegistry actions, Options opt)
      : graph_(std::move(graph)), bodies_(std::move(bodies)),
        actions_(std::move(actions)), opt_(opt) {
    if (opt_.log_level < 0) {
      const char* v = std::getenv("WLK_LOG");
      opt_.log_level = v ? std::atoi(v) : 0;
    }
    build();
  }

  /// Runs the workflow to completion and returns the report. A failed run
  /// (body error, deadlock, unresolved names) yields ok=false plus the
  /// diagnostic, with whatever events were logged up to the failure.
  RunReport run() {
    if (ran_) throw Error("Engine::run may only be called once");
    ran_ = true;
    Fabric::Options fo;
    fo.clock = opt_.clock;
    fo.per_byte = opt_.per_byte;
    fo.latency = opt_.latency;
    fo.real_unit_ms = opt_.real_unit_ms;
    fab_.reset(new Fabric(fo));
    fab_->set_deliver_hook([this](Message& m) { return on_deliver(m); });
    for (int r = 0; r < graph_.total_ranks; ++r)
      fab_->add_worker([this, r](WorkerCtx& c) { worker_main(r, c); });
    bool ok = fab_->run();
    return assemble_report(ok);
  }

  const TaskGraph& graph() const { return graph_; }

private:
  friend class ControlHandle;
  friend class TaskContext;
  friend class FileHandle;

  struct RetainedFile {
    std::string filename;
    std::shared_ptr<const DataTree> tree;
    std::set<int> served_channels;
  };
  struct OpenFile {
    DataTree tree;
    long writes = 0;
    std::map<int, long> served_writes;  // per channel, for serve_all
  };
  struct FileInport {
    std::string filename_pat;
    std::vector<DsetSpec> dsets;
    std::vector<std::string> files;  // lazily listed
    size_t next = 0;
    bool listed = false;
  };
  struct RankState {
    int grank = 0, inst = 0, lrank = 0;
    bool io = false;
    int io_idx = -1;
    std::map<std::string, OpenFile> open;
    std::vector<RetainedFile> retained;  // close recency order
    std::array<std::vector<HookFn>, hook_point_count> hooks;
    bool serve_on_close = true;
    long file_close_counter = 0;
    std::map<std::string, long> closes_per_file;
    long dataset_writes = 0;
    long invocations = 0;
    std::vector<int> out_channels, in_channels;
    std::vector<FileInport> file_inports;
    size_t rr_next = 0;
    std::vector<bool> channel_eos;
    WorkerCtx* ctx = nullptr;
    std::unique_ptr<ControlHandle> handle;
  };

  TaskGraph graph_;
  TaskRegistry bodies_;
  ActionRegistry actions_;
  Options opt_;
  std::vector<std::unique_ptr<Channel>> channels_;
  std::vector<RankState> ranks_;
  std::unique_ptr<Fabric> fab_;
  bool ran_ = false;

  void debug(int level, const std::string& msg) const {
    if (opt_.log_level >= level) fmt::print(stderr, "[situ] {}\n", msg);
  }

  // ---- construction ----

  void build() {
    // channels from links
    for (const auto& l : graph_.links) {
      auto ch = std::make_unique<Channel>();
      const TaskInstance& pi = graph_.instances[l.producer];
      const TaskInstance& ci = graph_.instances[l.consumer];
      const TaskSpec& pt = graph_.spec.tasks[pi.task];
      const TaskSpec& ct = graph_.spec.tasks[ci.task];
      const PortSpec& op = pt.outports[l.producer_port];
      const PortSpec& ip = ct.inports[l.consumer_port];
      ch->id = l.id;
      ch->prod_start = pi.start_rank;
      ch->prod_nprocs = pi.nprocs;
      ch->w = pi.nwriters;
      ch->cons_start = ci.start_rank;
      ch->cons_nprocs = ci.nprocs;
      ch->prod_name = pi.name;
      ch->cons_name = ci.name;
      ch->out_filename_pat = op.filename;
      ch->in_filename_pat = ip.filename;
      for (auto [od, id] : l.dset_pairs) {
        const DsetSpec& ods = op.dsets[od];
        const DsetSpec& ids = ip.dsets[id];
        ch->pairs.push_back({ods.pattern, ids.pattern, ids.memory, ids.file});
      }
      ch->fc = strategy_of(ip.io_freq);
      if (const TaskEntry* te = bodies_.find(ct.func))
        ch->stateless_consumer = te->kind == BodyKind::Stateless;
      ch->init_dynamic();
      channels_.push_back(std::move(ch));
    }

    // rank plumbing
    ranks_.resize(graph_.total_ranks);
    for (size_t ii = 0; ii < graph_.instances.size(); ++ii) {
      const TaskInstance& ti = graph_.instances[ii];
      for (int lr = 0; lr < ti.nprocs; ++lr) {
        RankState& rs = ranks_[ti.start_rank + lr];
        rs.grank = ti.start_rank + lr;
        rs.inst = static_cast<int>(ii);
        rs.lrank = lr;
        rs.io = lr < ti.nwriters;
        rs.io_idx = rs.io ? lr : -1;
        rs.handle.reset(new ControlHandle(this, rs.grank));
      }
    }
    for (const auto& chp : channels_) {
      const Channel& ch = *chp;
      for (int k = 0; k < ch.w; ++k) ranks_[ch.prod_start + k].out_channels.push_back(ch.id);
      for (int c = 0; c < ch.cons_nprocs; ++c) ranks_[ch.cons_start + c].in_channels.push_back(ch.id);
    }
    for (auto& rs : ranks_) rs.channel_eos.assign(rs.in_channels.size(), false);

    // inports with no producer: file-driven reads
    std::set<std::pair<int, int>> matched;  // (consumer instance, port)
    for (const auto& l : graph_.links) matched.insert({l.consumer, l.consumer_port});
    for (size_t ii = 0; ii < graph_.instances.size(); ++ii) {
      const TaskInstance& ti = graph_.instances[ii];
      const TaskSpec& ts = graph_.spec.tasks[ti.task];
      for (size_t p = 0; p < ts.inports.size(); ++p) {
        if (matched.count({static_cast<int>(ii), static_cast<int>(p)})) continue;
        const PortSpec& ip = ts.inports[p];
        bool file_only = true;
        for (const auto& d : ip.dsets) file_only &= (d.file && !d.memory);
        if (!file_only)
          throw ConfigError(fmt::format(
              "task '{}' inport '{}' matches no outport and is not file-only",
              ti.name, ip.filename));
        for (int lr = 0; lr < ti.nprocs; ++lr)
          ranks_[ti.start_rank + lr].file_inports.push_back(
              FileInport{ip.filename, ip.dsets, {}, 0, false});
      }
    }
  }

  // ---- logging ----

  void log_ev(double t, int rank, EventKind k, const std::string& fname = "",
              long ts = -1, uint64_t bytes = 0, int channel = -1) {
    fab_->log_event(Event{t, rank, k, fname, ts, bytes, channel});
  }

  // ---- hook dispatch ----

  void fire_hooks(RankState& rs, HookPoint p, const std::string& filename,
                  const std::string& dataset = "") {
    auto& fns = rs.hooks[static_cast<int>(p)];
    if (fns.empty()) return;
    static constexpr EventKind evs[hook_point_count] = {
        EventKind::HookBeforeOpen, EventKind::HookAfterOpen, EventKind::HookBeforeClose,
        EventKind::HookAfterClose, EventKind::HookAfterWrite};
    log_ev(rs.ctx->now(), rs.grank, evs[static_cast<int>(p)], filename);
    HookInfo hi{*rs.handle, filename, dataset, rs.lrank,
                rs.closes_per_file.count(filename) ? rs.closes_per_file.at(filename) : 0,
                rs.file_close_counter, rs.dataset_writes};
    for (auto& fn : fns) fn(hi);
  }

  // ---- file API (producer side) ----

  void open_file(RankState& rs, const std::string& name, OpenMode mode) {
    if (!rs.io) return;
    if (rs.open.count(name)) throw Error("open_file: '" + name + "' is already open");
    fire_hooks(rs, HookPoint::BeforeFileOpen, name);
    OpenFile of;
    auto it = std::find_if(rs.retained.begin(), rs.retained.end(),
                           [&](const RetainedFile& r) { return r.filename == name; });
    if (mode == OpenMode::Append && it != rs.retained.end()) {
      of.tree = *it->tree;  // resume the retained contents
    }
    if (it != rs.retained.end()) rs.retained.erase(it);
    rs.open.emplace(name, std::move(of));
    log_ev(rs.ctx->now(), rs.grank, EventKind::FileOpen, name);
    fire_hooks(rs, HookPoint::AfterFileOpen, name);
  }

  void create_dataset(RankState& rs, const std::string& fname, const std::string& path,
                      DType dtype, const std::vector<uint64_t>& extents) {
    if (!rs.io) return;
    open_of(rs, fname).tree.create_dataset(path, dtype, extents);
  }

  void write_dataset(RankState& rs, const std::string& fname, const std::string& path,
                     const void* data, size_t bytes, const std::optional<Selection>& sel) {
    if (!rs.io) return;
    OpenFile& of = open_of(rs, fname);
    auto& d = of.tree.dataset(path);
    Selection s = sel ? *sel : Selection::full(d.extents);
    if (!s.empty()) of.tree.write_selection(path, s, data, bytes);
    of.writes++;
    rs.dataset_writes++;
    log_ev(rs.ctx->now(), rs.grank, EventKind::DatasetWrite, fname, -1,
           s.elements() * dtype_size(d.dtype));
    fire_hooks(rs, HookPoint::AfterDatasetWrite, fname, path);
  }

  void close_file(RankState& rs, const std::string& fname) {
    if (!rs.io) return;
    if (!rs.open.count(fname)) throw Error("close_file: '" + fname + "' is not open");
    fire_hooks(rs, HookPoint::BeforeFileClose, fname);
    OpenFile of = std::move(rs.open.at(fname));
    rs.open.erase(fname);
    auto snap = std::make_shared<const DataTree>(std::move(of.tree));
    auto it = std::find_if(rs.retained.begin(), rs.retained.end(),
                           [&](const RetainedFile& r) { return r.filename == fname; });
    if (it != rs.retained.end()) rs.retained.erase(it);
    rs.retained.push_back(RetainedFile{fname, snap, {}});
    log_ev(rs.ctx->now(), rs.grank, EventKind::FileClose, fname);
    if (rs.serve_on_close)
      serve_point(rs, fname, snap, &rs.retained.back(), &of);
    fire_hooks(rs, HookPoint::AfterFileClose, fname);
    rs.file_close_counter++;
    rs.closes_per_file[fname]++;
  }

  OpenFile& open_of(RankState& rs, const std::string& fname) {
    auto it = rs.open.find(fname);
    if (it == rs.open.end()) throw Error("file '" + fname + "' is not open");
    return it->second;
  }

  // ---- serve side ----

  void serve_point(RankState& rs, const std::string& fname,
                   std::shared_ptr<const DataTree> snap, RetainedFile* ent,
                   const OpenFile* closed) {
    for (int cid : rs.out_channels) {
      Channel& ch = *channels_[cid];
      if (!ch.carries(fname)) continue;
      if (closed) {  // everything already shipped by a serve_all snapshot
        auto it = closed->served_writes.find(cid);
        if (it != closed->served_writes.end() && it->second >= closed->writes) {
          if (ent) ent->served_channels.insert(cid);
          continue;
        }
      }
      serve_point_on_channel(rs, ch, fname, snap, ent);
    }
  }

  void serve_point_on_channel(RankState& rs, Channel& ch, const std::string& fname,
                              std::shared_ptr<const DataTree> snap, RetainedFile* ent) {
    WorkerCtx& c = *rs.ctx;
    FlowDecision d;
    long cycle;
    int seq = -1;
    {
      std::lock_guard<std::recursive_mutex> lk(fab_->state_mutex());
      cycle = ++ch.close_count[rs.io_idx];
      auto dit = ch.decisions.find(cycle);
      if (dit == ch.decisions.end()) {
        d = apply_flow_control(ch.fc, cycle, ch.consumer_pending(), false);
        ch.decisions.emplace(cycle, d);
        static constexpr EventKind dev[] = {EventKind::DecisionServe, EventKind::DecisionSkip,
                                            EventKind::DecisionBuffer};
        log_ev(c.now(), rs.grank, dev[static_cast<int>(d)], fname, cycle, 0, ch.id);
        if (d == FlowDecision::Serve) {
          seq = assign_serve(ch, cycle, fname, c.now());
        } else if (d == FlowDecision::Buffer) {
          arm_cycle(ch, cycle, fname, rs.grank, c.now());
        }
      } else {
        d = dit->second;
        if (d == FlowDecision::Serve) seq = ch.cycle_seq.at(cycle);
        if (d == FlowDecision::Buffer && ch.armed.cycle != cycle)
          arm_cycle(ch, cycle, fname, rs.grank, c.now());
      }
      if (d == FlowDecision::Buffer) {
        ch.armed.trees[rs.io_idx] = snap;
        ch.armed.have[rs.io_idx] = true;
        maybe_start_service(ch, c.now());
      } else if (d == FlowDecision::Skip) {
        ch.last_unserved[rs.io_idx] = Channel::Unserved{snap, cycle, fname};
      } else {
        ch.last_unserved[rs.io_idx].reset();
      }
    }
    fab_->wake_blocked(c.now());
    fab_->notify_state();
    if (d == FlowDecision::Serve) {
      blocking_serve(rs, ch, seq, fname, cycle, snap);
      if (ent) ent->served_channels.insert(ch.id);
    }
  }

  /// Registers serve sequence @p seq for @p cycle; answers parked queries.
  /// Caller holds the state mutex.
  int assign_serve(Channel& ch, long cycle, const std::string& fname, double now) {
    int seq = ++ch.served;
    ch.cycle_seq[cycle] = seq;
    ch.seq_file[seq] = {fname, cycle};
    ch.consumed.push_back(cycle);
    answer_parked(ch, QueryReply{false, {fname}}, now);
    return seq;
  }

  /// Replaces the armed snapshot with a fresh cycle; counts the drop.
  /// Caller holds the state mutex.
  void arm_cycle(Channel& ch, long cycle, const std::string& fname, int rank, double now) {
    if (ch.armed.cycle >= 0 && ch.armed.cycle != cycle) {
      ch.drops++;
      log_ev(now, rank, EventKind::Drop, ch.armed.filename, ch.armed.cycle, 0, ch.id);
    }
    ch.armed.cycle = cycle;
    ch.armed.filename = fname;
    ch.armed.trees.assign(ch.w, nullptr);
    ch.armed.have.assign(ch.w, false);
    answer_parked(ch, QueryReply{false, {fname}}, now);
  }

  /// Serves the armed snapshot the moment the full READY set exists. Runs
  /// inline in whichever thread completed the set; producers stay busy.
  /// Caller holds the state mutex.
  void maybe_start_service(Channel& ch, double now) {
    if (ch.fc.kind != FlowControl::Kind::Latest) return;
    if (ch.service.open || !ch.armed.complete()) return;
    if (!ch.all_ready_for(ch.served + 1)) return;
    const long cycle = ch.armed.cycle;
    const std::string fname = ch.armed.filename;
    log_ev(now, ch.prod_start, EventKind::DecisionServe, fname, cycle, 0, ch.id);
    int seq = assign_serve(ch, cycle, fname, now);
    ch.service.open = true;
    ch.service.seq = seq;
    ch.service.cycle = cycle;
    ch.service.filename = fname;
    ch.service.trees = std::move(ch.armed.trees);
    ch.service.expected_reqs = 0;
    ch.armed = Channel::ArmedState{};
    for (int io = 0; io < ch.w; ++io) {
      auto items = build_ownership(ch, io, *ch.service.trees[io], fname);
      for (const auto& item : items) {
        if (!item.memory) continue;
        auto targets = decompose(item.extents, ch.cons_nprocs);
        for (int cl = 0; cl < ch.cons_nprocs; ++cl)
          if (!intersect(item.owned, targets[cl]).empty()) ch.service.expected_reqs++;
      }
      for (int cl = 0; cl < ch.cons_nprocs; ++cl) {
        Message m;
        m.kind = MsgKind::Ownership;
        m.src = ch.prod_start + io;
        m.dst = ch.cons_start + cl;
        m.channel = ch.id;
        m.serve_seq = seq;
        m.timestep = cycle;
        m.filename = fname;
        m.items = items;
        log_ev(now, m.src, EventKind::Ownership, fname, cycle, 0, ch.id);
        fab_->post(std::move(m), now);
      }
    }
    if (ch.service.expected_reqs == 0) ch.service.open = false;
  }

  /// Builds this io-rank's ownership items for the matched datasets of a
  /// snapshot; spills a container when any matched dset is file-realized.
  std::vector<OwnershipItem> build_ownership(Channel& ch, int io, const DataTree& tree,
                                             const std::string& fname) {
    if (tree.empty())
      throw Error(fmt::format("serving empty tree '{}' on channel {} ({} -> {}): "
                              "contents were cleared or never written",
                              fname, ch.id, ch.prod_name, ch.cons_name));
    std::vector<OwnershipItem> items;
    bool any_file = false;
    for (const auto& e : tree.list()) {
      if (e.is_group) continue;
      const ChannelPair* p = ch.pair_of(e.path);
      if (!p) continue;
      OwnershipItem it;
      it.path = e.path;
      it.dtype = e.dset->dtype;
      it.extents = e.dset->extents;
      it.owned = decompose(e.dset->extents, ch.w)[io];
      it.memory = p->memory;
      it.file = p->file;
      any_file |= p->file;
      items.push_back(std::move(it));
    }
    if (any_file) {
      std::filesystem::create_directories(opt_.data_dir);
      std::string cpath = fmt::format("{}/{}.{}.r{}", opt_.data_dir, fname, ch.prod_name, io);
      auto bytes = serialize_tree(tree);
      std::ofstream out(cpath, std::ios::binary | std::ios::trunc);
      out.write(reinterpret_cast<const char*>(bytes.data()),
                static_cast<std::streamsize>(bytes.size()));
      if (!out) throw Error("container spill failed: " + cpath);
      ch.file_bytes += bytes.size();
      log_ev(fab_->worker_now(ch.prod_start + io), ch.prod_start + io, EventKind::FileSpill,
             cpath, -1, bytes.size(), ch.id);
      for (auto& it : items)
        if (it.file) it.container = cpath;
    }
    return items;
  }

  /// The worker-driven serve: wait for the READY set, advertise ownership,
  /// answer this rank's piece requests.
  void blocking_serve(RankState& rs, Channel& ch, int seq, const std::string& fname,
                      long cycle, std::shared_ptr<const DataTree> snap) {
    WorkerCtx& c = *rs.ctx;
    c.wait([&] { return ch.all_ready_for(seq); }, "consumer ready set");
    auto items = build_ownership(ch, rs.io_idx, *snap, fname);
    long expected = 0;
    for (const auto& item : items) {
      if (!item.memory) continue;
      auto targets = decompose(item.extents, ch.cons_nprocs);
      for (int cl = 0; cl < ch.cons_nprocs; ++cl)
        if (!intersect(item.owned, targets[cl]).empty()) expected++;
    }
    for (int cl = 0; cl < ch.cons_nprocs; ++cl) {
      Message m;
      m.kind = MsgKind::Ownership;
      m.dst = ch.cons_start + cl;
      m.channel = ch.id;
      m.serve_seq = seq;
      m.timestep = cycle;
      m.filename = fname;
      m.items = items;
      log_ev(c.now(), rs.grank, EventKind::Ownership, fname, cycle, 0, ch.id);
      c.send(std::move(m));
    }
    while (expected-- > 0) {
      Message req = c.receive(
          [&](const Message& m) {
            return m.kind == MsgKind::PieceReq && m.channel == ch.id && m.serve_seq == seq;
          },
          "piece requests");
      Message rep;
      rep.kind = MsgKind::Piece;
      rep.dst = req.src;
      rep.channel = ch.id;
      rep.serve_seq = seq;
      rep.timestep = cycle;
      rep.filename = fname;
      rep.path = req.path;
      rep.sel = req.sel;
      rep.payload = snap->read_selection(req.path, req.sel);
      rep.bytes = rep.payload.size();
      {
        std::lock_guard<std::recursive_mutex> lk(fab_->state_mutex());
        ch.payload_bytes += rep.bytes;
      }
      log_ev(c.now(), rs.grank, EventKind::Piece, fname, cycle, rep.bytes, ch.id);
      c.send(std::move(rep));
    }
  }

  /// Caller holds the state mutex.
  void answer_parked(Channel& ch, const QueryReply& r, double now) {
    for (int cl = 0; cl < ch.cons_nprocs; ++cl) {
      if (!ch.parked[cl]) continue;
      ch.parked[cl] = false;
      ch.query_reply[cl] = r;
      log_ev(now, ch.prod_start, r.all_done ? EventKind::AllDone : EventKind::More,
             r.files.empty() ? "" : r.files[0], -1, 0, ch.id);
    }
  }

  // ---- consumer side ----

  struct Pending {
    DataTree scratch;  // one dataset "/b" shaped like the target
    Selection target;
  };

  FetchResult fetch_channel(RankState& rs, Channel& ch) {
    WorkerCtx& c = *rs.ctx;
    const int cl = rs.grank - ch.cons_start;
    int seq;
    {
      std::lock_guard<std::recursive_mutex> lk(fab_->state_mutex());
      seq = ch.fetched[cl] + 1;
      ch.ready_count[cl]++;
      log_ev(c.now(), rs.grank, EventKind::Ready, "", -1, 0, ch.id);
      maybe_start_service(ch, c.now());
    }
    fab_->wake_blocked(c.now());
    fab_->notify_state();
    std::vector<Message> owns;
    while (static_cast<int>(owns.size()) < ch.w) {
      Message m = c.receive(
          [&](const Message& m) {
            if (m.channel != ch.id) return false;
            return (m.kind == MsgKind::Ownership && m.serve_seq == seq) ||
                   m.kind == MsgKind::End;
          },
          "served data");
      if (m.kind == MsgKind::End) {
        if (!owns.empty()) throw Error("channel ended between ownership messages");
        return FetchResult{true, "", -1, {}};
      }
      owns.push_back(std::move(m));
    }
    std::sort(owns.begin(), owns.end(),
              [](const Message& a, const Message& b) { return a.src < b.src; });
    FetchResult out;
    out.filename = owns[0].filename;
    out.timestep = owns[0].timestep;

    // group ownership items by dataset path, preserving first-seen order
    std::vector<std::string> paths;
    std::map<std::string, std::vector<std::pair<int, const OwnershipItem*>>> by_path;
    for (const auto& m : owns)
      for (const auto& it : m.items) {
        if (!by_path.count(it.path)) paths.push_back(it.path);
        by_path[it.path].emplace_back(m.src, &it);
      }

    std::map<std::string, Pending> blocks;
    long expected = 0;
    for (const auto& path : paths) {
      const auto& owners = by_path[path];
      const OwnershipItem& first = *owners[0].second;
      Selection target = decompose(first.extents, ch.cons_nprocs)[cl];
      Pending pend;
      pend.target = target;
      pend.scratch.create_dataset("/b", first.dtype, target.count);
      for (const auto& [src, item] : owners) {
        Selection inter = intersect(item->owned, target);
        if (inter.empty()) continue;
        if (item->memory) {
          Message rq;
          rq.kind = MsgKind::PieceReq;
          rq.dst = src;
          rq.channel = ch.id;
          rq.serve_seq = seq;
          rq.path = path;
          rq.sel = inter;
          log_ev(c.now(), rs.grank, EventKind::PieceReq, out.filename, out.timestep, 0, ch.id);
          c.send(std::move(rq));
          expected++;
        } else {
          place_from_container(rs, ch, *item, inter, pend, path, out.filename);
        }
      }
      blocks.emplace(path, std::move(pend));
    }
    while (expected-- > 0) {
      Message p = c.receive(
          [&](const Message& m) {
            return m.kind == MsgKind::Piece && m.channel == ch.id && m.serve_seq == seq;
          },
          "piece payloads");
      Pending& pend = blocks.at(p.path);
      Selection rel = relative_to(p.sel, pend.target);
      pend.scratch.write_selection("/b", rel, p.payload.data(), p.payload.size());
    }
    {
      std::lock_guard<std::recursive_mutex> lk(fab_->state_mutex());
      ch.fetched[cl] = seq;
    }
    for (const auto& path : paths) {
      Pending& pend = blocks.at(path);
      const OwnershipItem& first = *by_path[path][0].second;
      FetchBlock b;
      b.path = path;
      b.dtype = first.dtype;
      b.extents = first.extents;
      b.sel = pend.target;
      b.data = std::move(pend.scratch.dataset("/b").data);
      out.blocks.push_back(std::move(b));
    }
    return out;
  }

  static Selection relative_to(const Selection& abs, const Selection& base) {
    Selection r = abs;
    for (size_t d = 0; d < r.rank(); ++d) {
      if (r.offset[d] < base.offset[d]) throw Error("piece outside target block");
      r.offset[d] -= base.offset[d];
    }
    return r;
  }

  static std::vector<std::byte> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot read container: " + path);
    std::vector<char> tmp((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
    std::vector<std::byte> raw(tmp.size());
    std::memcpy(raw.data(), tmp.data(), tmp.size());
    return raw;
  }

  /// Reads a file-realized dataset part out of the producer's spilled
  /// container instead of requesting it over the wire.
  void place_from_container(RankState& rs, Channel& ch, const OwnershipItem& item,
                            const Selection& inter, Pending& pend, const std::string& path,
                            const std::string& fname) {
    std::vector<std::byte> raw = read_file_bytes(item.container);
    DataTree t = deserialize_tree(raw.data(), raw.size());
    auto part = t.read_selection(path, inter);
    Selection rel = relative_to(inter, pend.target);
    pend.scratch.write_selection("/b", rel, part.data(), part.size());
    log_ev(rs.ctx->now(), rs.grank, EventKind::FileRead, item.container, -1, raw.size(), ch.id);
  }

  QueryReply query_channel(RankState& rs, Channel& ch) {
    WorkerCtx& c = *rs.ctx;
    const int cl = rs.grank - ch.cons_start;
    {
      std::lock_guard<std::recursive_mutex> lk(fab_->state_mutex());
      log_ev(c.now(), rs.grank, EventKind::QueryMore, "", -1, 0, ch.id);
      if (auto r = try_answer(ch, cl)) {
        log_ev(c.now(), ch.prod_start, r->all_done ? EventKind::AllDone : EventKind::More,
               r->files.empty() ? "" : r->files[0], -1, 0, ch.id);
        return *r;
      }
      ch.parked[cl] = true;
    }
    c.wait([&] { return ch.query_reply[cl].has_value(); }, "more files");
    std::lock_guard<std::recursive_mutex> lk(fab_->state_mutex());
    QueryReply r = *ch.query_reply[cl];
    ch.query_reply[cl].reset();
    return r;
  }

  /// Caller holds the state mutex.
  std::optional<QueryReply> try_answer(Channel& ch, int cl) {
    if (ch.served > ch.fetched[cl])
      return QueryReply{false, {ch.seq_file.at(ch.fetched[cl] + 1).first}};
    if (ch.ended) return QueryReply{true, {}};
    if (ch.fc.kind == FlowControl::Kind::Latest && ch.armed.any())
      return QueryReply{false, {ch.armed.filename}};
    return std::nullopt;
  }

  // ---- teardown ----

  void final_flush(RankState& rs) {
    WorkerCtx& c = *rs.ctx;
    for (int cid : rs.out_channels) {
      Channel& ch = *channels_[cid];
      std::shared_ptr<const DataTree> tree;
      long cycle = -1;
      std::string fname;
      int seq = -1;
      {
        std::lock_guard<std::recursive_mutex> lk(fab_->state_mutex());
        if (ch.armed.any() && ch.armed.have[rs.io_idx]) {
          tree = ch.armed.trees[rs.io_idx];
          cycle = ch.armed.cycle;
          fname = ch.armed.filename;
          ch.armed.have[rs.io_idx] = false;
          ch.armed.trees[rs.io_idx] = nullptr;
          bool none = true;
          for (bool b : ch.armed.have) none &= !b;
          if (none) ch.armed = Channel::ArmedState{};
        } else if (ch.last_unserved[rs.io_idx]) {
          tree = ch.last_unserved[rs.io_idx]->tree;
          cycle = ch.last_unserved[rs.io_idx]->cycle;
          fname = ch.last_unserved[rs.io_idx]->filename;
          ch.last_unserved[rs.io_idx].reset();
        }
        if (tree) {
          auto sit = ch.cycle_seq.find(cycle);
          if (sit != ch.cycle_seq.end()) {
            seq = sit->second;
          } else {
            FlowDecision d = apply_flow_control(ch.fc, cycle, ch.consumer_pending(), true);
            (void)d;  // final flush always serves
            log_ev(c.now(), rs.grank, EventKind::Flush, fname, cycle, 0, ch.id);
            log_ev(c.now(), rs.grank, EventKind::DecisionServe, fname, cycle, 0, ch.id);
            seq = assign_serve(ch, cycle, fname, c.now());
          }
        }
      }
      if (tree) {
        fab_->wake_blocked(c.now());
        fab_->notify_state();
        blocking_serve(rs, ch, seq, fname, cycle, tree);
      }
      bool finalize = false;
      {
        std::lock_guard<std::recursive_mutex> lk(fab_->state_mutex());
        ch.io_done[rs.io_idx] = true;
        finalize = true;
        for (bool b : ch.io_done) finalize &= b;
        if (finalize && !ch.ended) {
          ch.ended = true;
          answer_parked(ch, QueryReply{true, {}}, c.now());
        } else {
          finalize = false;
        }
      }
      if (finalize) {
        for (int cl2 = 0; cl2 < ch.cons_nprocs; ++cl2) {
          Message m;
          m.kind = MsgKind::End;
          m.dst = ch.cons_start + cl2;
          m.channel = ch.id;
          log_ev(c.now(), rs.grank, EventKind::End, "", -1, 0, ch.id);
          c.send(std::move(m));
        }
        fab_->wake_blocked(c.now());
        fab_->notify_state();
      }
    }
  }

  // ---- control-handle operations ----

  void do_serve_all(RankState& rs) {
    if (!rs.io) return;
    for (int cid : rs.out_channels) {
      Channel& ch = *channels_[cid];
      for (auto& ent : rs.retained) {
        if (!ch.carries(ent.filename) || ent.served_channels.count(cid)) continue;
        forced_serve(rs, ch, ent.filename, ent.tree);
        ent.served_channels.insert(cid);
      }
      for (auto& [fname, of] : rs.open) {
        if (!ch.carries(fname)) continue;
        long& done = of.served_writes[cid];
        if (of.writes <= done || of.tree.empty()) continue;
        auto snap = std::make_shared<const DataTree>(of.tree);
        forced_serve(rs, ch, fname, snap);
        done = of.writes;
      }
    }
  }

  void forced_serve(RankState& rs, Channel& ch, const std::string& fname,
                    std::shared_ptr<const DataTree> snap) {
    WorkerCtx& c = *rs.ctx;
    long cycle;
    int seq;
    {
      std::lock_guard<std::recursive_mutex> lk(fab_->state_mutex());
      cycle = ++ch.close_count[rs.io_idx];
      auto sit = ch.cycle_seq.find(cycle);
      if (sit != ch.cycle_seq.end()) {
        seq = sit->second;
      } else {
        ch.decisions.emplace(cycle, FlowDecision::Serve);
        log_ev(c.now(), rs.grank, EventKind::DecisionServe, fname, cycle, 0, ch.id);
        seq = assign_serve(ch, cycle, fname, c.now());
      }
      ch.last_unserved[rs.io_idx].reset();
    }
    fab_->wake_blocked(c.now());
    fab_->notify_state();
    blocking_serve(rs, ch, seq, fname, cycle, snap);
  }

  void do_serve_step(RankState& rs) {
    if (!rs.io) return;
    for (int cid : rs.out_channels) {
      Channel& ch = *channels_[cid];
      RetainedFile* pick = nullptr;
      for (auto it = rs.retained.rbegin(); it != rs.retained.rend(); ++it) {
        if (ch.carries(it->filename) && !it->served_channels.count(cid)) {
          pick = &*it;
          break;
        }
      }
      if (!pick) continue;
      serve_point_on_channel(rs, ch, pick->filename, pick->tree, pick);
    }
  }

  void do_broadcast(RankState& rs) {
    WorkerCtx& c = *rs.ctx;
    const TaskInstance& ti = graph_.instances[rs.inst];
    if (rs.lrank == 0) {
      if (rs.retained.empty())
        throw Error("broadcast_files: no retained trees on local rank 0");
      std::vector<std::pair<std::string, std::shared_ptr<const DataTree>>> trees;
      uint64_t bytes = 0;
      for (const auto& ent : rs.retained) {
        trees.emplace_back(ent.filename, ent.tree);
        for (const auto& e : ent.tree->list())
          if (!e.is_group) bytes += e.dset->data.size();
      }
      for (int lr = 1; lr < ti.nprocs; ++lr) {
        Message m;
        m.kind = MsgKind::Bcast;
        m.dst = ti.start_rank + lr;
        m.trees = trees;
        m.bytes = bytes;
        log_ev(c.now(), rs.grank, EventKind::Bcast, trees[0].first, -1, bytes);
        c.send(std::move(m));
      }
    } else {
      Message m = c.receive([](const Message& m) { return m.kind == MsgKind::Bcast; },
                            "broadcast from local rank 0");
      for (auto& [fname, tree] : m.trees) {
        auto it = std::find_if(rs.retained.begin(), rs.retained.end(),
                               [&](const RetainedFile& r) { return r.filename == fname; });
        if (it != rs.retained.end()) rs.retained.erase(it);
        rs.retained.push_back(RetainedFile{fname, tree, {}});
      }
    }
  }

  void do_clear(RankState& rs) {
    rs.retained.clear();
    for (auto& [fname, of] : rs.open) {
      of.tree.clear();
      of.served_writes.clear();
    }
  }

  // ---- drivers ----

  void worker_main(int grank, WorkerCtx& c) {
    RankState& rs = ranks_[grank];
    rs.ctx = &c;
    const TaskInstance& ti = graph_.instances[rs.inst];
    const TaskSpec& ts = graph_.spec.tasks[ti.task];
    log_ev(c.now(), grank, EventKind::TaskStart, ti.name);
    if (ts.actions) {
      const ActionSetup* setup = actions_.find(*ts.actions);
      if (!setup)
        throw Error(fmt::format("unresolved action [{}, {}] for task '{}'",
                                ts.actions->first, ts.actions->second, ts.func));
      (*setup)(*rs.handle, rs.lrank);
    }
    const TaskEntry* te = bodies_.find(ts.func);
    if (!te) throw Error(fmt::format("unresolved task body '{}'", ts.func));
    if (te->kind == BodyKind::Stateful) {
      TaskContext ctx(this, grank);
      rs.invocations++;
      te->body(ctx);
      final_flush(rs);
    } else {
      if (!rs.out_channels.empty())
        throw Error(fmt::format("stateless task '{}' cannot produce", ts.func));
      stateless_driver(rs, *te);
    }
    log_ev(c.now(), grank, EventKind::TaskEnd, ti.name);
  }

  void stateless_driver(RankState& rs, const TaskEntry& te) {
    std::vector<int> live = rs.in_channels;
    size_t i = 0;
    while (!live.empty()) {
      if (i >= live.size()) i = 0;
      Channel& ch = *channels_[live[i]];
      QueryReply qr = query_channel(rs, ch);
      if (qr.all_done) {
        live.erase(live.begin() + static_cast<long>(i));
        continue;
      }
      for (const auto& f : qr.files) {
        TaskContext ctx(this, rs.grank);
        ctx.assigned_channel_ = ch.id;
        ctx.assigned_file_ = f;
        rs.invocations++;
        te.body(ctx);
      }
      ++i;
    }
  }

  FetchResult stateful_fetch(RankState& rs) {
    const size_t n = rs.in_channels.size();
    for (size_t tries = 0; tries < n; ++tries) {
      size_t idx = (rs.rr_next + tries) % n;
      if (rs.channel_eos[idx]) continue;
      Channel& ch = *channels_[rs.in_channels[idx]];
      FetchResult r = fetch_channel(rs, ch);
      if (r.eos) {
        rs.channel_eos[idx] = true;
        continue;
      }
      rs.rr_next = idx + 1;
      return r;
    }
    return fetch_file_inports(rs);
  }

  /// Drains containers sitting in the data directory for inports that have
  /// no producer. Files must be named by their logical filename.
  FetchResult fetch_file_inports(RankState& rs) {
    const TaskInstance& ti = graph_.instances[rs.inst];
    for (auto& fi : rs.file_inports) {
      if (!fi.listed) {
        fi.listed = true;
        std::error_code ec;
        std::filesystem::directory_iterator dit(opt_.data_dir, ec), dend;
        for (; !ec && dit != dend; dit.increment(ec)) {
          if (!dit->is_regular_file()) continue;
          std::string base = dit->path().filename().string();
          if (glob_match(fi.filename_pat, base)) fi.files.push_back(base);
        }
        std::sort(fi.files.begin(), fi.files.end());
      }
      if (fi.next >= fi.files.size()) continue;
      std::string base = fi.files[fi.next++];
      std::vector<std::byte> raw = read_file_bytes(opt_.data_dir + "/" + base);
      DataTree t = deserialize_tree(raw.data(), raw.size());
      log_ev(rs.ctx->now(), rs.grank, EventKind::FileRead, base, -1, raw.size());
      FetchResult out;
      out.filename = base;
      out.timestep = static_cast<long>(fi.next) - 1;
      for (const auto& e : t.list()) {
        if (e.is_group) continue;
        bool want = false;
        for (const auto& d : fi.dsets) want |= glob_match(d.pattern, e.path);
        if (!want) continue;
        Selection target = decompose(e.dset->extents, ti.nprocs)[rs.lrank];
        FetchBlock b;
        b.path = e.path;
        b.dtype = e.dset->dtype;
        b.extents = e.dset->extents;
        b.sel = target;
        b.data = t.read_selection(e.path, target);
        out.blocks.push_back(std::move(b));
      }
      return out;
    }
    return FetchResult{true, "", -1, {}};
  }

  // ---- latest-mode service: answers piece requests for busy producers ----

  bool on_deliver(Message& m) {
    if (m.kind != MsgKind::PieceReq || m.channel < 0) return false;
    Channel& ch = *channels_[m.channel];
    if (!ch.service.open || m.serve_seq != ch.service.seq) return false;
    const int io = m.dst - ch.prod_start;
    Message rep;
    rep.kind = MsgKind::Piece;
    rep.src = m.dst;
    rep.dst = m.src;
    rep.channel = ch.id;
    rep.serve_seq = m.serve_seq;
    rep.timestep = ch.service.cycle;
    rep.filename = ch.service.filename;
    rep.path = m.path;
    rep.sel = m.sel;
    rep.payload = ch.service.trees[io]->read_selection(m.path, m.sel);
    rep.bytes = rep.payload.size();
    ch.payload_bytes += rep.bytes;
    log_ev(m.arrival, rep.src, EventKind::Piece, rep.filename, rep.timestep, rep.bytes, ch.id);
    fab_->post(std::move(rep), m.arrival);
    if (--ch.service.expected_reqs == 0) {
      ch.service.open = false;
      ch.service.trees.clear();
    }
    return true;
  }

  // ---- run & report ----

  RunReport assemble_report(bool ok) {
    RunReport rep;
    rep.ok = ok;
    rep.error = fab_->error();
    rep.clock = opt_.clock == ClockKind::Virtual ? "virtual" : "real";
    rep.total_ranks = graph_.total_ranks;
    rep.events = fab_->events();
    std::stable_sort(rep.events.begin(), rep.events.end(),
                     [](const Event& a, const Event& b) { return a.time < b.time; });
    rep.segments = fab_->segments();
    double completion = 0;
    for (const auto& e : rep.events) completion = std::max(completion, e.time);
    for (const auto& s : rep.segments) completion = std::max(completion, s.end);
    for (int r = 0; r < graph_.total_ranks; ++r)
      completion = std::max(completion, fab_->worker_now(r));
    rep.completion_time = completion;
    if (ok) {
      for (int r = 0; r < graph_.total_ranks; ++r) {
        double done = fab_->worker_now(r);
        if (done + 1e-12 < completion)
          rep.segments.push_back(
              Segment{Segment::Kind::Idle, r, done, completion, "drained"});
      }
    }
    std::stable_sort(rep.segments.begin(), rep.segments.end(),
                     [](const Segment& a, const Segment& b) {
                       return a.rank != b.rank ? a.rank < b.rank : a.start < b.start;
                     });
    for (int r = 0; r < graph_.total_ranks; ++r) {
      const RankState& rs = ranks_[r];
      RankStats st;
      st.rank = r;
      st.instance = graph_.instances[rs.inst].name;
      st.local_rank = rs.lrank;
      st.io_rank = rs.io;
      st.invocations = rs.invocations;
      rep.ranks.push_back(st);
    }
    for (const auto& s : rep.segments) {
      RankStats& st = rep.ranks[s.rank];
      double d = s.end - s.start;
      if (s.kind == Segment::Kind::Compute) st.compute += d;
      else if (s.kind == Segment::Kind::Idle) st.idle += d;
      else st.transfer += d;
    }
    for (const auto& chp : channels_) {
      const Channel& ch = *chp;
      ChannelStats cs;
      cs.id = ch.id;
      cs.producer = ch.prod_name;
      cs.consumer = ch.cons_name;
      cs.filename_pattern = ch.out_filename_pat;
      cs.flow = flow_name(ch.fc);
      cs.consumed = ch.consumed;
      cs.payload_bytes = ch.payload_bytes;
      cs.file_bytes = ch.file_bytes;
      cs.drops = ch.drops;
      cs.serves = ch.served;
      rep.channels.push_back(std::move(cs));
    }
    return rep;
  }

public:
  // exposed for white-box tests and the overhead baseline
  Fabric* fabric() { return fab_.get(); }
};

// ---------------------------------------------------------------------------
// inline implementations that need Engine complete

inline void ControlHandle::register_hook(HookPoint p, HookFn fn) {
  eng_->ranks_[rank_].hooks[static_cast<int>(p)].push_back(std::move(fn));
}
inline void ControlHandle::set_serve_on_close(bool on) {
  eng_->ranks_[rank_].serve_on_close = on;
}
inline void ControlHandle::serve_all() { eng_->do_serve_all(eng_->ranks_[rank_]); }
inline void ControlHandle::serve_step() { eng_->do_serve_step(eng_->ranks_[rank_]); }
inline void ControlHandle::broadcast_files() { eng_->do_broadcast(eng_->ranks_[rank_]); }
inline void ControlHandle::clear_files() { eng_->do_clear(eng_->ranks_[rank_]); }
inline int ControlHandle::local_rank() const { return eng_->ranks_[rank_].lrank; }
inline int ControlHandle::local_size() const {
  return eng_->graph_.instances[eng_->ranks_[rank_].inst].nprocs;
}
inline bool ControlHandle::is_io_rank() const { return eng_->ranks_[rank_].io; }
inline long ControlHandle::file_close_counter() const {
  return eng_->ranks_[rank_].file_close_counter;
}
inline long ControlHandle::closes_of_file(const std::string& filename) const {
  const auto& m = eng_->ranks_[rank_].closes_per_file;
  auto it = m.find(filename);
  return it == m.end() ? 0 : it->second;
}
inline long ControlHandle::dataset_write_counter() const {
  return eng_->ranks_[rank_].dataset_writes;
}

inline void FileHandle::create_dataset(const std::string& path, DType dtype,
                                       const std::vector<uint64_t>& extents) {
  if (!active_ || closed_) return;
  eng_->create_dataset(eng_->ranks_[rank_], name_, path, dtype, extents);
}
inline void FileHandle::write(const std::string& path, const void* data, size_t bytes,
                              const std::optional<Selection>& sel) {
  if (!active_ || closed_) return;
  eng_->write_dataset(eng_->ranks_[rank_], name_, path, data, bytes, sel);
}
inline void FileHandle::close() {
  if (closed_) return;
  closed_ = true;
  if (!active_) return;
  eng_->close_file(eng_->ranks_[rank_], name_);
}

inline int TaskContext::local_rank() const { return eng_->ranks_[rank_].lrank; }
inline int TaskContext::local_size() const {
  return eng_->graph_.instances[eng_->ranks_[rank_].inst].nprocs;
}
inline bool TaskContext::is_io_rank() const { return eng_->ranks_[rank_].io; }
inline int TaskContext::io_index() const { return eng_->ranks_[rank_].io_idx; }
inline int TaskContext::writers() const {
  return eng_->graph_.instances[eng_->ranks_[rank_].inst].nwriters;
}
inline const std::map<std::string, ScalarValue>& TaskContext::args() const {
  const auto& rs = eng_->ranks_[rank_];
  return eng_->graph_.spec.tasks[eng_->graph_.instances[rs.inst].task].args;
}
inline int64_t TaskContext::arg_int(const std::string& key, int64_t dflt) const {
  return situ::arg_int(args(), key, dflt);
}
inline double TaskContext::arg_num(const std::string& key, double dflt) const {
  return situ::arg_num(args(), key, dflt);
}
inline std::string TaskContext::arg_str(const std::string& key, const std::string& dflt) const {
  return situ::arg_str(args(), key, dflt);
}
inline void TaskContext::compute(double units, const std::string& label) {
  eng_->ranks_[rank_].ctx->compute(units, label);
}
inline ControlHandle& TaskContext::vol() { return *eng_->ranks_[rank_].handle; }
inline FileHandle TaskContext::open_file(const std::string& name, OpenMode mode) {
  auto& rs = eng_->ranks_[rank_];
  if (rs.io) eng_->open_file(rs, name, mode);
  return FileHandle(eng_, rank_, name, rs.io);
}
inline std::string TaskContext::step_filename(long step) const {
  const auto& rs = eng_->ranks_[rank_];
  const TaskSpec& ts = eng_->graph_.spec.tasks[eng_->graph_.instances[rs.inst].task];
  if (ts.outports.empty()) throw Error("step_filename: task has no outports");
  std::string pat = ts.outports[0].filename;
  std::string num = fmt::format("{:05d}", step);
  std::string out;
  for (char ch : pat)
    if (ch == '*') out += num;
    else out += ch;
  return out;
}
inline Selection TaskContext::my_block(const std::vector<uint64_t>& extents) const {
  const auto& rs = eng_->ranks_[rank_];
  if (!rs.io) {
    Selection s = Selection::full(extents);
    s.count[0] = 0;
    return s;
  }
  return decompose(extents, writers())[rs.io_idx];
}
inline FetchResult TaskContext::fetch_file() {
  auto& rs = eng_->ranks_[rank_];
  if (assigned_channel_ >= 0) {
    if (fetched_once_) throw Error("stateless body fetched more than once per invocation");
    fetched_once_ = true;
    return eng_->fetch_channel(rs, *eng_->channels_[assigned_channel_]);
  }
  return eng_->stateful_fetch(rs);
}

}  // namespace situ
