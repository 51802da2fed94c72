#pragma once

/// @file harness.hpp
/// @brief Synthetic task bodies, registered actions, and the benchmark
///        scenarios: flow control, ensembles, subset writers, the
///        double-close pattern, and the engine-overhead comparison.
///
/// Every body writes deterministic formula data and every consumer verifies
/// it element-exact, so a scenario cannot pass with wrong redistribution.

#include <chrono>
#include <cstdint>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "situ/runtime.hpp"

namespace situ::harness {

// ---------------------------------------------------------------------------
// payload formulas

inline uint64_t grid_value(long t, uint64_t i) { return (uint64_t)t * 1000000000ull + i; }
inline float particle_value(uint64_t i, uint64_t comp) { return float(i) + 0.25f * comp; }
inline double density_value(long t, uint64_t i) { return double(t) + 0.001 * double(i); }
inline int64_t meta_value(long t, uint64_t i) { return (int64_t)t * (int64_t)(i + 1); }

// ---------------------------------------------------------------------------
// verification (first-diff diagnostics)

namespace detail {

template <class T, class F>
void check_block(const FetchResult& r, const FetchBlock& b, F&& want) {
  auto vals = b.template as<T>();
  const size_t cols = b.sel.rank() == 2 ? b.sel.count[1] : 1;
  for (size_t e = 0; e < vals.size(); ++e) {
    uint64_t row = b.sel.offset[0] + (cols ? e / cols : 0);
    uint64_t comp = b.sel.rank() == 2 ? b.sel.offset[1] + e % cols : 0;
    T w = want(row, comp);
    if (vals[e] != w)
      throw Error(fmt::format(
          "data mismatch {}[{}] (row {}, comp {}): got {} want {} (file '{}', step {})",
          b.path, e, row, comp, vals[e], w, r.filename, r.timestep));
  }
}

}  // namespace detail

/// Verifies every dataset block of a fetch against the producer formulas.
/// Unknown dataset paths and empty fetches are errors.
inline void verify_fetch(const FetchResult& r) {
  if (r.blocks.empty())
    throw Error(fmt::format("fetch of '{}' carried no datasets", r.filename));
  const long t = r.timestep;
  for (const auto& b : r.blocks) {
    if (b.path == "/group1/grid" || b.path == "/particles/id")
      detail::check_block<uint64_t>(r, b, [&](uint64_t i, uint64_t) { return grid_value(t, i); });
    else if (b.path == "/group1/particles" || b.path == "/particles/position")
      detail::check_block<float>(r, b,
                                 [&](uint64_t i, uint64_t c) { return particle_value(i, c); });
    else if (b.path == "/level_0/density")
      detail::check_block<double>(r, b, [&](uint64_t i, uint64_t) { return density_value(t, i); });
    else if (b.path == "/meta/step")
      detail::check_block<int64_t>(r, b, [&](uint64_t i, uint64_t) { return meta_value(t, i); });
    else
      throw Error(fmt::format("no verification formula for dataset '{}'", b.path));
  }
}

// ---------------------------------------------------------------------------
// task bodies

/// Grid + particles writer: one file per step, each writer rank fills its
/// leading-dimension block. Global extents scale with the instance size so
/// the same body serves any nprocs.
inline void producer_body(TaskContext& ctx) {
  const long T = ctx.arg_int("steps", 10);
  const double pc = ctx.arg_num("compute", 2);
  const uint64_t g = (uint64_t)ctx.arg_int("grid", 256);
  const uint64_t p = (uint64_t)ctx.arg_int("particles", 64);
  const uint64_t ng = g * ctx.local_size();
  const uint64_t np = p * ctx.local_size();
  for (long t = 1; t <= T; ++t) {
    ctx.compute(pc, "sim");
    auto f = ctx.open_file(ctx.step_filename(t));
    f.create_dataset<uint64_t>("/group1/grid", {ng});
    auto gb = ctx.my_block({ng});
    std::vector<uint64_t> gv(gb.elements());
    for (size_t i = 0; i < gv.size(); ++i) gv[i] = grid_value(t, gb.offset[0] + i);
    f.write("/group1/grid", gv, gb);
    if (np > 0) {
      f.create_dataset<float>("/group1/particles", {np, 3});
      auto pb = ctx.my_block({np, 3});
      std::vector<float> pv(pb.elements());
      for (uint64_t row = 0; row < pb.count[0]; ++row)
        for (uint64_t c = 0; c < 3; ++c)
          pv[row * 3 + c] = particle_value(pb.offset[0] + row, c);
      f.write("/group1/particles", pv, pb);
    }
    f.close();
  }
}

/// Molecular-dynamics analog: same shape as producer_body but under the
/// /particles tree, one literal filename reused across steps.
inline void md_body(TaskContext& ctx) {
  const long T = ctx.arg_int("steps", 5);
  const double pc = ctx.arg_num("compute", 1);
  const uint64_t p = (uint64_t)ctx.arg_int("particles", 16);
  const uint64_t np = p * ctx.local_size();
  for (long t = 1; t <= T; ++t) {
    ctx.compute(pc, "md");
    auto f = ctx.open_file(ctx.step_filename(t));
    f.create_dataset<uint64_t>("/particles/id", {np});
    auto ib = ctx.my_block({np});
    std::vector<uint64_t> iv(ib.elements());
    for (size_t i = 0; i < iv.size(); ++i) iv[i] = grid_value(t, ib.offset[0] + i);
    f.write("/particles/id", iv, ib);
    f.create_dataset<float>("/particles/position", {np, 3});
    auto pb = ctx.my_block({np, 3});
    std::vector<float> pv(pb.elements());
    for (uint64_t row = 0; row < pb.count[0]; ++row)
      for (uint64_t c = 0; c < 3; ++c)
        pv[row * 3 + c] = particle_value(pb.offset[0] + row, c);
    f.write("/particles/position", pv, pb);
    f.close();
  }
}

/// Cosmology analog, the double-close pattern: rank 0 writes metadata and
/// closes (the action broadcasts it), then every rank appends its density
/// block and closes (the action serves once). One serve point per step.
inline void amr_body(TaskContext& ctx) {
  const long T = ctx.arg_int("steps", 20);
  const double pc = ctx.arg_num("compute", 1);
  const uint64_t g = (uint64_t)ctx.arg_int("grid", 32);
  const uint64_t ng = g * ctx.local_size();
  for (long t = 1; t <= T; ++t) {
    ctx.compute(pc, "amr");
    const std::string name = ctx.step_filename(t);
    if (ctx.local_rank() == 0) {
      auto meta = ctx.open_file(name);
      meta.create_dataset<int64_t>("/meta/step", {2});
      std::vector<int64_t> mv{meta_value(t, 0), meta_value(t, 1)};
      meta.write("/meta/step", mv);
      meta.close();  // close #1: metadata broadcast, no serve
    }
    auto f = ctx.open_file(name, OpenMode::Append);  // ranks != 0 receive here
    f.create_dataset<double>("/level_0/density", {ng});
    auto db = ctx.my_block({ng});
    std::vector<double> dv(db.elements());
    for (size_t i = 0; i < dv.size(); ++i) dv[i] = density_value(t, db.offset[0] + i);
    f.write("/level_0/density", dv, db);
    f.close();  // close #2: flow-controlled serve point
  }
}

/// Stateful verifying reader: fetch until end-of-stream, verify, compute.
inline void consumer_body(TaskContext& ctx) {
  const double cc = ctx.arg_num("compute", 10);
  while (true) {
    FetchResult r = ctx.fetch_file();
    if (r.eos) break;
    verify_fetch(r);
    ctx.compute(cc, "analysis");
  }
}

/// Stateless verifying reader: one file per invocation.
inline void consumer_once_body(TaskContext& ctx) {
  FetchResult r = ctx.fetch_file();
  if (r.eos) return;
  verify_fetch(r);
  ctx.compute(ctx.arg_num("compute", 10), "analysis");
}

// ---------------------------------------------------------------------------
// registries

/// All synthetic bodies under the names the sample configs use.
inline TaskRegistry default_bodies() {
  TaskRegistry reg;
  reg.add("producer", BodyKind::Stateful, producer_body);
  reg.add("freeze", BodyKind::Stateful, md_body);
  reg.add("nyx", BodyKind::Stateful, amr_body);
  for (const char* name : {"consumer", "consumer1", "consumer2", "detector", "reeber"})
    reg.add(name, BodyKind::Stateful, consumer_body);
  reg.add("consumer_stateless", BodyKind::Stateless, consumer_once_body);
  return reg;
}

/// The two registered actions the sample workflows reference.
inline ActionRegistry default_actions() {
  ActionRegistry acts;
  // ships data after every 2nd dataset write instead of at close
  acts.add("actions", "every_2_writes", [](ControlHandle& vol, int) {
    vol.register_hook(HookPoint::AfterDatasetWrite, [](HookInfo& h) {
      if (h.dataset_write_counter % 2 == 0) h.vol.serve_all();
    });
  });
  // double-close protocol: broadcast metadata at close #1 on rank 0, serve
  // once per step at the final close on every rank
  acts.add("actions", "nyx", [](ControlHandle& vol, int local_rank) {
    vol.set_serve_on_close(false);
    if (local_rank != 0)
      vol.register_hook(HookPoint::BeforeFileOpen,
                        [](HookInfo& h) { h.vol.broadcast_files(); });
    vol.register_hook(HookPoint::AfterFileClose, [local_rank](HookInfo& h) {
      if (local_rank == 0 && h.closes_of_file == 0) {
        h.vol.broadcast_files();
      } else {
        h.vol.serve_step();
        h.vol.clear_files();
      }
    });
  });
  return acts;
}

// ---------------------------------------------------------------------------
// scenarios

struct ScenarioResult {
  std::string scenario;
  nlohmann::json params;
  bool ok = false;
  std::string error;
  double completion_time = 0;
  nlohmann::json metrics;
  RunReport report;
};

inline nlohmann::json scenario_to_json(const ScenarioResult& r) {
  nlohmann::json chans = nlohmann::json::array();
  for (const auto& c : r.report.channels)
    chans.push_back({{"id", c.id},
                     {"producer", c.producer},
                     {"consumer", c.consumer},
                     {"flow", c.flow},
                     {"consumed", c.consumed},
                     {"payload_bytes", c.payload_bytes},
                     {"file_bytes", c.file_bytes},
                     {"drops", c.drops},
                     {"serves", c.serves}});
  return nlohmann::json{{"scenario", r.scenario}, {"params", r.params},
                        {"ok", r.ok},             {"error", r.error},
                        {"completion_time", r.completion_time}, {"metrics", r.metrics},
                        {"channels", chans}};
}

namespace detail {

inline PortSpec port(const std::string& filename, std::vector<std::string> dsets,
                     int io_freq = 0) {
  PortSpec p;
  p.filename = filename;
  p.io_freq = io_freq;
  for (auto& d : dsets) p.dsets.push_back(DsetSpec{d, true, false});
  return p;
}

inline ScenarioResult run_scenario(const std::string& name, nlohmann::json params,
                                   const WorkflowSpec& spec, Engine::Options opt = {}) {
  ScenarioResult res;
  res.scenario = name;
  res.params = std::move(params);
  try {
    Engine eng(build_graph(spec), default_bodies(), default_actions(), opt);
    res.report = eng.run();
    res.ok = res.report.ok;
    res.error = res.report.error;
    res.completion_time = res.report.completion_time;
  } catch (const std::exception& e) {
    res.ok = false;
    res.error = e.what();
  }
  return res;
}

}  // namespace detail

/// Producer coupled to a 2x/5x/10x slower consumer under a flow-control
/// strategy; virtual clock, zero transfer cost, T=10 steps.
inline ScenarioResult scenario_flow_control(int slowdown, FlowControl::Kind kind) {
  const int freq = kind == FlowControl::Kind::All    ? 0
                   : kind == FlowControl::Kind::Some ? slowdown
                                                     : -1;
  WorkflowSpec spec;
  TaskSpec prod;
  prod.func = "producer";
  prod.nprocs = 2;
  prod.args = {{"steps", int64_t{10}}, {"compute", int64_t{2}},
               {"grid", int64_t{16}},  {"particles", int64_t{8}}};
  prod.outports = {detail::port("outfile*.h5", {"/group1/grid", "/group1/particles"})};
  TaskSpec cons;
  cons.func = "consumer";
  cons.nprocs = 2;
  cons.args = {{"compute", int64_t{2 * slowdown}}};
  cons.inports = {detail::port("outfile*.h5", {"/group1/grid", "/group1/particles"}, freq)};
  spec.tasks = {prod, cons};
  auto res = detail::run_scenario(
      "flow_control",
      {{"slowdown", slowdown}, {"strategy", flow_name(strategy_of(freq))}}, spec);
  if (res.ok) {
    const auto& c = res.report.channels[0];
    res.metrics = {{"consumed", c.consumed}, {"drops", c.drops}, {"serves", c.serves}};
  }
  return res;
}

/// Ensemble topologies under a per-byte transfer cost, so byte counters and
/// transfer time dominate. topology: "fanout", "fanin", or "nxn".
inline ScenarioResult scenario_ensembles(const std::string& topology, int instances) {
  WorkflowSpec spec;
  TaskSpec prod;
  prod.func = "producer";
  prod.nprocs = 2;
  prod.task_count = topology == "fanout" ? 1 : instances;
  prod.args = {{"steps", int64_t{3}}, {"compute", int64_t{1}},
               {"grid", int64_t{16}}, {"particles", int64_t{8}}};
  prod.outports = {detail::port("outfile*.h5", {"/group1/grid", "/group1/particles"})};
  TaskSpec cons;
  cons.func = "consumer";
  cons.nprocs = 2;
  cons.task_count = topology == "fanin" ? 1 : instances;
  cons.args = {{"compute", int64_t{1}}};
  cons.inports = {detail::port("outfile*.h5", {"/group1/grid", "/group1/particles"}, 0)};
  spec.tasks = {prod, cons};
  Engine::Options opt;
  opt.per_byte = 1.0;
  auto res = detail::run_scenario("ensembles",
                                  {{"topology", topology}, {"instances", instances}},
                                  spec, opt);
  if (res.ok) {
    uint64_t total = 0;
    nlohmann::json per_channel = nlohmann::json::array();
    for (const auto& c : res.report.channels) {
      total += c.payload_bytes;
      per_channel.push_back(c.payload_bytes);
    }
    res.metrics = {{"channels", res.report.channels.size()},
                   {"total_payload_bytes", total},
                   {"per_channel_bytes", per_channel}};
  }
  return res;
}

/// Subset-writer ensemble: simulation gathers I/O onto instance rank 0
/// (nwriters=1) in an NxN coupling with a parallel detector.
inline ScenarioResult scenario_lammps(int task_count) {
  WorkflowSpec spec;
  TaskSpec sim;
  sim.func = "freeze";
  sim.nprocs = 4;
  sim.nwriters = 1;
  sim.task_count = task_count;
  sim.args = {{"steps", int64_t{5}}, {"compute", int64_t{1}}, {"particles", int64_t{16}}};
  sim.outports = {detail::port("dump-h5md.h5", {"/particles/*"})};
  TaskSpec det;
  det.func = "detector";
  det.nprocs = 2;
  det.task_count = task_count;
  det.args = {{"compute", int64_t{2}}};
  det.inports = {detail::port("dump-h5md.h5", {"/particles/*"}, 0)};
  spec.tasks = {sim, det};
  auto res = detail::run_scenario("lammps_pattern", {{"taskCount", task_count}}, spec);
  if (res.ok) {
    // ranks that originated any channel traffic
    std::set<int> origins;
    for (const auto& e : res.report.events)
      if (e.kind == EventKind::Ownership || e.kind == EventKind::Piece ||
          e.kind == EventKind::FileSpill)
        origins.insert(e.rank);
    res.metrics = {{"traffic_origin_ranks", std::vector<int>(origins.begin(), origins.end())}};
  }
  return res;
}

/// Double-close cosmology pattern at desk scale: 8-rank simulation with the
/// registered "nyx" action, 2-rank analysis slowed 50x, T=20 snapshots.
inline ScenarioResult scenario_nyx(int io_freq) {
  WorkflowSpec spec;
  TaskSpec sim;
  sim.func = "nyx";
  sim.nprocs = 8;
  sim.actions = std::make_pair(std::string("actions"), std::string("nyx"));
  sim.args = {{"steps", int64_t{20}}, {"compute", int64_t{1}}, {"grid", int64_t{32}}};
  sim.outports = {detail::port("plt*.h5", {"/level_0/density", "/meta/step"})};
  TaskSpec ana;
  ana.func = "reeber";
  ana.nprocs = 2;
  ana.args = {{"compute", int64_t{50}}};
  ana.inports = {detail::port("plt*.h5", {"/level_0/density", "/meta/step"}, io_freq)};
  spec.tasks = {sim, ana};
  auto res = detail::run_scenario("nyx_pattern", {{"io_freq", io_freq}}, spec);
  if (res.ok) {
    long closes_rank0 = 0, bcasts = 0;
    for (const auto& e : res.report.events) {
      closes_rank0 += e.rank == 0 && e.kind == EventKind::FileClose;
      bcasts += e.kind == EventKind::Bcast;
    }
    const auto& c = res.report.channels[0];
    res.metrics = {{"consumed", c.consumed},
                   {"serves", c.serves},
                   {"rank0_closes", closes_rank0},
                   {"broadcast_messages", bcasts}};
  }
  return res;
}

// ---------------------------------------------------------------------------
// overhead comparison (real clock)

struct OverheadResult {
  double engine_ms = 0;    // mean over trials
  double baseline_ms = 0;  // mean over trials
  double ratio = 0;
  int trials = 0;
  bool ok = false;
  std::string error;
};

namespace detail {

inline double wall_ms_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
      .count();
}

}  // namespace detail

/// Real-clock engine run of a 4+4-rank coupled workload versus a direct
/// send/receive baseline on the same fabric with no engine layers.
inline OverheadResult scenario_overhead(int trials = 3, long steps = 10,
                                        uint64_t grid = 10000, double unit_ms = 5) {
  OverheadResult out;
  out.trials = trials;
  const int half = 4;
  const double pc = 2, cc = 2;

  WorkflowSpec spec;
  TaskSpec prod;
  prod.func = "producer";
  prod.nprocs = half;
  prod.args = {{"steps", steps}, {"compute", int64_t{2}},
               {"grid", (int64_t)grid}, {"particles", int64_t{0}}};
  prod.outports = {detail::port("outfile*.h5", {"/group1/grid"})};
  TaskSpec cons;
  cons.func = "consumer";
  cons.nprocs = half;
  cons.args = {{"compute", int64_t{2}}};
  cons.inports = {detail::port("outfile*.h5", {"/group1/grid"}, 0)};
  spec.tasks = {prod, cons};

  try {
    for (int trial = 0; trial < trials; ++trial) {
      {
        Engine::Options opt;
        opt.clock = ClockKind::Real;
        opt.real_unit_ms = unit_ms;
        Engine eng(build_graph(spec), default_bodies(), default_actions(), opt);
        auto t0 = std::chrono::steady_clock::now();
        RunReport rep = eng.run();
        out.engine_ms += detail::wall_ms_since(t0);
        if (!rep.ok) throw Error("engine overhead run failed: " + rep.error);
      }
      {
        Fabric::Options fo;
        fo.clock = ClockKind::Real;
        fo.real_unit_ms = unit_ms;
        Fabric fab(fo);
        for (int r = 0; r < half; ++r)
          fab.add_worker([&, r](WorkerCtx& c) {
            std::vector<std::byte> payload(grid * sizeof(uint64_t));
            for (long t = 1; t <= steps; ++t) {
              c.compute(pc, "sim");
              Message m;
              m.kind = MsgKind::Piece;
              m.dst = half + r;
              m.payload = payload;
              m.bytes = payload.size();
              c.send(std::move(m));
            }
            Message fin;
            fin.kind = MsgKind::End;
            fin.dst = half + r;
            c.send(std::move(fin));
          });
        for (int r = 0; r < half; ++r)
          fab.add_worker([&](WorkerCtx& c) {
            while (true) {
              Message m = c.receive([](const Message&) { return true; }, "payload");
              if (m.kind == MsgKind::End) break;
              c.compute(cc, "analysis");
            }
          });
        auto t0 = std::chrono::steady_clock::now();
        if (!fab.run()) throw Error("baseline overhead run failed: " + fab.error());
        out.baseline_ms += detail::wall_ms_since(t0);
      }
    }
    out.engine_ms /= trials;
    out.baseline_ms /= trials;
    out.ratio = out.baseline_ms > 0 ? out.engine_ms / out.baseline_ms : 0;
    out.ok = true;
  } catch (const std::exception& e) {
    out.ok = false;
    out.error = e.what();
  }
  return out;
}

}  // namespace situ::harness
