#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <map>
#include <set>

#include <situ/harness.hpp>
#include <situ/situ.hpp>

using namespace situ;

// ---------------------------------------------------------------------------
// independent schedule oracle: two lockstep rank groups, serve = rendezvous,
// zero transfer cost

namespace {

struct Sched {
  double completion = 0;
  std::vector<long> consumed;
  long drops = 0;
};

// All / Some(n): producer blocks at each serve point until the consumer is
// ready; skipped closes cost nothing.
Sched step_oracle(const FlowControl& fc, double pc, double cc, long T) {
  Sched s;
  double prod = 0, cons = 0;
  for (long t = 1; t <= T; ++t) {
    prod += pc;
    const bool serve =
        fc.kind == FlowControl::Kind::All || t % fc.n == 0 || t == T;
    if (!serve) continue;
    const double tau = std::max(prod, cons);
    prod = tau;
    cons = tau + cc;
    s.consumed.push_back(t);
  }
  s.completion = std::max(prod, cons);
  return s;
}

// Latest: the producer never blocks; a serve happens when the consumer is
// ready, taking the newest closed snapshot, or waiting for the next close.
Sched latest_oracle(double pc, double cc, long T) {
  Sched s;
  std::vector<double> close(T + 1);
  for (long t = 1; t <= T; ++t) close[t] = pc * t;
  double ready = 0;
  long last = 0;
  while (last != T) {
    long newest = 0;
    for (long t = last + 1; t <= T; ++t)
      if (close[t] <= ready) newest = t;
    long c;
    double when;
    if (newest > last) {
      c = newest;
      when = ready;
    } else {
      c = last + 1;
      when = std::max(close[c], ready);
    }
    s.consumed.push_back(c);
    last = c;
    ready = when + cc;
  }
  s.completion = std::max(ready, close[T]);
  s.drops = T - (long)s.consumed.size();
  return s;
}

Sched oracle(const FlowControl& fc, double pc, double cc, long T) {
  return fc.kind == FlowControl::Kind::Latest ? latest_oracle(pc, cc, T)
                                              : step_oracle(fc, pc, cc, T);
}

// per-rank segments must partition [0, completion]
void check_gantt_partition(const RunReport& rep) {
  std::map<int, std::vector<Segment>> per;
  for (const auto& s : rep.segments) per[s.rank].push_back(s);
  REQUIRE((int)per.size() == rep.total_ranks);
  for (auto& [rank, segs] : per) {
    std::sort(segs.begin(), segs.end(),
              [](const Segment& a, const Segment& b) { return a.start < b.start; });
    double at = 0;
    for (const auto& s : segs) {
      CHECK(s.start == Catch::Approx(at).margin(1e-9));
      CHECK(s.end >= s.start);
      at = s.end;
    }
    CHECK(at == Catch::Approx(rep.completion_time).margin(1e-9));
  }
}

}  // namespace

TEST_CASE("flow-control schedules match the independent oracle") {
  for (int slow : {2, 5, 10}) {
    for (auto kind : {FlowControl::Kind::All, FlowControl::Kind::Some,
                      FlowControl::Kind::Latest}) {
      INFO("slowdown " << slow << " strategy " << (int)kind);
      auto res = harness::scenario_flow_control(slow, kind);
      REQUIRE(res.ok);
      const FlowControl fc = kind == FlowControl::Kind::All    ? strategy_of(0)
                             : kind == FlowControl::Kind::Some ? strategy_of(slow)
                                                               : strategy_of(-1);
      const Sched want = oracle(fc, 2, 2.0 * slow, 10);
      CHECK(res.completion_time == want.completion);
      CHECK(res.metrics.at("consumed").get<std::vector<long>>() == want.consumed);
      CHECK(res.metrics.at("drops").get<long>() == want.drops);
      check_gantt_partition(res.report);
    }
  }
}

TEST_CASE("every serve carries verified data end to end") {
  // three-task shape: one producer feeding two consumers different datasets
  WorkflowSpec w = parse_workflow(R"(tasks:
  - func: producer
    nprocs: 3
    args: {steps: 3, compute: 1, grid: 8, particles: 4}
    outports:
      - filename: outfile*.h5
        dsets: [{name: /group1/grid}, {name: /group1/particles}]
  - func: consumer1
    nprocs: 5
    args: {compute: 1}
    inports:
      - filename: outfile*.h5
        dsets: [{name: /group1/grid}]
  - func: consumer2
    nprocs: 2
    args: {compute: 1}
    inports:
      - filename: outfile*.h5
        dsets: [{name: /group1/particles}]
)");
  Engine eng(build_graph(w), harness::default_bodies(), harness::default_actions());
  RunReport rep = eng.run();
  REQUIRE(rep.ok);
  REQUIRE(rep.channels.size() == 2);
  for (const auto& c : rep.channels) {
    CHECK(c.consumed == std::vector<long>{1, 2, 3});
    CHECK(c.payload_bytes > 0);
  }
  check_gantt_partition(rep);
  // consumer1 only sees grid bytes: 8*3 u64; consumer2 4*3 x3 f32
  CHECK(rep.channels[0].payload_bytes == 3 * 24 * 8);
  CHECK(rep.channels[1].payload_bytes == 3 * 12 * 3 * 4);
}

TEST_CASE("subset writers route all traffic through the io ranks") {
  WorkflowSpec w = parse_workflow(R"(tasks:
  - func: freeze
    nprocs: 3
    nwriters: 1
    args: {steps: 2, compute: 1, particles: 6}
    outports:
      - filename: dump-h5md.h5
        dsets: [{name: /particles/*}]
  - func: detector
    nprocs: 2
    args: {compute: 1}
    inports:
      - filename: dump-h5md.h5
        dsets: [{name: /particles/*}]
)");
  Engine eng(build_graph(w), harness::default_bodies(), harness::default_actions());
  RunReport rep = eng.run();
  REQUIRE(rep.ok);
  for (const auto& e : rep.events)
    if (e.kind == EventKind::Ownership || e.kind == EventKind::Piece)
      CHECK(e.rank == 0);  // ranks 1,2 are non-writers
  CHECK(rep.channels[0].consumed == std::vector<long>{1, 2});
}

TEST_CASE("hook points fire in lifecycle order with lifecycle counters") {
  static std::vector<std::string> trace;  // engine threads append under handoff
  trace.clear();
  TaskRegistry bodies;
  bodies.add("writer", BodyKind::Stateful, [](TaskContext& ctx) {
    for (long t = 1; t <= 2; ++t) {
      auto f = ctx.open_file("trc.h5");
      f.create_dataset<int32_t>("/d", {4});
      std::vector<int32_t> v{1, 2, 3, 4};
      f.write("/d", v);
      f.close();
    }
  });
  bodies.add("reader", BodyKind::Stateful, [](TaskContext& ctx) {
    while (!ctx.fetch_file().eos) {}
  });
  ActionRegistry acts;
  acts.add("t", "trace", [](ControlHandle& vol, int) {
    vol.register_hook(HookPoint::BeforeFileOpen, [](HookInfo& h) {
      trace.push_back(fmt::format("bfo:{}:{}", h.filename, h.closes_of_file));
    });
    vol.register_hook(HookPoint::AfterFileOpen,
                      [](HookInfo& h) { trace.push_back("afo:" + h.filename); });
    vol.register_hook(HookPoint::AfterDatasetWrite, [](HookInfo& h) {
      trace.push_back(fmt::format("adw:{}:{}", h.dataset, h.dataset_write_counter));
    });
    vol.register_hook(HookPoint::BeforeFileClose, [](HookInfo& h) {
      trace.push_back(fmt::format("bfc:{}:{}", h.filename, h.closes_of_file));
    });
    vol.register_hook(HookPoint::AfterFileClose, [](HookInfo& h) {
      trace.push_back(fmt::format("afc:{}:{}:{}", h.filename, h.closes_of_file,
                                  h.file_close_counter));
    });
  });
  WorkflowSpec w = parse_workflow(R"(tasks:
  - func: writer
    nprocs: 1
    actions: [t, trace]
    outports: [{filename: trc.h5, dsets: [{name: /d}]}]
  - func: reader
    nprocs: 1
    inports: [{filename: trc.h5, dsets: [{name: /d}]}]
)");
  Engine eng(build_graph(w), bodies, acts);
  RunReport rep = eng.run();
  REQUIRE(rep.ok);
  CHECK(trace == std::vector<std::string>{
                     "bfo:trc.h5:0", "afo:trc.h5", "adw:/d:1", "bfc:trc.h5:0",
                     "afc:trc.h5:0:0",  // counters increment after the afc hook
                     "bfo:trc.h5:1", "afo:trc.h5", "adw:/d:2", "bfc:trc.h5:1",
                     "afc:trc.h5:1:1"});
}

TEST_CASE("explicit serves suppress the close-time serve of the same writes") {
  // ship after every 2nd write (grid, then particles completes the pair)
  WorkflowSpec w = parse_workflow(R"(tasks:
  - func: producer
    nprocs: 2
    actions: [actions, every_2_writes]
    args: {steps: 4, compute: 1, grid: 8, particles: 4}
    outports:
      - filename: outfile*.h5
        dsets: [{name: /group1/grid}, {name: /group1/particles}]
  - func: consumer
    nprocs: 2
    args: {compute: 1}
    inports:
      - filename: outfile*.h5
        dsets: [{name: /group1/grid}, {name: /group1/particles}]
)");
  Engine eng(build_graph(w), harness::default_bodies(), harness::default_actions());
  RunReport rep = eng.run();
  REQUIRE(rep.ok);
  // one serve per step from the action; the close adds nothing
  CHECK(rep.channels[0].serves == 4);
  CHECK(rep.channels[0].consumed == std::vector<long>{1, 2, 3, 4});
}

TEST_CASE("serving a cleared tree is an error naming the file") {
  TaskRegistry bodies;
  bodies.add("writer", BodyKind::Stateful, [](TaskContext& ctx) {
    auto f = ctx.open_file("void.h5");
    f.create_dataset<int32_t>("/d", {2});
    std::vector<int32_t> v{1, 2};
    f.write("/d", v);
    ctx.vol().clear_files();  // drop everything, then close with serve-on-close
    f.close();
  });
  bodies.add("reader", BodyKind::Stateful, [](TaskContext& ctx) {
    while (!ctx.fetch_file().eos) {}
  });
  WorkflowSpec w = parse_workflow(R"(tasks:
  - func: writer
    nprocs: 1
    outports: [{filename: void.h5, dsets: [{name: /d}]}]
  - func: reader
    nprocs: 1
    inports: [{filename: void.h5, dsets: [{name: /d}]}]
)");
  Engine eng(build_graph(w), bodies, ActionRegistry{});
  RunReport rep = eng.run();
  CHECK_FALSE(rep.ok);
  CHECK(rep.error.find("empty tree") != std::string::npos);
  CHECK(rep.error.find("void.h5") != std::string::npos);
}

TEST_CASE("append reopens the retained tree") {
  TaskRegistry bodies;
  bodies.add("writer", BodyKind::Stateful, [](TaskContext& ctx) {
    ctx.vol().set_serve_on_close(false);
    auto f = ctx.open_file("acc.h5");
    f.create_dataset<int32_t>("/a", {2});
    std::vector<int32_t> a{1, 2};
    f.write("/a", a);
    f.close();
    auto g = ctx.open_file("acc.h5", OpenMode::Append);
    g.create_dataset<int32_t>("/b", {2});
    std::vector<int32_t> b{3, 4};
    g.write("/b", b);
    g.close();
    ctx.vol().serve_step();  // retained tree now holds /a and /b
  });
  static std::vector<std::string> seen;
  seen.clear();
  bodies.add("reader", BodyKind::Stateful, [](TaskContext& ctx) {
    while (true) {
      auto r = ctx.fetch_file();
      if (r.eos) break;
      for (const auto& b : r.blocks) seen.push_back(b.path);
    }
  });
  WorkflowSpec w = parse_workflow(R"(tasks:
  - func: writer
    nprocs: 1
    outports: [{filename: acc.h5, dsets: [{name: /a}, {name: /b}]}]
  - func: reader
    nprocs: 1
    inports: [{filename: acc.h5, dsets: [{name: /a}, {name: /b}]}]
)");
  Engine eng(build_graph(w), bodies, ActionRegistry{});
  RunReport rep = eng.run();
  REQUIRE(rep.ok);
  // single serve carrying both datasets: append resumed the first tree
  CHECK(seen == std::vector<std::string>{"/a", "/b"});
  CHECK(rep.channels[0].serves == 1);
}

TEST_CASE("truncate reopen starts a fresh tree") {
  TaskRegistry bodies;
  bodies.add("writer", BodyKind::Stateful, [](TaskContext& ctx) {
    for (long t = 1; t <= 2; ++t) {
      auto f = ctx.open_file("fresh.h5");  // same name, truncate both times
      f.create_dataset<int32_t>("/d", {1});
      std::vector<int32_t> v{(int32_t)t};
      f.write("/d", v);
      f.close();
    }
  });
  static std::vector<int32_t> seen;
  static std::vector<size_t> block_counts;
  seen.clear();
  block_counts.clear();
  bodies.add("reader", BodyKind::Stateful, [](TaskContext& ctx) {
    while (true) {
      auto r = ctx.fetch_file();
      if (r.eos) break;
      block_counts.push_back(r.blocks.size());
      seen.push_back(r.blocks[0].as<int32_t>()[0]);
    }
  });
  WorkflowSpec w = parse_workflow(R"(tasks:
  - func: writer
    nprocs: 1
    outports: [{filename: fresh.h5, dsets: [{name: /d}]}]
  - func: reader
    nprocs: 1
    inports: [{filename: fresh.h5, dsets: [{name: /d}]}]
)");
  Engine eng(build_graph(w), bodies, ActionRegistry{});
  RunReport rep = eng.run();
  REQUIRE(rep.ok);
  CHECK(seen == std::vector<int32_t>{1, 2});
  // a stale /d surviving the truncate would show up as extra blocks
  CHECK(block_counts == std::vector<size_t>{1, 1});
}

TEST_CASE("stateless consumers run once per served file") {
  WorkflowSpec w = parse_workflow(R"(tasks:
  - func: producer
    nprocs: 1
    args: {steps: 3, compute: 1, grid: 4, particles: 0}
    outports:
      - filename: outfile*.h5
        dsets: [{name: /group1/grid}]
  - func: consumer_stateless
    nprocs: 1
    args: {compute: 1}
    inports:
      - filename: outfile*.h5
        dsets: [{name: /group1/grid}]
)");
  Engine eng(build_graph(w), harness::default_bodies(), harness::default_actions());
  RunReport rep = eng.run();
  REQUIRE(rep.ok);
  CHECK(rep.ranks.back().invocations == 3);
  CHECK(rep.channels[0].consumed == std::vector<long>{1, 2, 3});

  // a stateless body may fetch exactly once
  TaskRegistry greedy = harness::default_bodies();
  greedy.add("consumer_stateless", BodyKind::Stateless, [](TaskContext& ctx) {
    ctx.fetch_file();
    ctx.fetch_file();
  });
  Engine eng2(build_graph(w), greedy, harness::default_actions());
  RunReport rep2 = eng2.run();
  CHECK_FALSE(rep2.ok);
  CHECK(rep2.error.find("once") != std::string::npos);

  // and may not produce
  WorkflowSpec wp = parse_workflow(R"(tasks:
  - func: producer
    nprocs: 1
    args: {steps: 1, compute: 1, grid: 4, particles: 0}
    outports: [{filename: a*.h5, dsets: [{name: /group1/grid}]}]
  - func: consumer_stateless
    nprocs: 1
    args: {compute: 1}
    inports: [{filename: a*.h5, dsets: [{name: /group1/grid}]}]
    outports: [{filename: b.h5, dsets: [{name: /x}]}]
  - func: consumer
    nprocs: 1
    args: {compute: 1}
    inports: [{filename: b.h5, dsets: [{name: /x}]}]
)");
  Engine eng3(build_graph(wp), harness::default_bodies(), harness::default_actions());
  RunReport rep3 = eng3.run();
  CHECK_FALSE(rep3.ok);
  CHECK(rep3.error.find("cannot produce") != std::string::npos);
}

TEST_CASE("unresolved names are reported with the task name") {
  WorkflowSpec w = parse_workflow(R"(tasks:
  - func: mystery
    nprocs: 1
    outports: [{filename: f.h5, dsets: [{name: /d}]}]
  - func: consumer
    nprocs: 1
    args: {compute: 1}
    inports: [{filename: f.h5, dsets: [{name: /d}]}]
)");
  Engine eng(build_graph(w), harness::default_bodies(), harness::default_actions());
  RunReport rep = eng.run();
  CHECK_FALSE(rep.ok);
  CHECK(rep.error.find("mystery") != std::string::npos);

  WorkflowSpec wa = parse_workflow(R"(tasks:
  - func: producer
    nprocs: 1
    actions: [nowhere, nothing]
    args: {steps: 1, compute: 1, grid: 4, particles: 0}
    outports: [{filename: outfile*.h5, dsets: [{name: /group1/grid}]}]
  - func: consumer
    nprocs: 1
    args: {compute: 1}
    inports: [{filename: outfile*.h5, dsets: [{name: /group1/grid}]}]
)");
  Engine eng2(build_graph(wa), harness::default_bodies(), harness::default_actions());
  RunReport rep2 = eng2.run();
  CHECK_FALSE(rep2.ok);
  CHECK(rep2.error.find("nowhere") != std::string::npos);
}

TEST_CASE("virtual-clock runs are deterministic") {
  auto once = [] {
    auto r = harness::scenario_flow_control(5, FlowControl::Kind::Latest);
    REQUIRE(r.ok);
    return report_hash(r.report);
  };
  CHECK(once() == once());

  auto nyx = [] {
    auto r = harness::scenario_nyx(2);
    REQUIRE(r.ok);
    return report_hash(r.report);
  };
  CHECK(nyx() == nyx());
}

TEST_CASE("an unfed consumer deadlocks with a diagnostic") {
  // producer writes T=1 but consumer1's only channel never matches a file the
  // producer actually opens: engine cannot know, the fetch blocks, and the
  // fabric reports the deadlock once the producer finished.
  TaskRegistry bodies;
  bodies.add("quiet", BodyKind::Stateful, [](TaskContext&) {});
  bodies.add("reader", BodyKind::Stateful, [](TaskContext& ctx) {
    while (!ctx.fetch_file().eos) {}
  });
  WorkflowSpec w = parse_workflow(R"(tasks:
  - func: quiet
    nprocs: 1
    outports: [{filename: never.h5, dsets: [{name: /d}]}]
  - func: reader
    nprocs: 1
    inports: [{filename: never.h5, dsets: [{name: /d}]}]
)");
  Engine eng(build_graph(w), bodies, ActionRegistry{});
  RunReport rep = eng.run();
  // the final flush marks the channel done even with zero serves, so this
  // terminates cleanly with nothing consumed
  REQUIRE(rep.ok);
  CHECK(rep.channels[0].consumed.empty());
}

TEST_CASE("fabric reports a deadlock when everyone blocks") {
  Fabric::Options fo;
  Fabric fab(fo);
  for (int i = 0; i < 2; ++i)
    fab.add_worker([](WorkerCtx& c) {
      c.receive([](const Message&) { return true; }, "a message that never comes");
    });
  CHECK_FALSE(fab.run());
  CHECK(fab.error().find("deadlock") != std::string::npos);
  CHECK(fab.error().find("a message that never comes") != std::string::npos);
}

TEST_CASE("file-realized datasets spill containers and count bytes separately") {
  WorkflowSpec w = parse_workflow(R"(tasks:
  - func: producer
    nprocs: 2
    args: {steps: 2, compute: 1, grid: 8, particles: 0}
    outports:
      - filename: outfile*.h5
        dsets: [{name: /group1/grid, file: 1, memory: 0}]
  - func: consumer
    nprocs: 2
    args: {compute: 1}
    inports:
      - filename: outfile*.h5
        dsets: [{name: /group1/grid, file: 1, memory: 0}]
)");
  Engine::Options opt;
  opt.data_dir = std::string(SITU_TEST_TMP) + "/spill_rt";
  std::filesystem::remove_all(opt.data_dir);
  Engine eng(build_graph(w), harness::default_bodies(), harness::default_actions(), opt);
  RunReport rep = eng.run();
  REQUIRE(rep.ok);
  CHECK(rep.channels[0].payload_bytes == 0);  // nothing crossed in memory
  CHECK(rep.channels[0].file_bytes > 0);
  long spills = 0, reads = 0;
  for (const auto& e : rep.events) {
    spills += e.kind == EventKind::FileSpill;
    reads += e.kind == EventKind::FileRead;
  }
  CHECK(spills == 4);  // 2 io ranks x 2 steps
  CHECK(reads == 4);   // consumer ranks read the containers they need
  CHECK(std::filesystem::exists(opt.data_dir));
}
