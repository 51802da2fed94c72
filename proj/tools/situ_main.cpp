// situ command-line driver: run workflow configs with the built-in synthetic
// task library, execute the benchmark scenarios, or inspect a config's graph.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include <situ/situ.hpp>

namespace {

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw situ::Error("cannot write " + path);
  out << text;
}

void emit_outputs(const situ::RunReport& rep, const situ::TaskGraph& graph,
                  const std::string& dot, const std::string& csv,
                  const std::string& gantt, const std::string& json) {
  if (!dot.empty()) write_text(dot, situ::export_dot(graph));
  if (!csv.empty()) write_text(csv, situ::events_csv(rep));
  if (!gantt.empty()) write_text(gantt, situ::gantt_csv(rep));
  if (!json.empty()) write_text(json, situ::report_to_json(rep).dump(2));
}

void print_summary(const situ::RunReport& rep) {
  fmt::print("clock {}, {} ranks, completion {:g}\n", rep.clock, rep.total_ranks,
             rep.completion_time);
  for (const auto& c : rep.channels)
    fmt::print("channel {}: {} -> {} [{}] {} serves, {} steps consumed, {} drops, "
               "{} payload bytes, {} file bytes\n",
               c.id, c.producer, c.consumer, c.flow, c.serves, c.consumed.size(),
               c.drops, c.payload_bytes, c.file_bytes);
  for (const auto& r : rep.ranks)
    fmt::print("rank {:3} {:<14} compute {:10.6g}  idle {:10.6g}  transfer {:10.6g}"
               "  x{}\n",
               r.rank, r.instance, r.compute, r.idle, r.transfer, r.invocations);
}

int cmd_run(const std::string& config, const std::string& clock, double unit_ms,
            const std::string& data_dir, const std::string& dot, const std::string& csv,
            const std::string& gantt, const std::string& json, bool quiet) {
  situ::WorkflowSpec spec = situ::parse_workflow_file(config);
  situ::ValidationReport val = situ::validate(spec);
  if (!val.ok()) {
    for (const auto& i : val.issues)
      if (i.severity == situ::Issue::Severity::Error)
        std::cerr << "error: " << i.message << "\n";
    return 1;
  }
  situ::TaskGraph graph = situ::build_graph(spec);
  situ::Engine::Options opt;
  opt.clock = clock == "real" ? situ::ClockKind::Real : situ::ClockKind::Virtual;
  opt.real_unit_ms = unit_ms;
  if (!data_dir.empty()) opt.data_dir = data_dir;
  situ::Engine eng(graph, situ::harness::default_bodies(), situ::harness::default_actions(),
                   opt);
  situ::RunReport rep = eng.run();
  emit_outputs(rep, graph, dot, csv, gantt, json);
  if (!rep.ok) {
    std::cerr << "run failed: " << rep.error << "\n";
    return 1;
  }
  if (!quiet) print_summary(rep);
  return 0;
}

int cmd_graph(const std::string& config, const std::string& dot) {
  situ::WorkflowSpec spec = situ::parse_workflow_file(config);
  situ::ValidationReport val = situ::validate(spec);
  situ::TaskGraph graph = situ::build_graph(spec);
  const std::string d = situ::export_dot(graph);
  if (!dot.empty()) write_text(dot, d);
  std::cout << d;
  for (const auto& i : val.issues)
    std::cerr << (i.severity == situ::Issue::Severity::Error ? "error: " : "warning: ")
              << i.message << "\n";
  std::cerr << fmt::format("graph: {} instances, {} links, {} ranks, {} errors\n",
                           graph.instances.size(), graph.links.size(), graph.total_ranks,
                           val.errors());
  return val.ok() ? 0 : 1;
}

situ::FlowControl::Kind parse_strategy(const std::string& s) {
  if (s == "all") return situ::FlowControl::Kind::All;
  if (s == "some") return situ::FlowControl::Kind::Some;
  if (s == "latest") return situ::FlowControl::Kind::Latest;
  throw situ::Error("unknown strategy '" + s + "' (all|some|latest)");
}

int cmd_bench(const std::string& scenario, int slowdown, const std::string& strategy,
              const std::string& topology, int instances, int task_count, int io_freq,
              int trials) {
  using namespace situ::harness;
  if (scenario == "overhead") {
    OverheadResult r = scenario_overhead(trials);
    nlohmann::json j{{"scenario", "overhead"},   {"ok", r.ok},
                     {"error", r.error},         {"trials", r.trials},
                     {"engine_ms", r.engine_ms}, {"baseline_ms", r.baseline_ms},
                     {"ratio", r.ratio}};
    std::cout << j.dump(2) << "\n";
    return r.ok ? 0 : 1;
  }
  ScenarioResult r;
  if (scenario == "flow_control")
    r = scenario_flow_control(slowdown, parse_strategy(strategy));
  else if (scenario == "ensembles")
    r = scenario_ensembles(topology, instances);
  else if (scenario == "lammps")
    r = scenario_lammps(task_count);
  else if (scenario == "nyx")
    r = scenario_nyx(io_freq);
  else
    throw situ::Error("unknown scenario '" + scenario +
                      "' (flow_control|ensembles|lammps|nyx|overhead)");
  std::cout << scenario_to_json(r).dump(2) << "\n";
  return r.ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"situ: in-situ workflow engine with a virtual-time fabric"};
  app.require_subcommand(1);

  std::string config, clock = "virtual", data_dir;
  std::string dot, csv, gantt, json;
  double unit_ms = 1;
  bool quiet = false;

  CLI::App* run = app.add_subcommand("run", "execute a workflow config");
  run->add_option("config", config, "YAML workflow file")->required();
  run->add_option("--clock", clock, "virtual|real")
      ->check(CLI::IsMember({"virtual", "real"}));
  run->add_option("--unit-ms", unit_ms, "wall ms per time unit (real clock)");
  run->add_option("--data-dir", data_dir, "directory for file-mode containers");
  run->add_option("--emit-dot", dot, "write graph DOT to file");
  run->add_option("--emit-csv", csv, "write event log CSV to file");
  run->add_option("--emit-gantt", gantt, "write per-rank Gantt CSV to file");
  run->add_option("--emit-json", json, "write full report JSON to file");
  run->add_flag("-q,--quiet", quiet, "suppress the run summary");

  std::string scenario, strategy = "all", topology = "fanout";
  int slowdown = 5, instances = 4, task_count = 1, io_freq = 0, trials = 3;

  CLI::App* bench = app.add_subcommand("bench", "run a benchmark scenario");
  bench->add_option("scenario", scenario,
                    "flow_control|ensembles|lammps|nyx|overhead")
      ->required();
  bench->add_option("--slowdown", slowdown, "consumer slowdown factor (flow_control)");
  bench->add_option("--strategy", strategy, "all|some|latest (flow_control)");
  bench->add_option("--topology", topology, "fanout|fanin|nxn (ensembles)");
  bench->add_option("--instances", instances, "ensemble instance count (ensembles)");
  bench->add_option("--task-count", task_count, "instances per task (lammps)");
  bench->add_option("--io-freq", io_freq, "consumer io_freq (nyx)");
  bench->add_option("--trials", trials, "averaging trials (overhead)");

  CLI::App* graph = app.add_subcommand("graph", "print a config's task graph as DOT");
  graph->add_option("config", config, "YAML workflow file")->required();
  graph->add_option("--emit-dot", dot, "also write the DOT to a file");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed())
      return cmd_run(config, clock, unit_ms, data_dir, dot, csv, gantt, json, quiet);
    if (graph->parsed()) return cmd_graph(config, dot);
    return cmd_bench(scenario, slowdown, strategy, topology, instances, task_count,
                     io_freq, trials);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
