#pragma once

/// @file config.hpp
/// @brief Workflow configuration: YAML schema, strict parsing, validation,
///        and the io_freq -> flow-control strategy mapping.

#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <yaml-cpp/yaml.h>

#include <fmt/format.h>

#include "situ/glob.hpp"
#include "situ/datamodel.hpp"  // situ::Error

namespace situ {

/// Configuration rejection; carries source location where available.
class ConfigError : public Error {
public:
  using Error::Error;
};

using ScalarValue = std::variant<int64_t, double, bool, std::string>;

/// One dataset pattern on a port. memory/file select the transport
/// realization: in-memory pieces, spilled containers, or both.
struct DsetSpec {
  std::string pattern;
  bool memory = true;
  bool file = false;
  bool operator==(const DsetSpec&) const = default;
};

/// One port: a filename pattern plus the dataset patterns of interest.
/// io_freq is meaningful on inports only and selects the flow-control
/// strategy for links built from this port.
struct PortSpec {
  std::string filename;
  int io_freq = 0;
  std::vector<DsetSpec> dsets;
  bool operator==(const PortSpec&) const = default;
};

struct TaskSpec {
  std::string func;     // registry key; doubles as the task name
  int nprocs = 0;
  int task_count = 1;   // ensemble instances
  int nwriters = 0;     // 0 = all ranks write (resolved to nprocs)
  std::optional<std::pair<std::string, std::string>> actions;  // [script, function]
  std::map<std::string, ScalarValue> args;
  std::vector<PortSpec> inports;
  std::vector<PortSpec> outports;

  int writers() const { return nwriters > 0 ? nwriters : nprocs; }
  bool operator==(const TaskSpec&) const = default;
};

struct WorkflowSpec {
  std::vector<TaskSpec> tasks;
  bool operator==(const WorkflowSpec&) const = default;
};

// ---------------------------------------------------------------------------
// flow control

struct FlowControl {
  enum class Kind { All, Some, Latest } kind = Kind::All;
  int n = 1;  // stride for Some
  bool operator==(const FlowControl&) const = default;
};

/// Maps an inport io_freq to a strategy: 0 or 1 -> All (serve every step),
/// n >= 2 -> Some(n) (serve every n-th close plus the final one),
/// -1 -> Latest (serve only when the consumer is already waiting).
inline FlowControl strategy_of(int io_freq) {
  if (io_freq == 0 || io_freq == 1) return {FlowControl::Kind::All, 1};
  if (io_freq >= 2) return {FlowControl::Kind::Some, io_freq};
  if (io_freq == -1) return {FlowControl::Kind::Latest, 1};
  throw ConfigError(fmt::format("io_freq {} is not a valid strategy", io_freq));
}

inline std::string flow_name(const FlowControl& fc) {
  switch (fc.kind) {
    case FlowControl::Kind::All: return "all";
    case FlowControl::Kind::Some: return fmt::format("some({})", fc.n);
    case FlowControl::Kind::Latest: return "latest";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// parsing

namespace detail {

inline std::string where(const YAML::Node& n) {
  auto m = n.Mark();
  if (m.line < 0) return "";
  return fmt::format(" (line {}, col {})", m.line + 1, m.column + 1);
}

inline void expect_keys(const YAML::Node& n, std::initializer_list<const char*> allowed,
                        const std::string& what) {
  for (const auto& kv : n) {
    const std::string k = kv.first.as<std::string>();
    bool ok = false;
    for (const char* a : allowed)
      if (k == a) { ok = true; break; }
    if (!ok)
      throw ConfigError(fmt::format("unknown key '{}' in {}{}", k, what, where(kv.first)));
  }
}

inline ScalarValue parse_scalar(const YAML::Node& n) {
  if (!n.IsScalar()) throw ConfigError("args values must be scalars" + where(n));
  // YAML scalars are untagged; probe in order of specificity
  try { return ScalarValue{n.as<bool>()}; } catch (...) {}
  try { return ScalarValue{static_cast<int64_t>(n.as<long long>())}; } catch (...) {}
  try { return ScalarValue{n.as<double>()}; } catch (...) {}
  return ScalarValue{n.as<std::string>()};
}

inline DsetSpec parse_dset(const YAML::Node& n, const std::string& ctx) {
  if (!n.IsMap()) throw ConfigError("dset entry must be a map in " + ctx + where(n));
  expect_keys(n, {"name", "memory", "file"}, "dset of " + ctx);
  DsetSpec d;
  if (auto v = n["name"]) d.pattern = v.as<std::string>();
  else throw ConfigError("dset missing 'name' in " + ctx + where(n));
  if (d.pattern.empty() || d.pattern[0] != '/')
    throw ConfigError(fmt::format("dset name '{}' must be an absolute path in {}{}",
                                  d.pattern, ctx, where(n)));
  if (auto v = n["memory"]) d.memory = v.as<int>() != 0;
  if (auto v = n["file"]) d.file = v.as<int>() != 0;
  if (!d.memory && !d.file)
    throw ConfigError(fmt::format("dset '{}' disables both memory and file transport in {}{}",
                                  d.pattern, ctx, where(n)));
  return d;
}

inline PortSpec parse_port(const YAML::Node& n, bool is_inport, const std::string& ctx) {
  if (!n.IsMap()) throw ConfigError("port entry must be a map in " + ctx + where(n));
  expect_keys(n, {"filename", "io_freq", "dsets"}, ctx);
  PortSpec p;
  if (auto v = n["filename"]) p.filename = v.as<std::string>();
  else throw ConfigError("port missing 'filename' in " + ctx + where(n));
  if (p.filename.empty())
    throw ConfigError("port filename must not be empty in " + ctx + where(n));
  if (auto v = n["io_freq"]) {
    if (!is_inport)
      throw ConfigError(fmt::format("io_freq on an outport in {}{}: flow control "
                                    "is declared on the consumer side",
                                    ctx, where(n)));
    p.io_freq = v.as<int>();
    strategy_of(p.io_freq);  // validates the value
  }
  auto ds = n["dsets"];
  if (!ds || !ds.IsSequence() || ds.size() == 0)
    throw ConfigError("port needs a non-empty 'dsets' list in " + ctx + where(n));
  for (const auto& e : ds) {
    DsetSpec d = parse_dset(e, ctx);
    for (const auto& prev : p.dsets)
      if (prev.pattern == d.pattern)
        throw ConfigError(fmt::format("duplicate dset pattern '{}' in {}{}",
                                      d.pattern, ctx, where(e)));
    p.dsets.push_back(std::move(d));
  }
  return p;
}

inline TaskSpec parse_task(const YAML::Node& n, size_t idx) {
  const std::string ctx0 = fmt::format("task #{}", idx + 1);
  if (!n.IsMap()) throw ConfigError(ctx0 + " must be a map" + where(n));
  expect_keys(n, {"func", "nprocs", "taskCount", "nwriters", "actions", "args",
                  "inports", "outports"}, ctx0);
  TaskSpec t;
  if (auto v = n["func"]) t.func = v.as<std::string>();
  else throw ConfigError(ctx0 + " missing 'func'" + where(n));
  const std::string ctx = fmt::format("task '{}'", t.func);
  if (auto v = n["nprocs"]) t.nprocs = v.as<int>();
  else throw ConfigError(ctx + " missing 'nprocs'" + where(n));
  if (t.nprocs < 1) throw ConfigError(ctx + ": nprocs must be >= 1" + where(n));
  if (auto v = n["taskCount"]) t.task_count = v.as<int>();
  if (t.task_count < 1) throw ConfigError(ctx + ": taskCount must be >= 1" + where(n));
  if (auto v = n["nwriters"]) t.nwriters = v.as<int>();
  if (t.nwriters < 0 || t.nwriters > t.nprocs)
    throw ConfigError(fmt::format("{}: nwriters must be in [0, nprocs={}]{}",
                                  ctx, t.nprocs, where(n)));
  if (auto v = n["actions"]) {
    if (!v.IsSequence() || v.size() != 2)
      throw ConfigError(ctx + ": actions must be a [script, function] pair" + where(v));
    t.actions = {v[0].as<std::string>(), v[1].as<std::string>()};
  }
  if (auto v = n["args"]) {
    if (!v.IsMap()) throw ConfigError(ctx + ": args must be a map" + where(v));
    for (const auto& kv : v) t.args[kv.first.as<std::string>()] = parse_scalar(kv.second);
  }
  if (auto v = n["inports"]) {
    if (!v.IsSequence()) throw ConfigError(ctx + ": inports must be a list" + where(v));
    for (const auto& e : v) t.inports.push_back(parse_port(e, true, "inport of " + ctx));
  }
  if (auto v = n["outports"]) {
    if (!v.IsSequence()) throw ConfigError(ctx + ": outports must be a list" + where(v));
    for (const auto& e : v) t.outports.push_back(parse_port(e, false, "outport of " + ctx));
  }
  return t;
}

}  // namespace detail

/// Parses a workflow document. Unknown keys, missing required fields, and
/// locally invalid values are rejected with a ConfigError.
inline WorkflowSpec parse_workflow(const std::string& text) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(fmt::format("yaml syntax: {}", e.what()));
  }
  if (!root.IsMap()) throw ConfigError("top level must be a map with a 'tasks' list");
  detail::expect_keys(root, {"tasks"}, "workflow");
  auto tasks = root["tasks"];
  if (!tasks || !tasks.IsSequence() || tasks.size() == 0)
    throw ConfigError("workflow needs a non-empty 'tasks' list");
  WorkflowSpec w;
  for (size_t i = 0; i < tasks.size(); ++i)
    w.tasks.push_back(detail::parse_task(tasks[i], i));
  for (size_t i = 0; i < w.tasks.size(); ++i)
    for (size_t j = i + 1; j < w.tasks.size(); ++j)
      if (w.tasks[i].func == w.tasks[j].func)
        throw ConfigError(fmt::format("duplicate task name '{}'", w.tasks[i].func));
  return w;
}

inline WorkflowSpec parse_workflow_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open workflow file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_workflow(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(fmt::format("{}: {}", path, e.what()));
  }
}

// ---------------------------------------------------------------------------
// serialization (round-trips through parse_workflow)

inline std::string serialize_workflow(const WorkflowSpec& w) {
  YAML::Emitter out;
  auto emit_port = [&](const PortSpec& p, bool is_inport) {
    out << YAML::BeginMap;
    out << YAML::Key << "filename" << YAML::Value << p.filename;
    if (is_inport) out << YAML::Key << "io_freq" << YAML::Value << p.io_freq;
    out << YAML::Key << "dsets" << YAML::Value << YAML::BeginSeq;
    for (const auto& d : p.dsets) {
      out << YAML::BeginMap;
      out << YAML::Key << "name" << YAML::Value << d.pattern;
      out << YAML::Key << "memory" << YAML::Value << (d.memory ? 1 : 0);
      out << YAML::Key << "file" << YAML::Value << (d.file ? 1 : 0);
      out << YAML::EndMap;
    }
    out << YAML::EndSeq << YAML::EndMap;
  };
  out << YAML::BeginMap << YAML::Key << "tasks" << YAML::Value << YAML::BeginSeq;
  for (const auto& t : w.tasks) {
    out << YAML::BeginMap;
    out << YAML::Key << "func" << YAML::Value << t.func;
    out << YAML::Key << "nprocs" << YAML::Value << t.nprocs;
    if (t.task_count != 1) out << YAML::Key << "taskCount" << YAML::Value << t.task_count;
    if (t.nwriters != 0) out << YAML::Key << "nwriters" << YAML::Value << t.nwriters;
    if (t.actions) {
      out << YAML::Key << "actions" << YAML::Value << YAML::Flow << YAML::BeginSeq
          << t.actions->first << t.actions->second << YAML::EndSeq;
    }
    if (!t.args.empty()) {
      out << YAML::Key << "args" << YAML::Value << YAML::BeginMap;
      for (const auto& [k, v] : t.args) {
        out << YAML::Key << k << YAML::Value;
        std::visit([&](const auto& x) { out << x; }, v);
      }
      out << YAML::EndMap;
    }
    if (!t.inports.empty()) {
      out << YAML::Key << "inports" << YAML::Value << YAML::BeginSeq;
      for (const auto& p : t.inports) emit_port(p, true);
      out << YAML::EndSeq;
    }
    if (!t.outports.empty()) {
      out << YAML::Key << "outports" << YAML::Value << YAML::BeginSeq;
      for (const auto& p : t.outports) emit_port(p, false);
      out << YAML::EndSeq;
    }
    out << YAML::EndMap;
  }
  out << YAML::EndSeq << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

// ---------------------------------------------------------------------------
// validation

struct Issue {
  enum class Severity { Error, Warning } severity;
  std::string message;
};

struct ValidationReport {
  std::vector<Issue> issues;
  int errors() const {
    int n = 0;
    for (const auto& i : issues) n += i.severity == Issue::Severity::Error;
    return n;
  }
  int warnings() const { return static_cast<int>(issues.size()) - errors(); }
  bool ok() const { return errors() == 0; }
};

/// Cross-task checks: dangling ports, unreachable dsets, cycles.
/// Local (single-task) problems are already rejected by parse_workflow.
inline ValidationReport validate(const WorkflowSpec& w) {
  ValidationReport r;
  auto err = [&](std::string m) { r.issues.push_back({Issue::Severity::Error, std::move(m)}); };
  auto warn = [&](std::string m) { r.issues.push_back({Issue::Severity::Warning, std::move(m)}); };

  auto port_pair_matches = [](const PortSpec& out, const PortSpec& in) {
    if (!patterns_intersect(out.filename, in.filename)) return false;
    for (const auto& od : out.dsets)
      for (const auto& id : in.dsets)
        if (patterns_intersect(od.pattern, id.pattern)) return true;
    return false;
  };

  // adjacency between tasks via any matching port pair
  const size_t n = w.tasks.size();
  std::vector<std::vector<int>> adj(n);
  for (size_t p = 0; p < n; ++p)
    for (size_t c = 0; c < n; ++c)
      for (const auto& out : w.tasks[p].outports)
        for (const auto& in : w.tasks[c].inports)
          if (port_pair_matches(out, in)) adj[p].push_back(static_cast<int>(c));

  for (size_t c = 0; c < n; ++c) {
    for (size_t pi = 0; pi < w.tasks[c].inports.size(); ++pi) {
      const auto& in = w.tasks[c].inports[pi];
      bool matched = false;
      for (size_t p = 0; p < n && !matched; ++p)
        for (const auto& out : w.tasks[p].outports)
          if (port_pair_matches(out, in)) { matched = true; break; }
      if (!matched) {
        bool file_only = true;
        for (const auto& d : in.dsets) file_only &= (d.file && !d.memory);
        if (file_only)
          warn(fmt::format("task '{}' inport '{}' matches no outport; "
                           "it will read containers from the data directory",
                           w.tasks[c].func, in.filename));
        else
          err(fmt::format("task '{}' inport '{}' matches no outport",
                          w.tasks[c].func, in.filename));
      }
    }
  }
  for (size_t p = 0; p < n; ++p) {
    for (const auto& out : w.tasks[p].outports) {
      bool matched = false;
      for (size_t c = 0; c < n && !matched; ++c)
        for (const auto& in : w.tasks[c].inports)
          if (port_pair_matches(out, in)) { matched = true; break; }
      if (!matched)
        warn(fmt::format("task '{}' outport '{}' has no consumer",
                         w.tasks[p].func, out.filename));
    }
  }

  // cycle scan (self-links included)
  std::vector<int> color(n, 0);
  bool cyclic = false;
  auto dfs = [&](auto&& self, int u) -> void {
    color[u] = 1;
    for (int v : adj[u]) {
      if (color[v] == 1) { cyclic = true; return; }
      if (color[v] == 0) self(self, v);
    }
    color[u] = 2;
  };
  for (size_t i = 0; i < n && !cyclic; ++i)
    if (color[i] == 0) dfs(dfs, static_cast<int>(i));
  if (cyclic)
    warn("workflow graph contains a cycle; blocking strategies on every "
         "edge of the cycle can deadlock");

  return r;
}

// ---------------------------------------------------------------------------
// args access helpers

inline int64_t arg_int(const std::map<std::string, ScalarValue>& args,
                       const std::string& key, int64_t dflt) {
  auto it = args.find(key);
  if (it == args.end()) return dflt;
  if (const auto* v = std::get_if<int64_t>(&it->second)) return *v;
  if (const auto* v = std::get_if<double>(&it->second)) return static_cast<int64_t>(*v);
  throw Error("arg '" + key + "' is not a number");
}

inline double arg_num(const std::map<std::string, ScalarValue>& args,
                      const std::string& key, double dflt) {
  auto it = args.find(key);
  if (it == args.end()) return dflt;
  if (const auto* v = std::get_if<int64_t>(&it->second)) return static_cast<double>(*v);
  if (const auto* v = std::get_if<double>(&it->second)) return *v;
  throw Error("arg '" + key + "' is not a number");
}

inline std::string arg_str(const std::map<std::string, ScalarValue>& args,
                           const std::string& key, const std::string& dflt) {
  auto it = args.find(key);
  if (it == args.end()) return dflt;
  if (const auto* v = std::get_if<std::string>(&it->second)) return *v;
  throw Error("arg '" + key + "' is not a string");
}

}  // namespace situ
