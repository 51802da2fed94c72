#pragma once

/// @file graph.hpp
/// @brief Task-graph construction: dataset-driven port matching, ensemble
///        expansion with round-robin instance pairing, and rank layout.

#include <string>
#include <utility>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "situ/config.hpp"
#include "situ/glob.hpp"

namespace situ {

/// A producer/consumer port pair whose filename patterns and at least one
/// dataset pattern pair can name a common literal.
struct PortMatch {
  int producer_task = -1, producer_port = -1;
  int consumer_task = -1, consumer_port = -1;
  std::vector<std::pair<int, int>> dset_pairs;  // (out dset idx, in dset idx)
  bool operator==(const PortMatch&) const = default;
};

/// Matches every outport against every inport, in task/port declaration
/// order. Self-matches (a task feeding itself) are allowed.
inline std::vector<PortMatch> match_ports(const WorkflowSpec& w) {
  std::vector<PortMatch> out;
  for (size_t p = 0; p < w.tasks.size(); ++p) {
    for (size_t pp = 0; pp < w.tasks[p].outports.size(); ++pp) {
      const auto& op = w.tasks[p].outports[pp];
      for (size_t c = 0; c < w.tasks.size(); ++c) {
        for (size_t cp = 0; cp < w.tasks[c].inports.size(); ++cp) {
          const auto& ip = w.tasks[c].inports[cp];
          if (!patterns_intersect(op.filename, ip.filename)) continue;
          PortMatch m{static_cast<int>(p), static_cast<int>(pp),
                      static_cast<int>(c), static_cast<int>(cp), {}};
          for (size_t od = 0; od < op.dsets.size(); ++od)
            for (size_t id = 0; id < ip.dsets.size(); ++id)
              if (patterns_intersect(op.dsets[od].pattern, ip.dsets[id].pattern))
                m.dset_pairs.emplace_back(static_cast<int>(od), static_cast<int>(id));
          if (!m.dset_pairs.empty()) out.push_back(std::move(m));
        }
      }
    }
  }
  return out;
}

/// Round-robin pairing of P producer instances with C consumer instances:
/// pair k of max(P, C) is (k mod P, k mod C). Every instance on the larger
/// side appears exactly once; the smaller side is reused cyclically.
inline std::vector<std::pair<int, int>> link_instances(int p_count, int c_count) {
  if (p_count < 1 || c_count < 1) throw Error("link_instances: counts must be positive");
  std::vector<std::pair<int, int>> out;
  int n = std::max(p_count, c_count);
  out.reserve(n);
  for (int k = 0; k < n; ++k) out.emplace_back(k % p_count, k % c_count);
  return out;
}

/// One runnable copy of a task. Ensembles expand a task into task_count
/// instances with contiguous, disjoint rank ranges.
struct TaskInstance {
  int task = -1;       // index into WorkflowSpec::tasks
  int instance = 0;    // 0..taskCount-1
  std::string name;    // func, or func.k when taskCount > 1
  int start_rank = 0;
  int nprocs = 0;
  int nwriters = 0;    // resolved (never 0)
  int end_rank() const { return start_rank + nprocs; }
  bool operator==(const TaskInstance&) const = default;
};

/// A channel-to-be: one producer instance's port feeding one consumer
/// instance's port, carrying the matched dataset pattern pairs.
struct GraphLink {
  int id = -1;
  int producer = -1, consumer = -1;  // indices into TaskGraph::instances
  int producer_port = -1, consumer_port = -1;
  std::vector<std::pair<int, int>> dset_pairs;
  bool operator==(const GraphLink&) const = default;
};

struct TaskGraph {
  WorkflowSpec spec;
  std::vector<TaskInstance> instances;
  std::vector<GraphLink> links;
  int total_ranks = 0;

  const TaskSpec& task_of(const TaskInstance& ti) const { return spec.tasks[ti.task]; }
  const TaskInstance& instance_at_rank(int rank) const {
    for (const auto& ti : instances)
      if (rank >= ti.start_rank && rank < ti.end_rank()) return ti;
    throw Error(fmt::format("rank {} outside the workflow", rank));
  }
};

/// Lays out instances on a contiguous global rank interval in declaration
/// order (instances of one task adjacent), nprocs ranks each.
inline std::vector<TaskInstance> plan_ranks(const WorkflowSpec& w) {
  std::vector<TaskInstance> out;
  int next = 0;
  for (size_t t = 0; t < w.tasks.size(); ++t) {
    const auto& ts = w.tasks[t];
    for (int k = 0; k < ts.task_count; ++k) {
      TaskInstance ti;
      ti.task = static_cast<int>(t);
      ti.instance = k;
      ti.name = ts.task_count > 1 ? fmt::format("{}.{}", ts.func, k) : ts.func;
      ti.start_rank = next;
      ti.nprocs = ts.nprocs;
      ti.nwriters = ts.writers();
      next += ts.nprocs;
      out.push_back(std::move(ti));
    }
  }
  return out;
}

/// Builds the executable graph: port matches expanded over ensemble
/// instances with round-robin pairing, links numbered in (match, pair) order.
inline TaskGraph build_graph(const WorkflowSpec& w) {
  TaskGraph g;
  g.spec = w;
  g.instances = plan_ranks(w);
  g.total_ranks = g.instances.empty() ? 0 : g.instances.back().end_rank();

  // task index -> indices of its instances (contiguous by construction)
  std::vector<std::vector<int>> of_task(w.tasks.size());
  for (size_t i = 0; i < g.instances.size(); ++i)
    of_task[g.instances[i].task].push_back(static_cast<int>(i));

  for (const auto& m : match_ports(w)) {
    const auto& pis = of_task[m.producer_task];
    const auto& cis = of_task[m.consumer_task];
    for (auto [pk, ck] : link_instances(static_cast<int>(pis.size()),
                                        static_cast<int>(cis.size()))) {
      GraphLink l;
      l.id = static_cast<int>(g.links.size());
      l.producer = pis[pk];
      l.consumer = cis[ck];
      l.producer_port = m.producer_port;
      l.consumer_port = m.consumer_port;
      l.dset_pairs = m.dset_pairs;
      g.links.push_back(std::move(l));
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// exports

inline std::string export_dot(const TaskGraph& g) {
  fmt::memory_buffer b;
  fmt::format_to(std::back_inserter(b), "digraph workflow {{\n");
  fmt::format_to(std::back_inserter(b), "  rankdir=LR;\n  node [shape=box];\n");
  for (size_t i = 0; i < g.instances.size(); ++i) {
    const auto& ti = g.instances[i];
    fmt::format_to(std::back_inserter(b),
                   "  n{} [label=\"{}\\nranks {}..{} (w={})\"];\n",
                   i, ti.name, ti.start_rank, ti.end_rank() - 1, ti.nwriters);
  }
  for (const auto& l : g.links) {
    const auto& op = g.spec.tasks[g.instances[l.producer].task].outports[l.producer_port];
    std::string dsets;
    for (auto [od, id] : l.dset_pairs) {
      if (!dsets.empty()) dsets += ", ";
      dsets += op.dsets[od].pattern;
    }
    fmt::format_to(std::back_inserter(b), "  n{} -> n{} [label=\"{} ({})\"];\n",
                   l.producer, l.consumer, op.filename, dsets);
  }
  fmt::format_to(std::back_inserter(b), "}}\n");
  return fmt::to_string(b);
}

inline nlohmann::json graph_to_json(const TaskGraph& g) {
  nlohmann::json j;
  j["total_ranks"] = g.total_ranks;
  j["instances"] = nlohmann::json::array();
  for (const auto& ti : g.instances) {
    j["instances"].push_back({{"name", ti.name},
                              {"task", g.spec.tasks[ti.task].func},
                              {"instance", ti.instance},
                              {"start_rank", ti.start_rank},
                              {"nprocs", ti.nprocs},
                              {"nwriters", ti.nwriters}});
  }
  j["links"] = nlohmann::json::array();
  for (const auto& l : g.links) {
    const auto& op = g.spec.tasks[g.instances[l.producer].task].outports[l.producer_port];
    const auto& ip = g.spec.tasks[g.instances[l.consumer].task].inports[l.consumer_port];
    nlohmann::json pairs = nlohmann::json::array();
    for (auto [od, id] : l.dset_pairs)
      pairs.push_back({{"out", op.dsets[od].pattern}, {"in", ip.dsets[id].pattern}});
    j["links"].push_back({{"id", l.id},
                          {"producer", g.instances[l.producer].name},
                          {"consumer", g.instances[l.consumer].name},
                          {"out_filename", op.filename},
                          {"in_filename", ip.filename},
                          {"dsets", pairs}});
  }
  return j;
}

}  // namespace situ
