#include <catch2/catch_amalgamated.hpp>

#include <situ/config.hpp>
#include <situ/graph.hpp>

using namespace situ;

TEST_CASE("round-robin instance pairing") {
  using P = std::pair<int, int>;
  CHECK(link_instances(4, 2) ==
        std::vector<P>{{0, 0}, {1, 1}, {2, 0}, {3, 1}});
  CHECK(link_instances(1, 3) == std::vector<P>{{0, 0}, {0, 1}, {0, 2}});
  CHECK(link_instances(3, 1) == std::vector<P>{{0, 0}, {1, 0}, {2, 0}});
  CHECK(link_instances(2, 2) == std::vector<P>{{0, 0}, {1, 1}});
}

TEST_CASE("pairing covers both sides evenly for any instance counts") {
  for (int p = 1; p <= 16; ++p)
    for (int c = 1; c <= 16; ++c) {
      auto pairs = link_instances(p, c);
      const int n = std::max(p, c);
      REQUIRE((int)pairs.size() == n);
      std::vector<int> pc(p, 0), cc(c, 0);
      for (int i = 0; i < n; ++i) {
        CHECK(pairs[i].first == i % p);  // round-robin by construction
        CHECK(pairs[i].second == i % c);
        ++pc[pairs[i].first];
        ++cc[pairs[i].second];
      }
      // appearance counts differ by at most one and cover everyone
      auto check_even = [n](const std::vector<int>& counts) {
        const int parts = (int)counts.size();
        for (int k = 0; k < parts; ++k) {
          CHECK(counts[k] >= n / parts);
          CHECK(counts[k] <= (n + parts - 1) / parts);
          CHECK(counts[k] >= 1);
        }
      };
      check_even(pc);
      check_even(cc);
    }
}

static WorkflowSpec three_task_spec() {
  return parse_workflow(R"(tasks:
  - func: producer
    nprocs: 3
    outports:
      - filename: outfile.h5
        dsets:
          - {name: /group1/grid}
          - {name: /group1/particles}
  - func: consumer1
    nprocs: 5
    inports:
      - filename: outfile.h5
        dsets: [{name: /group1/grid}]
  - func: consumer2
    nprocs: 2
    inports:
      - filename: outfile.h5
        dsets: [{name: /group1/particles}]
)");
}

TEST_CASE("rank planning is contiguous in declaration order") {
  auto insts = plan_ranks(three_task_spec());
  REQUIRE(insts.size() == 3);
  CHECK(insts[0].start_rank == 0);
  CHECK(insts[0].nprocs == 3);
  CHECK(insts[1].start_rank == 3);
  CHECK(insts[1].nprocs == 5);
  CHECK(insts[2].start_rank == 8);
  CHECK(insts[2].end_rank() == 10);
  CHECK(insts[0].name == "producer");
}

TEST_CASE("instance names carry the ensemble index") {
  WorkflowSpec w = parse_workflow(R"(tasks:
  - func: producer
    taskCount: 2
    nprocs: 1
    outports: [{filename: f.h5, dsets: [{name: /d}]}]
  - func: consumer
    nprocs: 1
    inports: [{filename: f.h5, dsets: [{name: /d}]}]
)");
  auto insts = plan_ranks(w);
  REQUIRE(insts.size() == 3);
  CHECK(insts[0].name == "producer.0");
  CHECK(insts[1].name == "producer.1");
  CHECK(insts[2].name == "consumer");
}

TEST_CASE("three-task sample builds a 3-node 2-edge graph") {
  TaskGraph g = build_graph(three_task_spec());
  CHECK(g.instances.size() == 3);
  REQUIRE(g.links.size() == 2);
  CHECK(g.total_ranks == 10);
  const auto& l0 = g.links[0];
  CHECK(g.instances[l0.producer].name == "producer");
  CHECK(g.instances[l0.consumer].name == "consumer1");
  REQUIRE(l0.dset_pairs.size() == 1);  // only the grid pattern matches
  CHECK(g.spec.tasks[0].outports[0].dsets[l0.dset_pairs[0].first].pattern ==
        "/group1/grid");
  const auto& l1 = g.links[1];
  CHECK(g.instances[l1.consumer].name == "consumer2");
  CHECK(g.spec.tasks[0].outports[0].dsets[l1.dset_pairs[0].first].pattern ==
        "/group1/particles");
}

TEST_CASE("fan-in ensemble builds 6 nodes and 4 edges") {
  WorkflowSpec w = parse_workflow(R"(tasks:
  - func: producer
    taskCount: 4
    nprocs: 3
    outports:
      - filename: outfile.h5
        dsets: [{name: /group1/grid}]
  - func: consumer
    taskCount: 2
    nprocs: 5
    inports:
      - filename: outfile.h5
        dsets: [{name: /group1/grid}]
)");
  TaskGraph g = build_graph(w);
  CHECK(g.instances.size() == 6);
  REQUIRE(g.links.size() == 4);
  CHECK(g.total_ranks == 4 * 3 + 2 * 5);
  // round-robin: producer.k -> consumer.(k%2)
  for (int k = 0; k < 4; ++k) {
    CHECK(g.instances[g.links[k].producer].name == fmt::format("producer.{}", k));
    CHECK(g.instances[g.links[k].consumer].name == fmt::format("consumer.{}", k % 2));
  }
}

TEST_CASE("wildcard ports match by pattern intersection") {
  WorkflowSpec w = parse_workflow(R"(tasks:
  - func: sim
    nprocs: 2
    outports:
      - filename: plt*.h5
        dsets: [{name: /level_0/density}, {name: /meta/step}]
  - func: ana
    nprocs: 1
    inports:
      - filename: plt00???.h5
        dsets: [{name: /level_0/*}]
)");
  TaskGraph g = build_graph(w);
  REQUIRE(g.links.size() == 1);
  REQUIRE(g.links[0].dset_pairs.size() == 1);
  CHECK(g.links[0].dset_pairs[0] == std::pair<int, int>{0, 0});
}

TEST_CASE("a dangling memory inport builds no link") {
  WorkflowSpec w = parse_workflow(R"(tasks:
  - func: producer
    nprocs: 1
    outports: [{filename: other.h5, dsets: [{name: /a}]}]
  - func: consumer
    nprocs: 1
    inports: [{filename: outfile.h5, dsets: [{name: /a}]}]
)");
  CHECK(build_graph(w).links.empty());  // the engine and validate() reject it
}

TEST_CASE("dot export names every instance and link") {
  TaskGraph g = build_graph(three_task_spec());
  const std::string dot = export_dot(g);
  CHECK(dot.find("digraph") != std::string::npos);
  CHECK(dot.find("label=\"producer\\n") != std::string::npos);
  CHECK(dot.find("label=\"consumer1\\n") != std::string::npos);
  CHECK(dot.find("label=\"consumer2\\n") != std::string::npos);
  CHECK(dot.find("->") != std::string::npos);
  CHECK(dot.find("/group1/grid") != std::string::npos);

  auto j = graph_to_json(g);
  CHECK(j["total_ranks"] == 10);
  CHECK(j["instances"].size() == 3);
  CHECK(j["links"].size() == 2);
}
