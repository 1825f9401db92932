#include "galign/graph.hpp"

#include <sstream>

#include "galign/error.hpp"

namespace galign {

namespace {

Eigen::VectorXd edge_feature(const NodeRecord& src, const NodeRecord& dst, int l_edge) {
  return positional_encode(dst.position - src.position, l_edge);
}

bool is_grasped(NodeKind k) {
  return k == NodeKind::GraspedDemo || k == NodeKind::GraspedTest;
}

// Fully connects one pair subgraph appended at node offset `base`: within
// both objects and across them, both directions, features from relative
// positions. Edge order is deterministic: all ordered (src, dst) pairs with
// src-major iteration, within first.
void append_pair_edges(AlignmentGraph& g, int32_t base) {
  const int k = g.k;
  auto add = [&](int32_t s, int32_t d, EdgeKind kind) {
    EdgeRecord e;
    e.kind = kind;
    e.src = base + s;
    e.dst = base + d;
    e.feature = edge_feature(g.nodes[size_t(e.src)], g.nodes[size_t(e.dst)], g.l_edge);
    g.edges.push_back(std::move(e));
  };
  for (int32_t s = 0; s < 2 * k; ++s)
    for (int32_t d = 0; d < 2 * k; ++d) {
      if (s == d) continue;
      bool same = (s < k) == (d < k);
      add(s, d, same ? EdgeKind::WithinObject : EdgeKind::CrossObject);
    }
}

void append_demo(AlignmentGraph& g, const PairGraph& demo) {
  check(demo.k == g.k, ErrorKind::Domain, "add_demo: part count mismatch");
  check(demo.l_edge == g.l_edge, ErrorKind::Domain, "add_demo: edge encoding mismatch");
  const int32_t base = int32_t(g.nodes.size());
  const int demo_index = g.n_demos;
  g.demo_node_start.push_back(base);
  for (size_t i = 0; i < demo.nodes.size(); ++i) {
    NodeRecord n = demo.nodes[i];
    n.kind = is_grasped(n.kind) ? NodeKind::GraspedDemo : NodeKind::TargetDemo;
    n.demo_index = demo_index;
    n.candidate_index = -1;
    g.nodes.push_back(std::move(n));
  }
  append_pair_edges(g, base);
  // Directional demo -> test edges, role matched (grasped->grasped,
  // target->target), towards every existing candidate.
  for (int c = 0; c < g.n_candidates; ++c) {
    int32_t cbase = g.cand_node_start[size_t(c)];
    for (int32_t s = 0; s < 2 * g.k; ++s)
      for (int32_t d = 0; d < 2 * g.k; ++d) {
        if ((s < g.k) != (d < g.k)) continue;
        EdgeRecord e;
        e.kind = EdgeKind::DemoToTest;
        e.src = base + s;
        e.dst = cbase + d;
        g.edges.push_back(std::move(e));
      }
  }
  ++g.n_demos;
}

// Appends one candidate subgraph cloned from `pair` (which must already carry
// test-node kinds and positions), wiring demo->test and test->energy edges.
void append_candidate(AlignmentGraph& g, const PairGraph& pair) {
  const int32_t base = int32_t(g.nodes.size());
  const int ci = g.n_candidates;
  g.cand_node_start.push_back(base);
  for (size_t i = 0; i < pair.nodes.size(); ++i) {
    NodeRecord n = pair.nodes[i];
    n.kind = is_grasped(n.kind) ? NodeKind::GraspedTest : NodeKind::TargetTest;
    n.demo_index = -1;
    n.candidate_index = ci;
    g.nodes.push_back(std::move(n));
  }
  g.cand_edge_start.push_back(int32_t(g.edges.size()));
  append_pair_edges(g, base);
  g.cand_edge_count.push_back(int32_t(g.edges.size()) - g.cand_edge_start.back());

  NodeRecord energy;
  energy.kind = NodeKind::Energy;
  energy.has_position = false;
  energy.candidate_index = ci;
  const int32_t eid = int32_t(g.nodes.size());
  g.nodes.push_back(std::move(energy));
  g.energy_node.push_back(eid);
  for (int32_t s = 0; s < 2 * g.k; ++s) {
    EdgeRecord e;
    e.kind = EdgeKind::ToEnergy;
    e.src = base + s;
    e.dst = eid;
    g.edges.push_back(std::move(e));
  }

  for (int dmo = 0; dmo < g.n_demos; ++dmo) {
    int32_t dbase = g.demo_node_start[size_t(dmo)];
    for (int32_t s = 0; s < 2 * g.k; ++s)
      for (int32_t d = 0; d < 2 * g.k; ++d) {
        if ((s < g.k) != (d < g.k)) continue;
        EdgeRecord e;
        e.kind = EdgeKind::DemoToTest;
        e.src = dbase + s;
        e.dst = base + d;
        g.edges.push_back(std::move(e));
      }
  }
  ++g.n_candidates;
}

}  // namespace

PairGraph build_pair_graph(const LocalFeatureSet& grasped, const LocalFeatureSet& target,
                           int l_edge) {
  check(grasped.k() >= 1, ErrorKind::Domain, "build_pair_graph: empty grasped feature set");
  check(grasped.k() == target.k(), ErrorKind::Domain,
        "build_pair_graph: part count mismatch between objects");
  check(l_edge >= 1, ErrorKind::Config, "build_pair_graph: l_edge must be >= 1");
  PairGraph p;
  p.k = grasped.k();
  p.l_edge = l_edge;
  auto push_object = [&](const LocalFeatureSet& f, NodeKind kind) {
    for (int i = 0; i < f.k(); ++i) {
      NodeRecord n;
      n.kind = kind;
      n.feature = f.features[size_t(i)];
      n.position = f.positions.row(i).transpose();
      n.has_position = true;
      p.nodes.push_back(std::move(n));
    }
  };
  push_object(grasped, NodeKind::GraspedTest);
  push_object(target, NodeKind::TargetTest);
  for (int32_t s = 0; s < 2 * p.k; ++s)
    for (int32_t d = 0; d < 2 * p.k; ++d) {
      if (s == d) continue;
      EdgeRecord e;
      e.kind = ((s < p.k) == (d < p.k)) ? EdgeKind::WithinObject : EdgeKind::CrossObject;
      e.src = s;
      e.dst = d;
      e.feature = edge_feature(p.nodes[size_t(s)], p.nodes[size_t(d)], l_edge);
      p.edges.push_back(std::move(e));
    }
  return p;
}

AlignmentGraph attach_context(const std::vector<PairGraph>& demos, const PairGraph& test) {
  check(!demos.empty(), ErrorKind::Domain, "attach_context: at least one demo required");
  AlignmentGraph g;
  g.k = test.k;
  g.l_edge = test.l_edge;
  for (const auto& d : demos) append_demo(g, d);
  check(test.k == g.k, ErrorKind::Domain, "attach_context: test part count mismatch");
  append_candidate(g, test);
  return g;
}

void add_demo(AlignmentGraph& graph, const PairGraph& demo) { append_demo(graph, demo); }

void attach_candidates(AlignmentGraph& graph, int m) {
  check(m >= 1, ErrorKind::Domain, "attach_candidates: m must be >= 1");
  check(graph.n_candidates >= 1, ErrorKind::Domain,
        "attach_candidates: graph has no candidate to clone");
  if (m <= graph.n_candidates) return;

  // Snapshot candidate 0 as a pair graph (its geometric edges are rebuilt by
  // append_candidate, so only nodes matter).
  PairGraph proto;
  proto.k = graph.k;
  proto.l_edge = graph.l_edge;
  const int32_t base = graph.cand_node_start[0];
  for (int32_t i = 0; i < 2 * graph.k; ++i) proto.nodes.push_back(graph.nodes[size_t(base + i)]);

  while (graph.n_candidates < m) append_candidate(graph, proto);
}

void transform_candidate(AlignmentGraph& graph, int candidate_index, const RigidTransform& t) {
  check(candidate_index >= 0 && candidate_index < graph.n_candidates, ErrorKind::Domain,
        "transform_candidate: no such candidate");
  const int32_t base = graph.cand_node_start[size_t(candidate_index)];
  const Eigen::Matrix3d rt = t.rotation().transpose();
  for (int32_t i = 0; i < graph.k; ++i) {
    NodeRecord& n = graph.nodes[size_t(base + i)];
    n.position = t.apply(n.position);
    n.feature = n.feature * rt;  // rotate each C x 3 channel row
  }
  const int32_t e0 = graph.cand_edge_start[size_t(candidate_index)];
  const int32_t cnt = graph.cand_edge_count[size_t(candidate_index)];
  for (int32_t e = e0; e < e0 + cnt; ++e) {
    EdgeRecord& rec = graph.edges[size_t(e)];
    bool moved_src = rec.src - base < graph.k;
    bool moved_dst = rec.dst - base < graph.k;
    if (moved_src || moved_dst)
      rec.feature =
          edge_feature(graph.nodes[size_t(rec.src)], graph.nodes[size_t(rec.dst)], graph.l_edge);
  }
}

GraphIndex build_index(const AlignmentGraph& graph) {
  GraphIndex idx;
  const size_t n = graph.nodes.size();
  std::array<std::vector<int32_t>, kNumEdgeKinds> counts;
  for (auto& c : counts) c.assign(n + 1, 0);
  for (const auto& e : graph.edges) counts[size_t(e.kind)][size_t(e.dst) + 1]++;
  for (int k = 0; k < kNumEdgeKinds; ++k) {
    idx.offsets[size_t(k)].assign(n + 1, 0);
    for (size_t i = 0; i < n; ++i)
      idx.offsets[size_t(k)][i + 1] = idx.offsets[size_t(k)][i] + counts[size_t(k)][i + 1];
    idx.edge_ids[size_t(k)].resize(size_t(idx.offsets[size_t(k)][n]));
  }
  std::array<std::vector<int32_t>, kNumEdgeKinds> cursor;
  for (int k = 0; k < kNumEdgeKinds; ++k) cursor[size_t(k)] = idx.offsets[size_t(k)];
  for (size_t eid = 0; eid < graph.edges.size(); ++eid) {
    const auto& e = graph.edges[eid];
    idx.edge_ids[size_t(e.kind)][size_t(cursor[size_t(e.kind)][size_t(e.dst)]++)] = int32_t(eid);
  }
  return idx;
}

std::string dump_graph(const AlignmentGraph& graph) {
  static const char* node_names[] = {"grasped_demo", "target_demo", "grasped_test",
                                     "target_test", "energy"};
  static const char* edge_names[] = {"within", "cross", "demo_to_test", "to_energy"};
  std::ostringstream os;
  os << "nodes " << graph.nodes.size() << " edges " << graph.edges.size() << " k " << graph.k
     << " demos " << graph.n_demos << " candidates " << graph.n_candidates << "\n";
  for (size_t i = 0; i < graph.nodes.size(); ++i) {
    const auto& nd = graph.nodes[i];
    os << i << " " << node_names[size_t(nd.kind)];
    if (nd.demo_index >= 0) os << " demo=" << nd.demo_index;
    if (nd.candidate_index >= 0) os << " cand=" << nd.candidate_index;
    os << "\n";
  }
  for (const auto& e : graph.edges)
    os << edge_names[size_t(e.kind)] << " " << e.src << " -> " << e.dst << "\n";
  return os.str();
}

}  // namespace galign
