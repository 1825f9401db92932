#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "galign/encoder.hpp"
#include "galign/se3.hpp"

namespace galign {

// Heterogeneous scene graph over encoded object parts. A demonstrated or test
// alignment contributes one pair subgraph (grasped object A + target object
// B); demo subgraphs broadcast to test subgraphs through directional
// embedding edges, and every candidate test subgraph reports to its own
// energy read-out node. Geometry stays double here; the energy model casts.

enum class NodeKind : uint8_t { GraspedDemo, TargetDemo, GraspedTest, TargetTest, Energy };
enum class EdgeKind : uint8_t { WithinObject, CrossObject, DemoToTest, ToEnergy };
constexpr int kNumEdgeKinds = 4;

struct NodeRecord {
  NodeKind kind = NodeKind::GraspedTest;
  Eigen::Matrix<double, Eigen::Dynamic, 3> feature;  // C x 3; empty for Energy
  Eigen::Vector3d position = Eigen::Vector3d::Zero();
  bool has_position = false;  // Energy nodes carry no position
  int32_t demo_index = -1;
  int32_t candidate_index = -1;
};

struct EdgeRecord {
  EdgeKind kind = EdgeKind::WithinObject;
  int32_t src = 0, dst = 0;
  Eigen::VectorXd feature;  // positional_encode(p_dst - p_src, l_edge); empty
                            // for embedding kinds (DemoToTest, ToEnergy)
};

// One aligned object pair: grasped parts first (K nodes), target parts after
// (K nodes), fully connected within and across.
struct PairGraph {
  std::vector<NodeRecord> nodes;
  std::vector<EdgeRecord> edges;
  int k = 0;
  int l_edge = 6;
};

struct AlignmentGraph {
  std::vector<NodeRecord> nodes;
  std::vector<EdgeRecord> edges;
  int k = 0;
  int l_edge = 6;
  int n_demos = 0;
  int n_candidates = 0;
  // Node-id layout bookkeeping (ids are append-only and never renumbered).
  std::vector<int32_t> demo_node_start;  // per demo: 2k consecutive nodes
  std::vector<int32_t> cand_node_start;  // per candidate: 2k object nodes
  std::vector<int32_t> energy_node;      // per candidate: its read-out node
  // Per candidate: contiguous range of its geometric (within/cross) edges,
  // the ones transform_candidate must refresh.
  std::vector<int32_t> cand_edge_start, cand_edge_count;
};

// Incoming-edge index per kind, CSR over destination node. Topology is fixed
// after construction (transform_candidate only rewrites features), so the
// index stays valid for the lifetime of the graph.
struct GraphIndex {
  std::array<std::vector<int32_t>, kNumEdgeKinds> offsets;   // n_nodes + 1 each
  std::array<std::vector<int32_t>, kNumEdgeKinds> edge_ids;  // sorted by dst
};

PairGraph build_pair_graph(const LocalFeatureSet& grasped, const LocalFeatureSet& target,
                           int l_edge = 6);

// Joins >= 1 demo pair subgraphs with one test subgraph (candidate 0):
// directional DemoToTest edges demo->test with matching object role, one
// energy node fed by the candidate's own test nodes, no demo<->demo edges.
AlignmentGraph attach_context(const std::vector<PairGraph>& demos, const PairGraph& test);

// Appends a further demo subgraph; existing node ids stay untouched.
void add_demo(AlignmentGraph& graph, const PairGraph& demo);

// Grows the graph to m candidates total by cloning candidate 0 (same
// geometry; move each copy afterwards with transform_candidate). Candidates
// share the demos and never connect to each other.
void attach_candidates(AlignmentGraph& graph, int m);

// Rigidly moves one candidate's grasped-object nodes: positions by t,
// features by the rotation per 3-vector channel, touched geometric edge
// features recomputed. Target-object nodes stay put.
void transform_candidate(AlignmentGraph& graph, int candidate_index, const RigidTransform& t);

GraphIndex build_index(const AlignmentGraph& graph);

// Plain-text adjacency listing for golden tests and debugging.
std::string dump_graph(const AlignmentGraph& graph);

}  // namespace galign
