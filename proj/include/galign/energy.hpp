#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "galign/graph.hpp"

namespace galign {

// Graph-transformer energy head over an AlignmentGraph. Scalar-templated:
// float for the training/inference fast path, double for finite-difference
// verification. Graphs stay double; features are cast on ingestion.

template <typename S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;

enum class EnergyMode : uint8_t { Rotation = 0, Translation = 1 };

struct ModelConfig {
  int n_layers = 4;
  int n_heads = 4;
  int head_dim = 64;
  std::vector<int> mlp_dims = {256, 256};
  int l_edge = 6;
  int channels = 32;  // encoder channels feeding the graph
  EnergyMode mode = EnergyMode::Rotation;

  int node_dim() const { return 3 * channels; }         // flattened C x 3
  int hidden_dim() const { return n_heads * head_dim; }
  int edge_dim() const { return 6 * l_edge; }
  uint64_t digest() const;
};

// One attention layer: a shared root weight plus, per edge kind, transformer
// cross-attention with the edge feature mixed into key and value through the
// same projection. Multi-head outputs concatenate, pass the mix matrix, and
// edge kinds sum into the destination feature.
template <typename S>
struct EnergyLayerParams {
  MatX<S> w1;                                      // hidden x in (root)
  std::array<MatX<S>, kNumEdgeKinds> wq, wk, wv;   // hidden x in
  std::array<MatX<S>, kNumEdgeKinds> we;           // hidden x edge_dim
  MatX<S> mix;                                     // hidden x hidden
};

template <typename S>
struct EnergyModelParams {
  ModelConfig config;
  std::vector<EnergyLayerParams<S>> layers;
  VecX<S> energy_init;                // node_dim: learned energy-node token
  VecX<S> embed_demo, embed_energy;   // edge_dim: learnable edge embeddings
  std::vector<MatX<S>> head_w;        // hidden -> mlp_dims... -> 1
  std::vector<VecX<S>> head_b;
  // Spectral-norm power-iteration state, one (u, v) pair per matrix in
  // registry order. Not trained, not part of gradients.
  std::vector<VecX<S>> sn_u, sn_v;
  uint64_t encoder_digest = 0;
  int64_t step = 0;
};

template <typename S>
EnergyModelParams<S> init_energy_model(const ModelConfig& config, uint64_t seed);

// Flat views over every trainable scalar, in a stable registry order shared
// by the optimizer, serialization, and gradient checks.
template <typename S>
std::vector<std::pair<S*, int64_t>> energy_param_refs(EnergyModelParams<S>& p);

// Zero-filled gradient container with the same shapes.
template <typename S>
EnergyModelParams<S> zero_like(const EnergyModelParams<S>& p);

// One attention layer on explicit node features (columns = nodes). Exposed
// for oracle tests; energy_forward composes these with GELU between layers.
template <typename S>
MatX<S> attention_layer(const AlignmentGraph& graph, const GraphIndex& index,
                        const EnergyLayerParams<S>& layer, const EnergyModelParams<S>& params,
                        const MatX<S>& x);

template <typename S>
struct EnergyForwardCache {
  std::vector<MatX<S>> x;                                      // input per layer
  std::vector<std::array<MatX<S>, kNumEdgeKinds>> q, k, v;     // per layer
  std::vector<std::array<VecX<S>, kNumEdgeKinds>> alpha;       // per edge x heads
  std::vector<MatX<S>> agg;                                    // pre-mix sum
  std::vector<MatX<S>> z;                                      // pre-activation per layer
  MatX<S> x_final;                                             // post last layer
  std::vector<VecX<S>> head_in;                                // per candidate MLP trace
  std::vector<std::vector<VecX<S>>> head_pre;                  // pre-activations
  // Edge layout the forward ran with (post-override): dense feature matrix
  // per geometric kind, edge-id -> kind-local column, and the column range
  // key/value projections covered. Backward replays exactly this layout.
  std::array<MatX<S>, kNumEdgeKinds> edge_feat;
  std::array<std::vector<int32_t>, kNumEdgeKinds> edge_col;
  std::array<int64_t, kNumEdgeKinds> edge_count{};
  std::array<int64_t, kNumEdgeKinds> src_cols{};
};

// Optional replacement features for geometric edges (keyed by edge id), used
// by the gradient-penalty parameter path.
template <typename S>
struct EdgeFeatureOverride {
  std::vector<int32_t> edge_ids;
  std::vector<VecX<S>> features;
};

// Energies for all M candidates in one pass.
template <typename S>
VecX<S> energy_forward(const AlignmentGraph& graph, const GraphIndex& index,
                       const EnergyModelParams<S>& params, EnergyForwardCache<S>* cache = nullptr,
                       const EdgeFeatureOverride<S>* override_edges = nullptr);

template <typename S>
struct EnergyBackwardResult {
  EnergyModelParams<S> grads;
  MatX<S> node_input_grad;                 // node_dim x n_nodes (layer-0 inputs)
  std::vector<VecX<S>> edge_feature_grad;  // per edge; empty for embedding kinds
};

// Reverse-mode pass: upstream is dLoss/dEnergy per candidate. Needs the cache
// of the matching forward. want_edge_grad controls whether per-edge feature
// gradients are materialized (pose gradient and penalty need them).
template <typename S>
EnergyBackwardResult<S> energy_backward(const AlignmentGraph& graph, const GraphIndex& index,
                                        const EnergyModelParams<S>& params,
                                        const EnergyForwardCache<S>& cache,
                                        const VecX<S>& upstream, bool want_edge_grad);

// d(energy of candidate) / d(twist at identity) on the grasped-object test
// nodes; order [translation xyz, rotation xyz], world frame.
template <typename S>
Eigen::Matrix<double, 6, 1> pose_gradient(const AlignmentGraph& graph, const GraphIndex& index,
                                          const EnergyModelParams<S>& params,
                                          int candidate_index);

// Every candidate's pose gradient from one forward/backward pass. Candidates
// never exchange messages, so a unit upstream on all energies recovers each
// candidate's own gradient; optionally also returns the energies.
template <typename S>
std::vector<Eigen::Matrix<double, 6, 1>> pose_gradients_batch(const AlignmentGraph& graph,
                                                              const GraphIndex& index,
                                                              const EnergyModelParams<S>& params,
                                                              VecX<S>* energies = nullptr);

// Mean squared norm of dE/d(feature) over the positive candidate's
// CrossObject edges, E taken at candidate `candidate_index`. Returns the
// value; `direction` (if given) receives the raw edge gradients for the
// finite-difference parameter path.
template <typename S>
S gradient_penalty(const AlignmentGraph& graph, const GraphIndex& index,
                   const EnergyModelParams<S>& params, int candidate_index,
                   EdgeFeatureOverride<S>* direction = nullptr);

// One power-iteration step on w using persistent vectors u, v (resized and
// seeded deterministically when empty); returns the singular-value estimate.
template <typename S>
S power_iteration_estimate(const MatX<S>& w, VecX<S>& u, VecX<S>& v);

// One power-iteration + division pass over every registry matrix. Matrices
// whose estimate is below 0.05 are left alone (the zero-initialized head
// layer); embeddings and biases are vectors and out of scope by construction.
template <typename S>
void spectral_normalize(EnergyModelParams<S>& params);

// Current top-singular-value estimates over the same registry, warm-started
// from the tracked vectors but leaving them and the weights untouched.
template <typename S>
std::vector<S> spectral_estimates(const EnergyModelParams<S>& params);

template <typename S>
void save_energy_model(const EnergyModelParams<S>& params, const std::string& path);
template <typename S>
EnergyModelParams<S> load_energy_model(const std::string& path);

}  // namespace galign
