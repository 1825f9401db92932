#include "galign/energy.hpp"

#include <cmath>
#include <cstring>

#include <Eigen/Geometry>
#include <Eigen/QR>

#include "galign/binio.hpp"
#include "galign/error.hpp"
#include "galign/rng.hpp"

namespace galign {

namespace {

constexpr char kMagic[8] = {'G', 'A', 'L', 'N', 'E', 'B', 'M', '1'};
constexpr uint32_t kVersion = 1;

template <typename S>
S gelu_s(S x) {
  return S(0.5) * x * S(std::erfc(-double(x) * M_SQRT1_2));
}

template <typename S>
S gelu_grad_s(S x) {
  double xd = double(x);
  return S(0.5 * std::erfc(-xd * M_SQRT1_2) + xd * std::exp(-0.5 * xd * xd) / std::sqrt(2 * M_PI));
}

bool geometric_kind(EdgeKind k) {
  return k == EdgeKind::WithinObject || k == EdgeKind::CrossObject;
}

// Per-forward bookkeeping of edge layout: geometric kinds get a dense
// (edge_dim x n_k) feature matrix and a global-edge-id -> column map.
template <typename S>
struct EdgePlan {
  std::array<MatX<S>, kNumEdgeKinds> feat;       // geometric kinds only
  std::array<std::vector<int32_t>, kNumEdgeKinds> col;  // global eid -> local col
  std::array<int64_t, kNumEdgeKinds> count{};
  // Column range usable as attention sources per kind (n = all nodes, or the
  // contiguous demo prefix for DemoToTest when the layout allows it).
  std::array<int64_t, kNumEdgeKinds> src_cols{};
};

template <typename S>
EdgePlan<S> plan_edges(const AlignmentGraph& g, const EdgeFeatureOverride<S>* override_edges) {
  EdgePlan<S> plan;
  const int64_t n = int64_t(g.nodes.size());
  std::array<int64_t, kNumEdgeKinds> counts{};
  for (const auto& e : g.edges) counts[size_t(e.kind)]++;
  for (int k = 0; k < kNumEdgeKinds; ++k) {
    plan.count[size_t(k)] = counts[size_t(k)];
    plan.src_cols[size_t(k)] = n;
    plan.col[size_t(k)].assign(g.edges.size(), -1);
  }
  for (int k : {int(EdgeKind::WithinObject), int(EdgeKind::CrossObject)})
    plan.feat[size_t(k)].resize(6 * g.l_edge, counts[size_t(k)]);

  std::array<int64_t, kNumEdgeKinds> cursor{};
  for (size_t eid = 0; eid < g.edges.size(); ++eid) {
    const auto& e = g.edges[eid];
    int64_t c = cursor[size_t(e.kind)]++;
    plan.col[size_t(e.kind)][eid] = int32_t(c);
    if (geometric_kind(e.kind))
      plan.feat[size_t(e.kind)].col(c) = e.feature.template cast<S>();
  }
  if (override_edges) {
    check(override_edges->edge_ids.size() == override_edges->features.size(), ErrorKind::Domain,
          "edge override: id/feature count mismatch");
    for (size_t i = 0; i < override_edges->edge_ids.size(); ++i) {
      const auto& e = g.edges[size_t(override_edges->edge_ids[i])];
      check(geometric_kind(e.kind), ErrorKind::Domain,
            "edge override: only geometric edges carry replaceable features");
      check(override_edges->features[i].size() == 6 * g.l_edge, ErrorKind::Domain,
            "edge override: feature dimension mismatch");
      plan.feat[size_t(e.kind)].col(plan.col[size_t(e.kind)][size_t(override_edges->edge_ids[i])]) =
          override_edges->features[i];
    }
  }

  // DemoToTest sources are demo nodes; when demos occupy a contiguous id
  // prefix (the standard construction), key/value projections can skip the
  // candidate columns entirely.
  if (g.n_demos > 0) {
    int64_t hi = 0;
    bool prefix = true;
    for (size_t d = 0; d < g.demo_node_start.size(); ++d) {
      if (g.demo_node_start[d] != int32_t(d) * 2 * g.k) prefix = false;
      hi = std::max<int64_t>(hi, g.demo_node_start[d] + 2 * g.k);
    }
    if (prefix && hi == int64_t(g.n_demos) * 2 * g.k)
      plan.src_cols[size_t(EdgeKind::DemoToTest)] = hi;
  }
  return plan;
}

// Builds layer-0 node features: flattened object channels, learned token for
// energy nodes. Columns are nodes.
template <typename S>
MatX<S> input_features(const AlignmentGraph& g, const EnergyModelParams<S>& p) {
  const int dim = p.config.node_dim();
  MatX<S> x(dim, int64_t(g.nodes.size()));
  for (size_t i = 0; i < g.nodes.size(); ++i) {
    const auto& nd = g.nodes[i];
    if (nd.kind == NodeKind::Energy) {
      x.col(int64_t(i)) = p.energy_init;
      continue;
    }
    check(int(nd.feature.rows()) == p.config.channels, ErrorKind::Config,
          "energy model: node channel count does not match config");
    for (int c = 0; c < p.config.channels; ++c)
      for (int d = 0; d < 3; ++d) x(3 * c + d, int64_t(i)) = S(nd.feature(c, d));
  }
  return x;
}

template <typename S>
const VecX<S>& kind_embedding(const EnergyModelParams<S>& p, EdgeKind k) {
  return k == EdgeKind::DemoToTest ? p.embed_demo : p.embed_energy;
}

// Core attention for one layer and one edge kind. `col` maps global edge id
// to the kind-local column. Fills per-edge alpha (edge x heads) and adds the
// aggregated messages into `out`.
template <typename S>
void attend_kind(const AlignmentGraph& g, const GraphIndex& idx, const ModelConfig& cfg,
                 const std::vector<int32_t>& col, int64_t n_kind, int kind, const MatX<S>& q,
                 const MatX<S>& kmat, const MatX<S>& vmat, const MatX<S>& w6e,
                 const VecX<S>& embed_shift, VecX<S>& alpha, MatX<S>& out) {
  const int H = cfg.n_heads, hd = cfg.head_dim;
  const S inv_sqrt = S(1.0 / std::sqrt(double(hd)));
  const auto& offsets = idx.offsets[size_t(kind)];
  const auto& eids = idx.edge_ids[size_t(kind)];
  const bool geo = geometric_kind(EdgeKind(kind));
  alpha.resize(n_kind * H);

  std::vector<S> logits;
  for (size_t dst = 0; dst < g.nodes.size(); ++dst) {
    const int32_t lo = offsets[dst], hi = offsets[dst + 1];
    if (lo == hi) continue;
    const int deg = hi - lo;
    logits.assign(size_t(deg) * size_t(H), S(0));
    // Logits: per head, q_dst . (k_src + w6 e).
    for (int j = 0; j < deg; ++j) {
      const auto& e = g.edges[size_t(eids[size_t(lo + j)])];
      const int64_t c = col[size_t(eids[size_t(lo + j)])];
      for (int h = 0; h < H; ++h) {
        S dot = 0;
        const S* qp = q.data() + size_t(dst) * size_t(q.rows()) + size_t(h) * size_t(hd);
        const S* kp = kmat.data() + size_t(e.src) * size_t(kmat.rows()) + size_t(h) * size_t(hd);
        const S* ep = geo ? w6e.data() + size_t(c) * size_t(w6e.rows()) + size_t(h) * size_t(hd)
                          : embed_shift.data() + size_t(h) * size_t(hd);
        for (int d = 0; d < hd; ++d) dot += qp[d] * (kp[d] + ep[d]);
        logits[size_t(j) * size_t(H) + size_t(h)] = dot * inv_sqrt;
      }
    }
    // Softmax over incoming edges per head, then weighted value sum.
    for (int h = 0; h < H; ++h) {
      S mx = logits[size_t(h)];
      for (int j = 1; j < deg; ++j)
        mx = std::max(mx, logits[size_t(j) * size_t(H) + size_t(h)]);
      S z = 0;
      for (int j = 0; j < deg; ++j) {
        S a = std::exp(logits[size_t(j) * size_t(H) + size_t(h)] - mx);
        logits[size_t(j) * size_t(H) + size_t(h)] = a;
        z += a;
      }
      S* op = out.data() + size_t(dst) * size_t(out.rows()) + size_t(h) * size_t(hd);
      for (int j = 0; j < deg; ++j) {
        const auto& e = g.edges[size_t(eids[size_t(lo + j)])];
        const int64_t c = col[size_t(eids[size_t(lo + j)])];
        S a = logits[size_t(j) * size_t(H) + size_t(h)] / z;
        alpha(c * H + h) = a;
        const S* vp = vmat.data() + size_t(e.src) * size_t(vmat.rows()) + size_t(h) * size_t(hd);
        const S* ep = geo ? w6e.data() + size_t(c) * size_t(w6e.rows()) + size_t(h) * size_t(hd)
                          : embed_shift.data() + size_t(h) * size_t(hd);
        for (int d = 0; d < hd; ++d) op[d] += a * (vp[d] + ep[d]);
      }
    }
  }
}

template <typename S>
void check_model(const AlignmentGraph& g, const EnergyModelParams<S>& p) {
  check(g.l_edge == p.config.l_edge, ErrorKind::Config,
        "energy model: graph edge encoding does not match config");
  check(int(p.layers.size()) == p.config.n_layers, ErrorKind::Config,
        "energy model: layer count mismatch");
  check(g.n_candidates >= 1, ErrorKind::Domain, "energy model: graph has no candidates");
}

}  // namespace

uint64_t ModelConfig::digest() const {
  uint64_t h = 0xcbf29ce484222325ull;
  auto mixi = [&h](int v) { h = fnv1a(&v, sizeof(v), h); };
  mixi(n_layers);
  mixi(n_heads);
  mixi(head_dim);
  for (int d : mlp_dims) mixi(d);
  mixi(int(mlp_dims.size()));
  mixi(l_edge);
  mixi(channels);
  mixi(int(mode));
  return h;
}

template <typename S>
EnergyModelParams<S> init_energy_model(const ModelConfig& config, uint64_t seed) {
  check(config.n_layers >= 1 && config.n_heads >= 1 && config.head_dim >= 1, ErrorKind::Config,
        "energy model: dimensions must be positive");
  check(!config.mlp_dims.empty(), ErrorKind::Config, "energy model: head needs hidden layers");
  Rng rng = derive_rng(seed, "energy-init");

  // Orthonormal columns (or rows for wide matrices) from QR of a gaussian
  // draw: spectral norm exactly 1 from the start.
  auto orthogonal = [&rng](int rows, int cols) {
    Eigen::MatrixXd gauss =
        Eigen::MatrixXd::NullaryExpr(std::max(rows, cols), std::min(rows, cols),
                                     [&rng]() { return rng.normal(); });
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(gauss);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(std::max(rows, cols),
                                                                      std::min(rows, cols));
    Eigen::MatrixXd m = rows >= cols ? q : Eigen::MatrixXd(q.transpose());
    return MatX<S>(m.cast<S>());
  };

  EnergyModelParams<S> p;
  p.config = config;
  const int hid = config.hidden_dim(), edim = config.edge_dim();
  for (int l = 0; l < config.n_layers; ++l) {
    const int in = l == 0 ? config.node_dim() : hid;
    EnergyLayerParams<S> lp;
    lp.w1 = orthogonal(hid, in);
    for (int k = 0; k < kNumEdgeKinds; ++k) {
      lp.wq[size_t(k)] = orthogonal(hid, in);
      lp.wk[size_t(k)] = orthogonal(hid, in);
      lp.wv[size_t(k)] = orthogonal(hid, in);
      lp.we[size_t(k)] = orthogonal(hid, edim);
    }
    lp.mix = orthogonal(hid, hid);
    p.layers.push_back(std::move(lp));
  }
  p.energy_init = VecX<S>::NullaryExpr(config.node_dim(), [&rng]() { return S(rng.normal()); });
  p.embed_demo = VecX<S>::NullaryExpr(edim, [&rng]() { return S(rng.normal()); });
  p.embed_energy = VecX<S>::NullaryExpr(edim, [&rng]() { return S(rng.normal()); });

  int in = hid;
  for (int d : config.mlp_dims) {
    p.head_w.push_back(orthogonal(d, in));
    p.head_b.push_back(VecX<S>::Zero(d));
    in = d;
  }
  p.head_w.push_back(MatX<S>::Zero(1, in));  // zero energy at initialization
  p.head_b.push_back(VecX<S>::Zero(1));
  return p;
}

template <typename S>
std::vector<std::pair<S*, int64_t>> energy_param_refs(EnergyModelParams<S>& p) {
  std::vector<std::pair<S*, int64_t>> r;
  for (auto& l : p.layers) {
    r.push_back({l.w1.data(), l.w1.size()});
    for (int k = 0; k < kNumEdgeKinds; ++k) {
      r.push_back({l.wq[size_t(k)].data(), l.wq[size_t(k)].size()});
      r.push_back({l.wk[size_t(k)].data(), l.wk[size_t(k)].size()});
      r.push_back({l.wv[size_t(k)].data(), l.wv[size_t(k)].size()});
      r.push_back({l.we[size_t(k)].data(), l.we[size_t(k)].size()});
    }
    r.push_back({l.mix.data(), l.mix.size()});
  }
  for (auto& m : p.head_w) r.push_back({m.data(), m.size()});
  for (auto& v : p.head_b) r.push_back({v.data(), v.size()});
  r.push_back({p.energy_init.data(), p.energy_init.size()});
  r.push_back({p.embed_demo.data(), p.embed_demo.size()});
  r.push_back({p.embed_energy.data(), p.embed_energy.size()});
  return r;
}

template <typename S>
EnergyModelParams<S> zero_like(const EnergyModelParams<S>& p) {
  EnergyModelParams<S> z = p;
  for (auto& [ptr, n] : energy_param_refs(z)) std::memset(ptr, 0, size_t(n) * sizeof(S));
  z.sn_u.clear();
  z.sn_v.clear();
  return z;
}

template <typename S>
MatX<S> attention_layer(const AlignmentGraph& graph, const GraphIndex& index,
                        const EnergyLayerParams<S>& layer, const EnergyModelParams<S>& params,
                        const MatX<S>& x) {
  const ModelConfig& cfg = params.config;
  EdgePlan<S> plan = plan_edges<S>(graph, nullptr);
  MatX<S> agg = MatX<S>::Zero(cfg.hidden_dim(), x.cols());
  VecX<S> alpha;
  for (int kind = 0; kind < kNumEdgeKinds; ++kind) {
    if (plan.count[size_t(kind)] == 0) continue;
    MatX<S> q = layer.wq[size_t(kind)] * x;
    MatX<S> k = layer.wk[size_t(kind)] * x.leftCols(plan.src_cols[size_t(kind)]);
    MatX<S> v = layer.wv[size_t(kind)] * x.leftCols(plan.src_cols[size_t(kind)]);
    MatX<S> w6e;
    VecX<S> shift;
    if (geometric_kind(EdgeKind(kind)))
      w6e = layer.we[size_t(kind)] * plan.feat[size_t(kind)];
    else
      shift = layer.we[size_t(kind)] * kind_embedding(params, EdgeKind(kind));
    attend_kind(graph, index, cfg, plan.col[size_t(kind)], plan.count[size_t(kind)], kind, q, k,
                v, w6e, shift, alpha, agg);
  }
  return layer.w1 * x + layer.mix * agg;
}

template <typename S>
VecX<S> energy_forward(const AlignmentGraph& graph, const GraphIndex& index,
                       const EnergyModelParams<S>& params, EnergyForwardCache<S>* cache,
                       const EdgeFeatureOverride<S>* override_edges) {
  check_model(graph, params);
  const ModelConfig& cfg = params.config;
  const int64_t n = int64_t(graph.nodes.size());
  const int hid = cfg.hidden_dim();

  EdgePlan<S> plan = plan_edges<S>(graph, override_edges);
  MatX<S> x = input_features(graph, params);

  if (cache) {
    *cache = EnergyForwardCache<S>{};
    cache->x.resize(size_t(cfg.n_layers));
    cache->q.resize(size_t(cfg.n_layers));
    cache->k.resize(size_t(cfg.n_layers));
    cache->v.resize(size_t(cfg.n_layers));
    cache->alpha.resize(size_t(cfg.n_layers));
    cache->agg.resize(size_t(cfg.n_layers));
    cache->z.resize(size_t(cfg.n_layers));
  }

  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& lp = params.layers[size_t(l)];
    MatX<S> agg = MatX<S>::Zero(hid, n);
    if (cache) cache->x[size_t(l)] = x;
    for (int kind = 0; kind < kNumEdgeKinds; ++kind) {
      if (plan.count[size_t(kind)] == 0) continue;
      MatX<S> q = lp.wq[size_t(kind)] * x;
      MatX<S> k = lp.wk[size_t(kind)] * x.leftCols(plan.src_cols[size_t(kind)]);
      MatX<S> v = lp.wv[size_t(kind)] * x.leftCols(plan.src_cols[size_t(kind)]);
      MatX<S> w6e;
      VecX<S> shift;
      if (geometric_kind(EdgeKind(kind)))
        w6e = lp.we[size_t(kind)] * plan.feat[size_t(kind)];
      else
        shift = lp.we[size_t(kind)] * kind_embedding(params, EdgeKind(kind));
      VecX<S> alpha;
      attend_kind(graph, index, cfg, plan.col[size_t(kind)], plan.count[size_t(kind)], kind, q,
                  k, v, w6e, shift, alpha, agg);
      if (cache) {
        cache->q[size_t(l)][size_t(kind)] = std::move(q);
        cache->k[size_t(l)][size_t(kind)] = std::move(k);
        cache->v[size_t(l)][size_t(kind)] = std::move(v);
        cache->alpha[size_t(l)][size_t(kind)] = std::move(alpha);
      }
    }
    if (cache) cache->agg[size_t(l)] = agg;
    MatX<S> z = lp.w1 * x;
    z.noalias() += lp.mix * agg;
    if (cache) cache->z[size_t(l)] = z;
    if (l + 1 < cfg.n_layers) z = z.unaryExpr([](S t) { return gelu_s(t); });
    x = std::move(z);
  }
  if (cache) {
    cache->x_final = x;
    cache->edge_feat = std::move(plan.feat);
    cache->edge_col = std::move(plan.col);
    cache->edge_count = plan.count;
    cache->src_cols = plan.src_cols;
  }

  // Head MLP on each candidate's energy node.
  VecX<S> energies(graph.n_candidates);
  if (cache) {
    cache->head_in.resize(size_t(graph.n_candidates));
    cache->head_pre.resize(size_t(graph.n_candidates));
  }
  for (int c = 0; c < graph.n_candidates; ++c) {
    VecX<S> h = x.col(graph.energy_node[size_t(c)]);
    if (cache) cache->head_in[size_t(c)] = h;
    for (size_t j = 0; j < params.head_w.size(); ++j) {
      VecX<S> pre = params.head_w[j] * h + params.head_b[j];
      if (cache) cache->head_pre[size_t(c)].push_back(pre);
      if (j + 1 < params.head_w.size())
        h = pre.unaryExpr([](S t) { return gelu_s(t); });
      else
        h = pre;
    }
    energies(c) = h(0);
  }
  return energies;
}

namespace {

// Backward of attend_kind. dout is the gradient on the aggregated output.
// Fills dq/dk/dv (same shapes as q/k/v) plus per-edge dw6e columns.
template <typename S>
void attend_kind_backward(const AlignmentGraph& g, const GraphIndex& idx, const ModelConfig& cfg,
                          const std::vector<int32_t>& col, int64_t n_kind, int kind,
                          const MatX<S>& q, const MatX<S>& kmat, const MatX<S>& vmat,
                          const MatX<S>& w6e, const VecX<S>& embed_shift, const VecX<S>& alpha,
                          const MatX<S>& dout, MatX<S>& dq, MatX<S>& dk, MatX<S>& dv,
                          MatX<S>& dw6e) {
  const int H = cfg.n_heads, hd = cfg.head_dim;
  const S inv_sqrt = S(1.0 / std::sqrt(double(hd)));
  const auto& offsets = idx.offsets[size_t(kind)];
  const auto& eids = idx.edge_ids[size_t(kind)];
  const bool geo = geometric_kind(EdgeKind(kind));

  dq.setZero(q.rows(), q.cols());
  dk.setZero(kmat.rows(), kmat.cols());
  dv.setZero(vmat.rows(), vmat.cols());
  dw6e.setZero(q.rows(), n_kind);

  std::vector<S> dalpha;
  for (size_t dst = 0; dst < g.nodes.size(); ++dst) {
    const int32_t lo = offsets[dst], hi = offsets[dst + 1];
    if (lo == hi) continue;
    const int deg = hi - lo;
    dalpha.assign(size_t(deg) * size_t(H), S(0));

    for (int h = 0; h < H; ++h) {
      const S* gp = dout.data() + size_t(dst) * size_t(dout.rows()) + size_t(h) * size_t(hd);
      // dalpha_j = (v_src + w6e) . dout ; dv and dw6e get alpha * dout.
      for (int j = 0; j < deg; ++j) {
        const auto& e = g.edges[size_t(eids[size_t(lo + j)])];
        const int64_t c = col[size_t(eids[size_t(lo + j)])];
        const S a = alpha(c * H + h);
        const S* vp = vmat.data() + size_t(e.src) * size_t(vmat.rows()) + size_t(h) * size_t(hd);
        S* dvp = dv.data() + size_t(e.src) * size_t(dv.rows()) + size_t(h) * size_t(hd);
        S* dep = dw6e.data() + size_t(c) * size_t(dw6e.rows()) + size_t(h) * size_t(hd);
        const S* ep = geo ? w6e.data() + size_t(c) * size_t(w6e.rows()) + size_t(h) * size_t(hd)
                          : embed_shift.data() + size_t(h) * size_t(hd);
        S da = 0;
        for (int d = 0; d < hd; ++d) {
          da += (vp[d] + ep[d]) * gp[d];
          dvp[d] += a * gp[d];
          dep[d] += a * gp[d];
        }
        dalpha[size_t(j) * size_t(H) + size_t(h)] = da;
      }
      // Softmax backward: dlogit_j = a_j (da_j - sum_m a_m da_m).
      S s = 0;
      for (int j = 0; j < deg; ++j) {
        const int64_t c = col[size_t(eids[size_t(lo + j)])];
        s += alpha(c * H + h) * dalpha[size_t(j) * size_t(H) + size_t(h)];
      }
      const S* qp = q.data() + size_t(dst) * size_t(q.rows()) + size_t(h) * size_t(hd);
      S* dqp = dq.data() + size_t(dst) * size_t(dq.rows()) + size_t(h) * size_t(hd);
      for (int j = 0; j < deg; ++j) {
        const auto& e = g.edges[size_t(eids[size_t(lo + j)])];
        const int64_t c = col[size_t(eids[size_t(lo + j)])];
        const S a = alpha(c * H + h);
        const S dl = a * (dalpha[size_t(j) * size_t(H) + size_t(h)] - s) * inv_sqrt;
        const S* kp = kmat.data() + size_t(e.src) * size_t(kmat.rows()) + size_t(h) * size_t(hd);
        const S* ep = geo ? w6e.data() + size_t(c) * size_t(w6e.rows()) + size_t(h) * size_t(hd)
                          : embed_shift.data() + size_t(h) * size_t(hd);
        S* dkp = dk.data() + size_t(e.src) * size_t(dk.rows()) + size_t(h) * size_t(hd);
        S* dep = dw6e.data() + size_t(c) * size_t(dw6e.rows()) + size_t(h) * size_t(hd);
        for (int d = 0; d < hd; ++d) {
          dqp[d] += dl * (kp[d] + ep[d]);
          S dkt = dl * qp[d];
          dkp[d] += dkt;
          dep[d] += dkt;
        }
      }
    }
  }
}

}  // namespace

template <typename S>
EnergyBackwardResult<S> energy_backward(const AlignmentGraph& graph, const GraphIndex& index,
                                        const EnergyModelParams<S>& params,
                                        const EnergyForwardCache<S>& cache,
                                        const VecX<S>& upstream, bool want_edge_grad) {
  check_model(graph, params);
  check(upstream.size() == graph.n_candidates, ErrorKind::Domain,
        "energy_backward: upstream size must match candidate count");
  const ModelConfig& cfg = params.config;
  const int64_t n = int64_t(graph.nodes.size());
  const int hid = cfg.hidden_dim();

  EnergyBackwardResult<S> res;
  res.grads = zero_like(params);

  // Head backward.
  MatX<S> dx = MatX<S>::Zero(hid, n);
  for (int c = 0; c < graph.n_candidates; ++c) {
    const auto& pres = cache.head_pre[size_t(c)];
    VecX<S> d = VecX<S>::Constant(1, upstream(c));
    for (int j = int(params.head_w.size()) - 1; j >= 0; --j) {
      VecX<S> hin;
      if (j == 0)
        hin = cache.head_in[size_t(c)];
      else
        hin = pres[size_t(j - 1)].unaryExpr([](S t) { return gelu_s(t); });
      res.grads.head_w[size_t(j)].noalias() += d * hin.transpose();
      res.grads.head_b[size_t(j)] += d;
      VecX<S> dh = params.head_w[size_t(j)].transpose() * d;
      if (j == 0)
        dx.col(graph.energy_node[size_t(c)]) += dh;
      else
        d = dh.cwiseProduct(
            pres[size_t(j - 1)].unaryExpr([](S t) { return gelu_grad_s(t); }));
    }
  }

  if (want_edge_grad) res.edge_feature_grad.resize(graph.edges.size());

  // dx currently holds dE/d(x_final) = dE/d(z_{L-1}).
  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const auto& lp = params.layers[size_t(l)];
    const MatX<S>& xin = cache.x[size_t(l)];

    // z = w1 x + mix agg (+ gelu for l < L-1, already folded into dx below).
    res.grads.layers[size_t(l)].w1.noalias() += dx * xin.transpose();
    MatX<S> dxin = lp.w1.transpose() * dx;
    res.grads.layers[size_t(l)].mix.noalias() += dx * cache.agg[size_t(l)].transpose();
    MatX<S> dagg = lp.mix.transpose() * dx;

    for (int kind = 0; kind < kNumEdgeKinds; ++kind) {
      if (cache.edge_count[size_t(kind)] == 0) continue;
      const MatX<S>& q = cache.q[size_t(l)][size_t(kind)];
      const MatX<S>& k = cache.k[size_t(l)][size_t(kind)];
      const MatX<S>& v = cache.v[size_t(l)][size_t(kind)];
      MatX<S> w6e;
      VecX<S> shift;
      if (geometric_kind(EdgeKind(kind)))
        w6e = lp.we[size_t(kind)] * cache.edge_feat[size_t(kind)];
      else
        shift = lp.we[size_t(kind)] * kind_embedding(params, EdgeKind(kind));

      MatX<S> dq, dk, dv, dw6e;
      attend_kind_backward(graph, index, cfg, cache.edge_col[size_t(kind)],
                           cache.edge_count[size_t(kind)], kind, q, k, v, w6e, shift,
                           cache.alpha[size_t(l)][size_t(kind)], dagg, dq, dk, dv, dw6e);

      res.grads.layers[size_t(l)].wq[size_t(kind)].noalias() += dq * xin.transpose();
      const int64_t sc = cache.src_cols[size_t(kind)];
      res.grads.layers[size_t(l)].wk[size_t(kind)].noalias() +=
          dk * xin.leftCols(sc).transpose();
      res.grads.layers[size_t(l)].wv[size_t(kind)].noalias() +=
          dv * xin.leftCols(sc).transpose();
      dxin.noalias() += lp.wq[size_t(kind)].transpose() * dq;
      dxin.leftCols(sc).noalias() += lp.wk[size_t(kind)].transpose() * dk;
      dxin.leftCols(sc).noalias() += lp.wv[size_t(kind)].transpose() * dv;

      if (geometric_kind(EdgeKind(kind))) {
        res.grads.layers[size_t(l)].we[size_t(kind)].noalias() +=
            dw6e * cache.edge_feat[size_t(kind)].transpose();
        if (want_edge_grad) {
          MatX<S> de = lp.we[size_t(kind)].transpose() * dw6e;  // edge_dim x n_k
          for (size_t eid = 0; eid < graph.edges.size(); ++eid) {
            const int64_t c = cache.edge_col[size_t(kind)][eid];
            if (c < 0) continue;
            if (res.edge_feature_grad[eid].size() == 0)
              res.edge_feature_grad[eid] = de.col(c);
            else
              res.edge_feature_grad[eid] += de.col(c);
          }
        }
      } else {
        VecX<S> dsum = dw6e.rowwise().sum();
        res.grads.layers[size_t(l)].we[size_t(kind)].noalias() +=
            dsum * kind_embedding(params, EdgeKind(kind)).transpose();
        VecX<S>& demb = kind == int(EdgeKind::DemoToTest) ? res.grads.embed_demo
                                                          : res.grads.embed_energy;
        demb.noalias() += lp.we[size_t(kind)].transpose() * dsum;
      }
    }

    if (l > 0) {
      // xin = gelu(z_{l-1}); chain through the cached pre-activation.
      dx = dxin.cwiseProduct(
          cache.z[size_t(l - 1)].unaryExpr([](S t) { return gelu_grad_s(t); }));
    } else {
      dx = std::move(dxin);
    }
  }

  // dx is now the gradient on layer-0 inputs.
  res.node_input_grad = dx;
  for (size_t i = 0; i < graph.nodes.size(); ++i)
    if (graph.nodes[i].kind == NodeKind::Energy) res.grads.energy_init += dx.col(int64_t(i));
  return res;
}

namespace {

// Turns edge-feature and node-input gradients into per-candidate twist
// gradients at identity, [translation xyz, rotation xyz], world frame.
template <typename S>
std::vector<Eigen::Matrix<double, 6, 1>> extract_pose_grads(const AlignmentGraph& graph,
                                                            const EnergyBackwardResult<S>& back,
                                                            int channels) {
  // Position gradients flow through geometric edge features only:
  // e = posenc(p_dst - p_src), d sin(w v)/dv = w cos(w v) componentwise.
  std::vector<Eigen::Vector3d> dpos(graph.nodes.size(), Eigen::Vector3d::Zero());
  for (size_t eid = 0; eid < graph.edges.size(); ++eid) {
    const auto& e = graph.edges[eid];
    if (back.edge_feature_grad[eid].size() == 0) continue;
    int32_t cs = graph.nodes[size_t(e.src)].candidate_index;
    int32_t cd = graph.nodes[size_t(e.dst)].candidate_index;
    if (cs < 0 && cd < 0) continue;  // demo-pair edge, no moved endpoint
    Eigen::Vector3d rel =
        graph.nodes[size_t(e.dst)].position - graph.nodes[size_t(e.src)].position;
    Eigen::Vector3d drel = Eigen::Vector3d::Zero();
    double w = M_PI;
    for (int f = 0; f < graph.l_edge; ++f) {
      for (int c = 0; c < 3; ++c) {
        double de_s = double(back.edge_feature_grad[eid](6 * f + c));
        double de_c = double(back.edge_feature_grad[eid](6 * f + 3 + c));
        drel(c) += de_s * w * std::cos(w * rel(c)) - de_c * w * std::sin(w * rel(c));
      }
      w *= 2;
    }
    dpos[size_t(e.dst)] += drel;
    dpos[size_t(e.src)] -= drel;
  }

  std::vector<Eigen::Matrix<double, 6, 1>> out(size_t(graph.n_candidates),
                                               Eigen::Matrix<double, 6, 1>::Zero());
  for (int32_t ci = 0; ci < graph.n_candidates; ++ci) {
    const int32_t base = graph.cand_node_start[size_t(ci)];
    auto& g = out[size_t(ci)];
    for (int32_t i = 0; i < graph.k; ++i) {  // grasped nodes move, target nodes stay
      const auto& nd = graph.nodes[size_t(base + i)];
      g.template head<3>() += dpos[size_t(base + i)];
      g.template tail<3>() += nd.position.cross(dpos[size_t(base + i)]);
      for (int c = 0; c < channels; ++c) {
        Eigen::Vector3d f = nd.feature.row(c).transpose();
        Eigen::Vector3d df(double(back.node_input_grad(3 * c + 0, base + i)),
                           double(back.node_input_grad(3 * c + 1, base + i)),
                           double(back.node_input_grad(3 * c + 2, base + i)));
        g.template tail<3>() += f.cross(df);
      }
    }
  }
  return out;
}

}  // namespace

template <typename S>
Eigen::Matrix<double, 6, 1> pose_gradient(const AlignmentGraph& graph, const GraphIndex& index,
                                          const EnergyModelParams<S>& params,
                                          int candidate_index) {
  check(candidate_index >= 0 && candidate_index < graph.n_candidates, ErrorKind::Domain,
        "pose_gradient: no such candidate");
  EnergyForwardCache<S> cache;
  energy_forward(graph, index, params, &cache);
  VecX<S> upstream = VecX<S>::Zero(graph.n_candidates);
  upstream(candidate_index) = S(1);
  EnergyBackwardResult<S> back = energy_backward(graph, index, params, cache, upstream, true);
  return extract_pose_grads(graph, back, params.config.channels)[size_t(candidate_index)];
}

template <typename S>
std::vector<Eigen::Matrix<double, 6, 1>> pose_gradients_batch(const AlignmentGraph& graph,
                                                              const GraphIndex& index,
                                                              const EnergyModelParams<S>& params,
                                                              VecX<S>* energies) {
  EnergyForwardCache<S> cache;
  VecX<S> e = energy_forward(graph, index, params, &cache);
  if (energies) *energies = e;
  // Candidates exchange no messages, so unit upstream everywhere gives each
  // candidate exactly its own gradient on its own nodes and edges.
  VecX<S> upstream = VecX<S>::Ones(graph.n_candidates);
  EnergyBackwardResult<S> back = energy_backward(graph, index, params, cache, upstream, true);
  return extract_pose_grads(graph, back, params.config.channels);
}

template <typename S>
S gradient_penalty(const AlignmentGraph& graph, const GraphIndex& index,
                   const EnergyModelParams<S>& params, int candidate_index,
                   EdgeFeatureOverride<S>* direction) {
  EnergyForwardCache<S> cache;
  energy_forward(graph, index, params, &cache);
  VecX<S> upstream = VecX<S>::Zero(graph.n_candidates);
  upstream(candidate_index) = S(1);
  EnergyBackwardResult<S> back = energy_backward(graph, index, params, cache, upstream, true);

  const int32_t base = graph.cand_node_start[size_t(candidate_index)];
  const int32_t lim = base + 2 * graph.k;
  S total = 0;
  int64_t count = 0;
  if (direction) {
    direction->edge_ids.clear();
    direction->features.clear();
  }
  for (size_t eid = 0; eid < graph.edges.size(); ++eid) {
    const auto& e = graph.edges[eid];
    if (e.kind != EdgeKind::CrossObject) continue;
    if (e.src < base || e.src >= lim) continue;  // positive candidate only
    total += back.edge_feature_grad[eid].squaredNorm();
    ++count;
    if (direction) {
      direction->edge_ids.push_back(int32_t(eid));
      direction->features.push_back(back.edge_feature_grad[eid]);
    }
  }
  return count > 0 ? total / S(count) : S(0);
}

template <typename S>
S power_iteration_estimate(const MatX<S>& w, VecX<S>& u, VecX<S>& v) {
  if (u.size() != w.rows() || v.size() != w.cols()) {
    // Deterministic seed from the matrix shape.
    Rng rng = derive_rng(0x5eedu, "spectral", uint64_t(w.rows()) * 1315423911u + uint64_t(w.cols()));
    u = VecX<S>::NullaryExpr(w.rows(), [&rng]() { return S(rng.normal()); });
    u.normalize();
    v = VecX<S>::Zero(w.cols());
  }
  v.noalias() = w.transpose() * u;
  S vn = v.norm();
  if (vn > S(0)) v /= vn;
  u.noalias() = w * v;
  S un = u.norm();
  if (un > S(0)) u /= un;
  return u.dot(w * v);
}

namespace {

// Registry of normalized matrices: every layer matrix plus head matrices.
template <typename S>
std::vector<MatX<S>*> sn_registry(EnergyModelParams<S>& params) {
  std::vector<MatX<S>*> mats;
  for (auto& l : params.layers) {
    mats.push_back(&l.w1);
    for (int k = 0; k < kNumEdgeKinds; ++k) {
      mats.push_back(&l.wq[size_t(k)]);
      mats.push_back(&l.wk[size_t(k)]);
      mats.push_back(&l.wv[size_t(k)]);
      mats.push_back(&l.we[size_t(k)]);
    }
    mats.push_back(&l.mix);
  }
  for (auto& m : params.head_w) mats.push_back(&m);
  return mats;
}

}  // namespace

template <typename S>
void spectral_normalize(EnergyModelParams<S>& params) {
  std::vector<MatX<S>*> mats = sn_registry(params);
  params.sn_u.resize(mats.size());
  params.sn_v.resize(mats.size());
  for (size_t i = 0; i < mats.size(); ++i) {
    S sigma = power_iteration_estimate(*mats[i], params.sn_u[i], params.sn_v[i]);
    // Guard: the zero-initialized head layer (and anything near zero) is left
    // alone until it grows into a meaningful operator.
    if (sigma > S(0.05)) *mats[i] /= sigma;
  }
}

template <typename S>
std::vector<S> spectral_estimates(const EnergyModelParams<S>& params) {
  auto& mutable_params = const_cast<EnergyModelParams<S>&>(params);
  std::vector<MatX<S>*> mats = sn_registry(mutable_params);
  std::vector<S> out(mats.size());
  for (size_t i = 0; i < mats.size(); ++i) {
    VecX<S> u, v;  // scratch copies: warm start without advancing the state
    if (i < params.sn_u.size()) u = params.sn_u[i];
    if (i < params.sn_v.size()) v = params.sn_v[i];
    out[i] = power_iteration_estimate(*mats[i], u, v);
  }
  return out;
}

template <typename S>
void save_energy_model(const EnergyModelParams<S>& params, const std::string& path) {
  BinWriter w;
  w.put_bytes(kMagic, sizeof(kMagic));
  w.put(kVersion);
  w.put(uint8_t(sizeof(S)));
  w.put(params.config.digest());
  const ModelConfig& c = params.config;
  w.put(int32_t(c.n_layers));
  w.put(int32_t(c.n_heads));
  w.put(int32_t(c.head_dim));
  w.put(uint32_t(c.mlp_dims.size()));
  for (int d : c.mlp_dims) w.put(int32_t(d));
  w.put(int32_t(c.l_edge));
  w.put(int32_t(c.channels));
  w.put(uint8_t(c.mode));
  w.put(params.encoder_digest);
  w.put(params.step);

  auto put_mat = [&w](const MatX<S>& m) {
    w.put(uint32_t(m.rows()));
    w.put(uint32_t(m.cols()));
    w.put_bytes(reinterpret_cast<const char*>(m.data()), size_t(m.size()) * sizeof(S));
  };
  EnergyModelParams<S>& mut = const_cast<EnergyModelParams<S>&>(params);
  for (auto& [ptr, sz] : energy_param_refs(mut)) {
    w.put(uint64_t(sz));
    w.put_bytes(reinterpret_cast<const char*>(ptr), size_t(sz) * sizeof(S));
  }
  w.put(uint32_t(params.sn_u.size()));
  for (size_t i = 0; i < params.sn_u.size(); ++i) {
    put_mat(MatX<S>(params.sn_u[i]));
    put_mat(MatX<S>(params.sn_v[i]));
  }
  write_file_atomic(path, w.buf);
}

template <typename S>
EnergyModelParams<S> load_energy_model(const std::string& path) {
  std::string bytes = read_file(path);
  BinReader r{bytes.data(), bytes.data() + bytes.size()};
  char magic[8];
  r.get_bytes(magic, sizeof(magic));
  check(std::memcmp(magic, kMagic, sizeof(kMagic)) == 0, ErrorKind::Data,
        "energy checkpoint: bad magic");
  check(r.get<uint32_t>() == kVersion, ErrorKind::Data, "energy checkpoint: unsupported version");
  check(r.get<uint8_t>() == sizeof(S), ErrorKind::Data,
        "energy checkpoint: scalar width mismatch");
  uint64_t digest = r.get<uint64_t>();

  ModelConfig c;
  c.n_layers = r.get<int32_t>();
  c.n_heads = r.get<int32_t>();
  c.head_dim = r.get<int32_t>();
  uint32_t nmlp = r.get<uint32_t>();
  c.mlp_dims.clear();
  for (uint32_t i = 0; i < nmlp; ++i) c.mlp_dims.push_back(r.get<int32_t>());
  c.l_edge = r.get<int32_t>();
  c.channels = r.get<int32_t>();
  c.mode = EnergyMode(r.get<uint8_t>());
  check(c.digest() == digest, ErrorKind::Data, "energy checkpoint: config digest mismatch");

  EnergyModelParams<S> p = init_energy_model<S>(c, 0);
  p.encoder_digest = r.get<uint64_t>();
  p.step = r.get<int64_t>();
  for (auto& [ptr, sz] : energy_param_refs(p)) {
    uint64_t stored = r.get<uint64_t>();
    check(int64_t(stored) == sz, ErrorKind::Data, "energy checkpoint: tensor size mismatch");
    r.get_bytes(reinterpret_cast<char*>(ptr), size_t(sz) * sizeof(S));
  }
  auto get_vec = [&r]() {
    uint32_t rows = r.get<uint32_t>();
    uint32_t cols = r.get<uint32_t>();
    check(cols == 1, ErrorKind::Data, "energy checkpoint: malformed vector");
    VecX<S> v(rows);
    r.get_bytes(reinterpret_cast<char*>(v.data()), size_t(rows) * sizeof(S));
    return v;
  };
  uint32_t nsn = r.get<uint32_t>();
  p.sn_u.resize(nsn);
  p.sn_v.resize(nsn);
  for (uint32_t i = 0; i < nsn; ++i) {
    p.sn_u[i] = get_vec();
    p.sn_v[i] = get_vec();
  }
  check(r.p == r.end, ErrorKind::Data, "energy checkpoint: trailing bytes");
  return p;
}

// Explicit instantiations: float fast path, double verification path.
#define GALIGN_INSTANTIATE(S)                                                                   \
  template EnergyModelParams<S> init_energy_model<S>(const ModelConfig&, uint64_t);             \
  template std::vector<std::pair<S*, int64_t>> energy_param_refs<S>(EnergyModelParams<S>&);     \
  template EnergyModelParams<S> zero_like<S>(const EnergyModelParams<S>&);                      \
  template MatX<S> attention_layer<S>(const AlignmentGraph&, const GraphIndex&,                 \
                                      const EnergyLayerParams<S>&, const EnergyModelParams<S>&, \
                                      const MatX<S>&);                                          \
  template VecX<S> energy_forward<S>(const AlignmentGraph&, const GraphIndex&,                  \
                                     const EnergyModelParams<S>&, EnergyForwardCache<S>*,       \
                                     const EdgeFeatureOverride<S>*);                            \
  template EnergyBackwardResult<S> energy_backward<S>(                                          \
      const AlignmentGraph&, const GraphIndex&, const EnergyModelParams<S>&,                    \
      const EnergyForwardCache<S>&, const VecX<S>&, bool);                                      \
  template Eigen::Matrix<double, 6, 1> pose_gradient<S>(const AlignmentGraph&,                  \
                                                        const GraphIndex&,                      \
                                                        const EnergyModelParams<S>&, int);      \
  template std::vector<Eigen::Matrix<double, 6, 1>> pose_gradients_batch<S>(                    \
      const AlignmentGraph&, const GraphIndex&, const EnergyModelParams<S>&, VecX<S>*);         \
  template S gradient_penalty<S>(const AlignmentGraph&, const GraphIndex&,                      \
                                 const EnergyModelParams<S>&, int, EdgeFeatureOverride<S>*);    \
  template S power_iteration_estimate<S>(const MatX<S>&, VecX<S>&, VecX<S>&);                   \
  template void spectral_normalize<S>(EnergyModelParams<S>&);                                   \
  template std::vector<S> spectral_estimates<S>(const EnergyModelParams<S>&);                   \
  template void save_energy_model<S>(const EnergyModelParams<S>&, const std::string&);          \
  template EnergyModelParams<S> load_energy_model<S>(const std::string&);

GALIGN_INSTANTIATE(float)
GALIGN_INSTANTIATE(double)

}  // namespace galign
