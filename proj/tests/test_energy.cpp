#include "galign/energy.hpp"

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>

#include <Eigen/SVD>

#include "galign/error.hpp"
#include "galign/rng.hpp"
#include "galign/se3.hpp"

using namespace galign;

namespace {

LocalFeatureSet random_features(Rng& rng, int k, int c) {
  LocalFeatureSet f;
  f.positions.resize(k, 3);
  for (int i = 0; i < k; ++i) {
    f.positions.row(i) = (0.2 * rng.normal3()).transpose();
    Eigen::Matrix<double, Eigen::Dynamic, 3> m(c, 3);
    for (int r = 0; r < c; ++r) m.row(r) = rng.normal3().transpose();
    f.features.push_back(m);
  }
  return f;
}

ModelConfig mini_config(int layers = 2) {
  ModelConfig cfg;
  cfg.n_layers = layers;
  cfg.n_heads = 2;
  cfg.head_dim = 3;
  cfg.mlp_dims = {5, 4};
  cfg.l_edge = 2;
  cfg.channels = 4;
  return cfg;
}

struct TestScene {
  AlignmentGraph graph;
  std::vector<PairGraph> demos;
  PairGraph test;
  std::vector<RigidTransform> moves;  // applied per candidate
};

TestScene make_scene(Rng& rng, int n_demos, int m, int k, int c, int l_edge) {
  TestScene s;
  for (int i = 0; i < n_demos; ++i)
    s.demos.push_back(
        build_pair_graph(random_features(rng, k, c), random_features(rng, k, c), l_edge));
  s.test = build_pair_graph(random_features(rng, k, c), random_features(rng, k, c), l_edge);
  s.graph = attach_context(s.demos, s.test);
  attach_candidates(s.graph, m);
  s.moves.assign(size_t(m), RigidTransform::identity());
  for (int ci = 1; ci < m; ++ci) {
    s.moves[size_t(ci)] = random_transform(0.3, M_PI, rng);
    transform_candidate(s.graph, ci, s.moves[size_t(ci)]);
  }
  return s;
}

double top_singular(const Eigen::MatrixXd& m) {
  return Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues()(0);
}

}  // namespace

TEST_CASE("attention layer matches a hand computation") {
  // Two sources feeding one destination through geometric edges; everything
  // recomputed here with plain dense algebra.
  AlignmentGraph g;
  g.k = 1;
  g.l_edge = 1;
  for (int i = 0; i < 3; ++i) {
    NodeRecord n;
    n.kind = NodeKind::GraspedTest;
    n.feature.resize(0, 3);
    g.nodes.push_back(n);
  }
  Eigen::VectorXd f0(6), f1(6);
  f0 << 0.5, -0.2, 0.1, 0.9, 0.8, -0.3;
  f1 << -0.4, 0.7, 0.2, -0.6, 0.1, 0.5;
  g.edges.push_back({EdgeKind::WithinObject, 0, 2, f0});
  g.edges.push_back({EdgeKind::WithinObject, 1, 2, f1});
  GraphIndex idx = build_index(g);

  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.n_heads = 1;
  cfg.head_dim = 2;
  cfg.l_edge = 1;
  cfg.channels = 2;
  EnergyModelParams<double> p;
  p.config = cfg;

  EnergyLayerParams<double> layer;
  Eigen::MatrixXd wq(2, 2), wk(2, 2), wv(2, 2), w1(2, 2), mix(2, 2), we(2, 6);
  wq << 0.3, -0.2, 0.1, 0.4;
  wk << 0.5, 0.1, -0.3, 0.2;
  wv << 1.0, 0.0, 0.0, -1.0;
  w1 << 0.7, 0.2, -0.1, 0.5;
  mix << 0.6, -0.2, 0.3, 0.8;
  we << 0.2, -0.1, 0.05, 0.3, -0.25, 0.15, 0.1, 0.4, -0.3, 0.2, 0.05, -0.15;
  layer.w1 = w1;
  layer.mix = mix;
  for (int k = 0; k < kNumEdgeKinds; ++k) {
    layer.wq[size_t(k)] = wq;
    layer.wk[size_t(k)] = wk;
    layer.wv[size_t(k)] = wv;
    layer.we[size_t(k)] = we;
  }

  Eigen::MatrixXd x(2, 3);
  x << 1.0, 0.5, -1.0, 2.0, -1.0, 0.3;

  Eigen::MatrixXd got = attention_layer<double>(g, idx, layer, p, x);

  Eigen::Vector2d q2 = wq * x.col(2);
  Eigen::Vector2d k0 = wk * x.col(0) + we * f0;
  Eigen::Vector2d k1 = wk * x.col(1) + we * f1;
  double l0 = q2.dot(k0) / std::sqrt(2.0), l1 = q2.dot(k1) / std::sqrt(2.0);
  double m = std::max(l0, l1);
  double a0 = std::exp(l0 - m), a1 = std::exp(l1 - m);
  double z = a0 + a1;
  a0 /= z;
  a1 /= z;
  Eigen::Vector2d out = a0 * (wv * x.col(0) + we * f0) + a1 * (wv * x.col(1) + we * f1);
  Eigen::MatrixXd want = w1 * x;
  want.col(2) += mix * out;

  CHECK((got - want).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("attention weights normalize per destination and head") {
  Rng rng(401);
  TestScene s = make_scene(rng, 1, 2, 2, 4, 2);
  GraphIndex idx = build_index(s.graph);
  ModelConfig cfg = mini_config();
  auto p = init_energy_model<double>(cfg, 7);
  EnergyForwardCache<double> cache;
  energy_forward(s.graph, idx, p, &cache);

  for (int l = 0; l < cfg.n_layers; ++l)
    for (int kind = 0; kind < kNumEdgeKinds; ++kind) {
      const auto& alpha = cache.alpha[size_t(l)][size_t(kind)];
      if (alpha.size() == 0) continue;
      for (size_t dst = 0; dst < s.graph.nodes.size(); ++dst) {
        const int32_t lo = idx.offsets[size_t(kind)][dst], hi = idx.offsets[size_t(kind)][dst + 1];
        if (lo == hi) continue;
        for (int h = 0; h < cfg.n_heads; ++h) {
          double sum = 0;
          for (int32_t j = lo; j < hi; ++j) {
            int64_t col = cache.edge_col[size_t(kind)][size_t(idx.edge_ids[size_t(kind)][size_t(j)])];
            sum += alpha(col * cfg.n_heads + h);
          }
          CHECK(std::abs(sum - 1.0) < 1e-12);
        }
      }
    }
}

TEST_CASE("a single incoming edge gets full attention") {
  // k = 1 leaves every destination exactly one cross-object and one
  // demo-to-test source; the softmax must be exactly one there.
  Rng rng(402);
  TestScene s = make_scene(rng, 1, 1, 1, 4, 2);
  GraphIndex idx = build_index(s.graph);
  auto p = init_energy_model<double>(mini_config(), 9);
  EnergyForwardCache<double> cache;
  energy_forward(s.graph, idx, p, &cache);

  for (int l = 0; l < 2; ++l)
    for (int kind : {int(EdgeKind::CrossObject), int(EdgeKind::DemoToTest)}) {
      const auto& alpha = cache.alpha[size_t(l)][size_t(kind)];
      REQUIRE(alpha.size() > 0);
      for (int64_t i = 0; i < alpha.size(); ++i) CHECK(alpha(i) == 1.0);
    }
}

TEST_CASE("nodes without incoming edges keep only the root transform") {
  AlignmentGraph g;
  g.k = 1;
  g.l_edge = 1;
  for (int i = 0; i < 2; ++i) {
    NodeRecord n;
    n.kind = NodeKind::GraspedTest;
    g.nodes.push_back(n);
  }
  Eigen::VectorXd f(6);
  f << 0.1, 0.2, 0.3, 0.4, 0.5, 0.6;
  g.edges.push_back({EdgeKind::WithinObject, 0, 1, f});
  GraphIndex idx = build_index(g);

  ModelConfig cfg;
  cfg.n_heads = 1;
  cfg.head_dim = 2;
  cfg.l_edge = 1;
  cfg.channels = 2;
  EnergyModelParams<double> p;
  p.config = cfg;
  Rng rng(55);
  EnergyLayerParams<double> layer;
  auto draw = [&rng](int r, int c) {
    return Eigen::MatrixXd::NullaryExpr(r, c, [&rng]() { return rng.normal(); });
  };
  layer.w1 = draw(2, 2);
  layer.mix = draw(2, 2);
  for (int k = 0; k < kNumEdgeKinds; ++k) {
    layer.wq[size_t(k)] = draw(2, 2);
    layer.wk[size_t(k)] = draw(2, 2);
    layer.wv[size_t(k)] = draw(2, 2);
    layer.we[size_t(k)] = draw(2, 6);
  }
  Eigen::MatrixXd x = draw(2, 2);
  Eigen::MatrixXd got = attention_layer<double>(g, idx, layer, p, x);
  // Node 0 has no sources: its column is the root term alone, bitwise.
  CHECK((got.col(0) - layer.w1 * x.col(0)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("batched candidates match single-candidate passes") {
  Rng rng(403);
  const int m = 5;
  TestScene s = make_scene(rng, 1, m, 2, 4, 2);
  GraphIndex idx = build_index(s.graph);
  auto p = init_energy_model<double>(mini_config(), 11);
  VecX<double> batched = energy_forward(s.graph, idx, p);
  REQUIRE(batched.size() == m);

  for (int ci = 0; ci < m; ++ci) {
    AlignmentGraph g1 = attach_context(s.demos, s.test);
    if (ci > 0) transform_candidate(g1, 0, s.moves[size_t(ci)]);
    GraphIndex idx1 = build_index(g1);
    VecX<double> single = energy_forward(g1, idx1, p);
    CHECK(std::abs(single(0) - batched(ci)) < 1e-9);
  }
}

TEST_CASE("batched pose gradients equal per-candidate pose gradients") {
  Rng rng(407);
  const int m = 6;
  TestScene s = make_scene(rng, 2, m, 3, 4, 2);
  GraphIndex idx = build_index(s.graph);
  auto p = init_energy_model<double>(mini_config(), 29);
  for (auto [ptr, n] : energy_param_refs(p))
    for (int64_t i = 0; i < n; ++i) ptr[i] = 0.3 * rng.normal();

  VecX<double> energies;
  auto batch = pose_gradients_batch(s.graph, idx, p, &energies);
  REQUIRE(batch.size() == size_t(m));
  VecX<double> direct = energy_forward(s.graph, idx, p);
  CHECK((energies - direct).cwiseAbs().maxCoeff() == 0.0);
  for (int ci = 0; ci < m; ++ci) {
    auto single = pose_gradient(s.graph, idx, p, ci);
    CHECK((batch[size_t(ci)] - single).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("energy is invariant to a global translation") {
  Rng rng(404);
  const int m = 3, k = 2, c = 4, l_edge = 2;
  TestScene s = make_scene(rng, 2, m, k, c, l_edge);
  GraphIndex idx = build_index(s.graph);
  auto p = init_energy_model<double>(mini_config(), 13);
  VecX<double> base = energy_forward(s.graph, idx, p);

  const Eigen::Vector3d off(0.37, -1.21, 0.54);
  auto shift = [&off](LocalFeatureSet f) {
    f.positions.rowwise() += off.transpose();
    return f;
  };
  // Same scene regenerated from the same stream, every position shifted.
  Rng rng2(404);
  TestScene t;
  for (int i = 0; i < 2; ++i)
    t.demos.push_back(build_pair_graph(shift(random_features(rng2, k, c)),
                                       shift(random_features(rng2, k, c)), l_edge));
  t.test = build_pair_graph(shift(random_features(rng2, k, c)),
                            shift(random_features(rng2, k, c)), l_edge);
  t.graph = attach_context(t.demos, t.test);
  attach_candidates(t.graph, m);
  RigidTransform tv = RigidTransform::translation(off);
  for (int ci = 1; ci < m; ++ci) {
    RigidTransform mv = random_transform(0.3, M_PI, rng2);
    // Same candidate pose expressed in the shifted world.
    transform_candidate(t.graph, ci, tv * mv * tv.inverse());
  }
  GraphIndex idx2 = build_index(t.graph);
  VecX<double> shifted = energy_forward(t.graph, idx2, p);

  for (int ci = 0; ci < m; ++ci) CHECK(std::abs(shifted(ci) - base(ci)) < 1e-9);
}

TEST_CASE("power iteration pins the dominant singular value") {
  MatX<double> w = MatX<double>::Zero(3, 3);
  w(0, 0) = 5.0;
  w(1, 1) = 1.0;
  w(2, 2) = 1.0;
  VecX<double> u, v;
  double sigma = 0;
  for (int i = 0; i < 50; ++i) sigma = power_iteration_estimate(w, u, v);
  CHECK(std::abs(sigma - 5.0) < 1e-6);

  w /= sigma;
  CHECK(std::abs(top_singular(w) - 1.0) < 1e-6);

  Rng rng(405);
  MatX<double> r = MatX<double>::NullaryExpr(64, 64, [&rng]() { return rng.normal(); });
  VecX<double> ru, rv;
  for (int i = 0; i < 20; ++i) {
    double est = power_iteration_estimate(r, ru, rv);
    if (est > 0.05) r /= est;
  }
  double top = top_singular(r);
  CHECK(top > 0.99);
  CHECK(top < 1.01);
}

TEST_CASE("spectral normalization tames the registry and spares the zero head") {
  auto p = init_energy_model<double>(mini_config(), 17);
  p.layers[0].wq[0] *= 3.0;
  p.layers[1].mix *= 0.5;
  CHECK(p.head_w.back().isZero());
  for (int i = 0; i < 25; ++i) spectral_normalize(p);

  for (auto& l : p.layers) {
    CHECK(std::abs(top_singular(l.w1) - 1.0) < 0.05);
    CHECK(std::abs(top_singular(l.mix) - 1.0) < 0.05);
    for (int k = 0; k < kNumEdgeKinds; ++k) {
      CHECK(std::abs(top_singular(l.wq[size_t(k)]) - 1.0) < 0.05);
      CHECK(std::abs(top_singular(l.wk[size_t(k)]) - 1.0) < 0.05);
      CHECK(std::abs(top_singular(l.wv[size_t(k)]) - 1.0) < 0.05);
      CHECK(std::abs(top_singular(l.we[size_t(k)]) - 1.0) < 0.05);
    }
  }
  for (size_t j = 0; j + 1 < p.head_w.size(); ++j)
    CHECK(std::abs(top_singular(p.head_w[j]) - 1.0) < 0.05);
  CHECK(p.head_w.back().isZero());  // below the dead-zone guard, untouched
}

TEST_CASE("pose gradient matches finite differences") {
  const double h = 1e-4;
  for (int trial = 0; trial < 20; ++trial) {
    Rng rng(500 + uint64_t(trial));
    int n = 1 + int(rng.uniform_int(2));
    int m = 1 + int(rng.uniform_int(3));
    int k = 2 + int(rng.uniform_int(2));
    TestScene s = make_scene(rng, n, m, k, 4, 2);
    GraphIndex idx = build_index(s.graph);
    auto p = init_energy_model<double>(mini_config(), 600 + uint64_t(trial));
    // Random head so the energy actually depends on everything.
    Rng hr(700 + uint64_t(trial));
    p.head_w.back() = MatX<double>::NullaryExpr(1, p.head_w.back().cols(),
                                                [&hr]() { return hr.normal(); });
    int ci = int(rng.uniform_int(uint64_t(m)));

    Eigen::Matrix<double, 6, 1> g = pose_gradient(s.graph, idx, p, ci);

    for (int i = 0; i < 6; ++i) {
      Twist xi;
      if (i < 3)
        xi.trans(i) = 1.0;
      else
        xi.rot(i - 3) = 1.0;
      auto probe = [&](double t) {
        AlignmentGraph gc = s.graph;
        Twist step{xi.rot * t, xi.trans * t};
        transform_candidate(gc, ci, expmap(step));
        GraphIndex ic = build_index(gc);
        return double(energy_forward(gc, ic, p)(ci));
      };
      double fd = (probe(h) - probe(-h)) / (2 * h);
      CHECK(std::abs(fd - g(i)) < 1e-3 * std::max(1.0, std::abs(g(i))));
    }
  }
}

TEST_CASE("parameter gradients match finite differences") {
  Rng rng(406);
  TestScene s = make_scene(rng, 1, 2, 2, 4, 2);
  GraphIndex idx = build_index(s.graph);
  auto p = init_energy_model<double>(mini_config(), 19);
  Rng hr(20);
  p.head_w.back() =
      MatX<double>::NullaryExpr(1, p.head_w.back().cols(), [&hr]() { return hr.normal(); });

  VecX<double> up(2);
  up << 0.8, -1.3;

  EnergyForwardCache<double> cache;
  energy_forward(s.graph, idx, p, &cache);
  auto back = energy_backward(s.graph, idx, p, cache, up, false);

  auto loss = [&]() { return double(up.dot(energy_forward(s.graph, idx, p))); };

  auto prefs = energy_param_refs(p);
  auto grefs = energy_param_refs(back.grads);
  REQUIRE(prefs.size() == grefs.size());
  const double h = 1e-5;
  Rng pick(21);
  int checked = 0;
  for (size_t t = 0; t < prefs.size(); ++t) {
    int probes = int(std::min<int64_t>(3, prefs[t].second));
    for (int j = 0; j < probes; ++j) {
      int64_t i = int64_t(pick.uniform_int(uint64_t(prefs[t].second)));
      double save = prefs[t].first[i];
      prefs[t].first[i] = save + h;
      double lp = loss();
      prefs[t].first[i] = save - h;
      double lm = loss();
      prefs[t].first[i] = save;
      double fd = (lp - lm) / (2 * h);
      double an = grefs[t].first[i];
      CHECK(std::abs(fd - an) < 1e-3 * std::max(1.0, std::abs(an)));
      ++checked;
    }
  }
  CHECK(checked > 100);
}

TEST_CASE("forward and backward are pure") {
  Rng rng(407);
  TestScene s = make_scene(rng, 1, 3, 2, 4, 2);
  GraphIndex idx = build_index(s.graph);
  auto p = init_energy_model<double>(mini_config(), 23);
  Rng hr(24);
  p.head_w.back() =
      MatX<double>::NullaryExpr(1, p.head_w.back().cols(), [&hr]() { return hr.normal(); });

  EnergyForwardCache<double> cache;
  VecX<double> e1 = energy_forward(s.graph, idx, p, &cache);
  VecX<double> e2 = energy_forward(s.graph, idx, p);
  CHECK((e1 - e2).cwiseAbs().maxCoeff() == 0.0);

  VecX<double> up(3);
  up << 1.0, -0.5, 0.25;
  auto b1 = energy_backward(s.graph, idx, p, cache, up, true);
  auto b2 = energy_backward(s.graph, idx, p, cache, up, true);
  auto r1 = energy_param_refs(b1.grads);
  auto r2 = energy_param_refs(b2.grads);
  for (size_t t = 0; t < r1.size(); ++t)
    for (int64_t i = 0; i < r1[t].second; ++i) CHECK(r1[t].first[i] == r2[t].first[i]);
  CHECK((b1.node_input_grad - b2.node_input_grad).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("a fresh model scores every candidate zero") {
  Rng rng(408);
  TestScene s = make_scene(rng, 2, 4, 2, 4, 2);
  GraphIndex idx = build_index(s.graph);
  auto p = init_energy_model<double>(mini_config(), 29);
  VecX<double> e = energy_forward(s.graph, idx, p);
  for (int i = 0; i < e.size(); ++i) CHECK(e(i) == 0.0);
}

TEST_CASE("gradient penalty is nonnegative and matches its inner derivative") {
  Rng rng(409);
  TestScene s = make_scene(rng, 1, 2, 2, 4, 2);
  GraphIndex idx = build_index(s.graph);

  auto fresh = init_energy_model<double>(mini_config(), 31);
  CHECK(gradient_penalty(s.graph, idx, fresh, 0) == 0.0);

  auto p = fresh;
  Rng hr(32);
  p.head_w.back() =
      MatX<double>::NullaryExpr(1, p.head_w.back().cols(), [&hr]() { return hr.normal(); });
  EdgeFeatureOverride<double> dir;
  double val = gradient_penalty(s.graph, idx, p, 0, &dir);
  CHECK(val >= 0.0);
  REQUIRE(!dir.edge_ids.empty());

  // Cross-check one raw edge gradient against a finite difference through the
  // override path.
  double acc = 0;
  for (auto& f : dir.features) acc += f.squaredNorm();
  CHECK(std::abs(val - acc / double(dir.features.size())) < 1e-12);

  const int32_t eid = dir.edge_ids[0];
  VecX<double> u = VecX<double>::NullaryExpr(12, [&hr]() { return hr.normal(); });
  u.normalize();
  const double h = 1e-5;
  auto probe = [&](double t) {
    EdgeFeatureOverride<double> ov;
    ov.edge_ids = {eid};
    ov.features = {VecX<double>(s.graph.edges[size_t(eid)].feature + t * u)};
    return double(energy_forward<double>(s.graph, idx, p, nullptr, &ov)(0));
  };
  double fd = (probe(h) - probe(-h)) / (2 * h);
  double an = dir.features[0].dot(u);
  CHECK(std::abs(fd - an) < 1e-3 * std::max(1.0, std::abs(an)));
}

TEST_CASE("forward time grows linearly with candidate count") {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.n_heads = 4;
  cfg.head_dim = 16;
  cfg.mlp_dims = {32, 32};
  cfg.l_edge = 2;
  cfg.channels = 8;
  auto p = init_energy_model<float>(cfg, 37);

  Rng rng(410);
  std::vector<double> ms = {4, 16, 28, 40};
  std::vector<double> secs;
  for (double md : ms) {
    TestScene s = make_scene(rng, 1, int(md), 6, 8, 2);
    GraphIndex idx = build_index(s.graph);
    energy_forward(s.graph, idx, p);  // warm caches
    double best = 1e30;
    for (int rep = 0; rep < 3; ++rep) {
      auto t0 = std::chrono::steady_clock::now();
      energy_forward(s.graph, idx, p);
      auto t1 = std::chrono::steady_clock::now();
      best = std::min(best, std::chrono::duration<double>(t1 - t0).count());
    }
    secs.push_back(best);
  }
  // Least-squares line fit; r^2 against the linear model.
  double n = double(ms.size()), sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (size_t i = 0; i < ms.size(); ++i) {
    sx += ms[i];
    sy += secs[i];
    sxx += ms[i] * ms[i];
    sxy += ms[i] * secs[i];
  }
  double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  double icpt = (sy - slope * sx) / n;
  double ss_res = 0, ss_tot = 0;
  for (size_t i = 0; i < ms.size(); ++i) {
    ss_res += std::pow(secs[i] - (icpt + slope * ms[i]), 2);
    ss_tot += std::pow(secs[i] - sy / n, 2);
  }
  double r2 = 1.0 - ss_res / ss_tot;
  INFO("timings " << secs[0] << " " << secs[1] << " " << secs[2] << " " << secs[3]
                  << " r2=" << r2);
  CHECK(slope > 0.0);
  CHECK(r2 > 0.95);
}

TEST_CASE("checkpoints round trip and refuse mismatches") {
  auto p = init_energy_model<float>(mini_config(), 41);
  p.step = 1234;
  p.encoder_digest = 0xabcdef12345678ull;
  spectral_normalize(p);

  std::string path = "/tmp/galign_energy_ckpt_" + std::to_string(::getpid()) + ".bin";
  save_energy_model(p, path);
  auto q = load_energy_model<float>(path);

  CHECK(q.step == p.step);
  CHECK(q.encoder_digest == p.encoder_digest);
  CHECK(q.config.digest() == p.config.digest());
  auto rp = energy_param_refs(p);
  auto rq = energy_param_refs(q);
  REQUIRE(rp.size() == rq.size());
  for (size_t t = 0; t < rp.size(); ++t) {
    REQUIRE(rp[t].second == rq[t].second);
    for (int64_t i = 0; i < rp[t].second; ++i) CHECK(rp[t].first[i] == rq[t].first[i]);
  }
  REQUIRE(q.sn_u.size() == p.sn_u.size());
  for (size_t i = 0; i < p.sn_u.size(); ++i)
    CHECK((q.sn_u[i] - p.sn_u[i]).cwiseAbs().maxCoeff() == 0.0f);

  // Wrong scalar width refuses to load.
  CHECK_THROWS_AS(load_energy_model<double>(path), Error);

  // Corrupt the stored config digest: refused.
  {
    FILE* f = fopen(path.c_str(), "r+b");
    REQUIRE(f);
    fseek(f, 14, SEEK_SET);
    int b = fgetc(f);
    fseek(f, 14, SEEK_SET);
    fputc(b ^ 0x5a, f);
    fclose(f);
  }
  CHECK_THROWS_AS(load_energy_model<float>(path), Error);
  std::remove(path.c_str());
}
