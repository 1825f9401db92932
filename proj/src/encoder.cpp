#include "galign/encoder.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <limits>

#include "galign/binio.hpp"
#include "galign/error.hpp"
#include "galign/optim.hpp"
#include "galign/rng.hpp"
#include "galign/shapes.hpp"

namespace galign {

namespace {

constexpr double kLeakySlope = 0.2;
constexpr char kMagic[8] = {'G', 'A', 'L', 'N', 'E', 'N', 'C', '1'};
constexpr uint32_t kVersion = 1;

struct LayerDims {
  int in, out;
  bool nonlinear;
};

// Eight mixing layers; after layers 1 and 4 the mean-pooled group feature is
// concatenated back onto every point (in -> 2*out of previous), and layers 3
// and 6 carry additive skips from the layer before them.
std::vector<LayerDims> arch_dims(int c) {
  const int w1 = c / 2, h = 2 * c;
  return {{1, w1, true},      {2 * w1, h, true}, {h, h, true}, {h, h, true},
          {2 * h, h, true},   {h, h, true},      {h, h, true}, {h, c, false}};
}

int readout_dim(const EncoderConfig& cfg) {
  return cfg.channels + cfg.channels * (cfg.channels - 1) / 2 + cfg.channels +
         6 * cfg.l_freq_query;
}

// --- vector-channel primitives ---------------------------------------------
// Layout: row = channel, columns = [p0.xyz | p1.xyz | ...].

Eigen::Matrix<double, Eigen::Dynamic, 3> pool_points(const VnFeat& x) {
  const int64_t n = x.cols() / 3;
  Eigen::Matrix<double, Eigen::Dynamic, 3> out(x.rows(), 3);
  out.setZero();
  for (int64_t i = 0; i < n; ++i) out += x.middleCols(3 * i, 3);
  return out / double(n);
}

VnFeat tile_points(const Eigen::Matrix<double, Eigen::Dynamic, 3>& g, int64_t n) {
  VnFeat out(g.rows(), 3 * n);
  for (int64_t i = 0; i < n; ++i) out.middleCols(3 * i, 3) = g;
  return out;
}

// Vector nonlinearity: per (channel, point), reflect the feature q against the
// learned direction k when they disagree, scaled by the leaky slope.
void vn_activate(VnFeat& q, const VnFeat& k) {
  const int64_t n = q.cols() / 3;
  for (int64_t i = 0; i < n; ++i)
    for (Eigen::Index c = 0; c < q.rows(); ++c) {
      Eigen::Vector3d qv = q.block<1, 3>(c, 3 * i).transpose();
      Eigen::Vector3d kv = k.block<1, 3>(c, 3 * i).transpose();
      double d = qv.dot(kv);
      if (d < 0) {
        double n2 = kv.squaredNorm();
        q.block<1, 3>(c, 3 * i) -= ((1 - kLeakySlope) * d / n2) * kv.transpose();
      }
    }
}

// Backward of vn_activate given pre-activation q, k and upstream grad g
// (in-place results dq, dk).
void vn_activate_backward(const VnFeat& q, const VnFeat& k, const VnFeat& g, VnFeat& dq,
                          VnFeat& dk) {
  const int64_t n = q.cols() / 3;
  dq = g;
  dk.setZero(k.rows(), k.cols());
  const double beta = 1 - kLeakySlope;
  for (int64_t i = 0; i < n; ++i)
    for (Eigen::Index c = 0; c < q.rows(); ++c) {
      Eigen::Vector3d qv = q.block<1, 3>(c, 3 * i).transpose();
      Eigen::Vector3d kv = k.block<1, 3>(c, 3 * i).transpose();
      double d = qv.dot(kv);
      if (d >= 0) continue;
      Eigen::Vector3d gv = g.block<1, 3>(c, 3 * i).transpose();
      double n2 = kv.squaredNorm();
      double kg = kv.dot(gv);
      dq.block<1, 3>(c, 3 * i) -= (beta * kg / n2) * kv.transpose();
      Eigen::Vector3d dkv =
          -beta * (qv * kg + d * gv - (2 * d * kg / n2) * kv) / n2;
      dk.block<1, 3>(c, 3 * i) = dkv.transpose();
    }
}

struct GroupCache {
  int64_t n = 0;
  std::array<VnFeat, 8> in;    // input to each layer
  std::array<VnFeat, 8> q, k;  // pre-activation feature / direction
};

// Shared forward skeleton; cache may be null for inference.
Eigen::Matrix<double, Eigen::Dynamic, 3> forward_group(
    const Eigen::Matrix<double, Eigen::Dynamic, 3>& group, const EncoderParams& params,
    GroupCache* cache) {
  const int c = params.config.channels;
  if (group.rows() == 0) {
    std::fprintf(stderr, "encoder: empty group, emitting zero feature\n");
    return Eigen::Matrix<double, Eigen::Dynamic, 3>::Zero(c, 3);
  }
  const int64_t n = group.rows();
  VnFeat x(1, 3 * n);
  for (int64_t i = 0; i < n; ++i) x.middleCols(3 * i, 3) = group.row(i);

  auto run = [&](int l, const VnFeat& input) -> VnFeat {
    const VnLayer& L = params.layers[size_t(l)];
    VnFeat q = L.w * input;
    if (L.u.size() == 0) {  // final linear layer
      if (cache) {
        cache->in[size_t(l)] = input;
        cache->q[size_t(l)] = q;
      }
      return q;
    }
    VnFeat k = L.u * input;
    if (cache) {
      cache->in[size_t(l)] = input;
      cache->q[size_t(l)] = q;
      cache->k[size_t(l)] = k;
    }
    vn_activate(q, k);
    return q;
  };

  VnFeat a1 = run(0, x);
  VnFeat x1(2 * a1.rows(), 3 * n);
  x1 << a1, tile_points(pool_points(a1), n);
  VnFeat a2 = run(1, x1);
  VnFeat a3 = run(2, a2) + a2;
  VnFeat a4 = run(3, a3);
  VnFeat x2(2 * a4.rows(), 3 * n);
  x2 << a4, tile_points(pool_points(a4), n);
  VnFeat a5 = run(4, x2);
  VnFeat a6 = run(5, a5) + a5;
  VnFeat a7 = run(6, a6);
  VnFeat a8 = run(7, a7);
  if (cache) cache->n = n;
  return pool_points(a8);
}

// Gradients reuse the parameter containers (same shapes).
EncoderParams zero_grads(const EncoderParams& p) {
  EncoderParams g;
  g.config = p.config;
  for (const auto& l : p.layers) {
    VnLayer z;
    z.w = Eigen::MatrixXd::Zero(l.w.rows(), l.w.cols());
    if (l.u.size() > 0) z.u = Eigen::MatrixXd::Zero(l.u.rows(), l.u.cols());
    g.layers.push_back(std::move(z));
  }
  return g;
}

// Backward through one group given dL/dF (C x 3); accumulates into grads.
void backward_group(const EncoderParams& params, const GroupCache& cache,
                    const Eigen::Matrix<double, Eigen::Dynamic, 3>& dfeat, EncoderParams& grads) {
  const int64_t n = cache.n;
  if (n == 0) return;

  // d(pool): spread evenly over points.
  VnFeat d = tile_points(dfeat / double(n), n);

  auto back = [&](int l, const VnFeat& dout) -> VnFeat {
    const VnLayer& L = params.layers[size_t(l)];
    VnLayer& G = grads.layers[size_t(l)];
    if (L.u.size() == 0) {
      G.w.noalias() += dout * cache.in[size_t(l)].transpose();
      return L.w.transpose() * dout;
    }
    VnFeat dq, dk;
    vn_activate_backward(cache.q[size_t(l)], cache.k[size_t(l)], dout, dq, dk);
    G.w.noalias() += dq * cache.in[size_t(l)].transpose();
    G.u.noalias() += dk * cache.in[size_t(l)].transpose();
    return L.w.transpose() * dq + L.u.transpose() * dk;
  };

  // Mirror of the forward wiring, bottom of forward first.
  VnFeat d8 = back(7, d);                    // -> a7
  VnFeat d7 = back(6, d8);                   // -> a6
  VnFeat d6in = back(5, d7);                 // a6 = run6(a5) + a5
  VnFeat d5 = d6in + d7;                     // skip adds straight through
  VnFeat dx2 = back(4, d5);                  // -> x2 = [a4; tile(pool(a4))]
  const Eigen::Index h = dx2.rows() / 2;
  // Gradient through tile(pool(.)): every point block receives the mean of the
  // tiled blocks' gradients, which is exactly pool_points of the bottom half.
  VnFeat d4 = dx2.topRows(h);
  d4 += tile_points(pool_points(dx2.bottomRows(h)), n);
  VnFeat d3 = back(3, d4);                   // -> a3
  VnFeat d3in = back(2, d3);                 // a3 = run3(a2) + a2
  VnFeat d2 = d3in + d3;
  VnFeat dx1 = back(1, d2);                  // -> x1 = [a1; tile(pool(a1))]
  const Eigen::Index w1 = dx1.rows() / 2;
  VnFeat d1 = dx1.topRows(w1);
  d1 += tile_points(pool_points(dx1.bottomRows(w1)), n);
  (void)back(0, d1);
}

// --- occupancy decoder ------------------------------------------------------

double gelu(double x) { return 0.5 * x * std::erfc(-x * M_SQRT1_2); }
double gelu_grad(double x) {
  return 0.5 * std::erfc(-x * M_SQRT1_2) + x * std::exp(-0.5 * x * x) / std::sqrt(2 * M_PI);
}

// Invariant readout: channel norms, pairwise channel inner products, channel
// projections onto the query, then the positionally encoded query itself.
Eigen::VectorXd readout(const Eigen::Matrix<double, Eigen::Dynamic, 3>& f,
                        const Eigen::Vector3d& q, const EncoderConfig& cfg) {
  const int c = cfg.channels;
  Eigen::VectorXd z(readout_dim(cfg));
  int at = 0;
  for (int i = 0; i < c; ++i) z(at++) = f.row(i).norm();
  for (int i = 0; i < c; ++i)
    for (int j = i + 1; j < c; ++j) z(at++) = f.row(i).dot(f.row(j));
  for (int i = 0; i < c; ++i) z(at++) = f.row(i).dot(q.transpose());
  z.segment(at, 6 * cfg.l_freq_query) = positional_encode(q, cfg.l_freq_query);
  return z;
}

// d(readout)/dF given dL/dz, accumulated into df.
void readout_backward(const Eigen::Matrix<double, Eigen::Dynamic, 3>& f, const Eigen::Vector3d& q,
                      const EncoderConfig& cfg, const Eigen::VectorXd& dz,
                      Eigen::Matrix<double, Eigen::Dynamic, 3>& df) {
  const int c = cfg.channels;
  int at = 0;
  for (int i = 0; i < c; ++i) {
    double nrm = f.row(i).norm();
    if (nrm > 1e-12) df.row(i) += dz(at) / nrm * f.row(i);
    ++at;
  }
  for (int i = 0; i < c; ++i)
    for (int j = i + 1; j < c; ++j) {
      df.row(i) += dz(at) * f.row(j);
      df.row(j) += dz(at) * f.row(i);
      ++at;
    }
  for (int i = 0; i < c; ++i) df.row(i) += dz(at++) * q.transpose();
}

struct DecoderCache {
  Eigen::VectorXd z, p1, p2, p3;  // input and pre-activations
  double logit = 0;
};

double decoder_forward(const OccupancyDecoderParams& d, const Eigen::VectorXd& z,
                       DecoderCache* cache) {
  Eigen::VectorXd p1 = d.w[0] * z + d.b[0];
  Eigen::VectorXd h1 = p1.unaryExpr([](double x) { return gelu(x); });
  Eigen::VectorXd p2 = d.w[1] * h1 + d.b[1];
  Eigen::VectorXd h2 = p2.unaryExpr([](double x) { return gelu(x); });
  Eigen::VectorXd p3 = d.w[2] * h2 + d.b[2];
  Eigen::VectorXd h3 = p3.unaryExpr([](double x) { return gelu(x); });
  double logit = (d.w[3] * h3 + d.b[3])(0);
  if (cache) *cache = {z, p1, p2, p3, logit};
  return logit;
}

OccupancyDecoderParams zero_decoder_grads(const OccupancyDecoderParams& d) {
  OccupancyDecoderParams g;
  for (const auto& m : d.w) g.w.push_back(Eigen::MatrixXd::Zero(m.rows(), m.cols()));
  for (const auto& v : d.b) g.b.push_back(Eigen::VectorXd::Zero(v.size()));
  return g;
}

// dlogit -> grads + dL/dz.
Eigen::VectorXd decoder_backward(const OccupancyDecoderParams& d, const DecoderCache& c,
                                 double dlogit, OccupancyDecoderParams& g) {
  auto act = [](const Eigen::VectorXd& p) {
    return Eigen::VectorXd(p.unaryExpr([](double x) { return gelu(x); }));
  };
  Eigen::VectorXd h1 = act(c.p1), h2 = act(c.p2), h3 = act(c.p3);
  g.w[3].noalias() += dlogit * h3.transpose();
  g.b[3](0) += dlogit;
  Eigen::VectorXd dh3 = d.w[3].transpose() * dlogit;
  Eigen::VectorXd dp3 =
      dh3.cwiseProduct(c.p3.unaryExpr([](double x) { return gelu_grad(x); }));
  g.w[2].noalias() += dp3 * h2.transpose();
  g.b[2] += dp3;
  Eigen::VectorXd dh2 = d.w[2].transpose() * dp3;
  Eigen::VectorXd dp2 =
      dh2.cwiseProduct(c.p2.unaryExpr([](double x) { return gelu_grad(x); }));
  g.w[1].noalias() += dp2 * h1.transpose();
  g.b[1] += dp2;
  Eigen::VectorXd dh1 = d.w[1].transpose() * dp2;
  Eigen::VectorXd dp1 =
      dh1.cwiseProduct(c.p1.unaryExpr([](double x) { return gelu_grad(x); }));
  g.w[0].noalias() += dp1 * c.z.transpose();
  g.b[0] += dp1;
  return d.w[0].transpose() * dp1;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Numerically stable binary cross-entropy on a logit.
double bce(double logit, double y) {
  return std::max(logit, 0.0) - logit * y + std::log1p(std::exp(-std::abs(logit)));
}

}  // namespace

uint64_t EncoderConfig::digest() const {
  uint64_t h = 0xcbf29ce484222325ull;
  h = fnv1a(&k_centroids, sizeof(k_centroids), h);
  h = fnv1a(&channels, sizeof(channels), h);
  h = fnv1a(&l_freq_query, sizeof(l_freq_query), h);
  return h;
}

uint64_t encoder_weights_digest(const EncoderParams& params) {
  uint64_t h = params.config.digest();
  for (const auto& layer : params.layers) {
    h = fnv1a(layer.w.data(), sizeof(double) * size_t(layer.w.size()), h);
    h = fnv1a(layer.u.data(), sizeof(double) * size_t(layer.u.size()), h);
  }
  return h;
}

std::vector<int64_t> farthest_point_sample_from(const PointCloud& cloud, int k,
                                                int64_t start_index) {
  const int64_t n = cloud.size();
  check(k >= 1, ErrorKind::Domain, "fps: k must be >= 1");
  check(int64_t(k) <= n, ErrorKind::Domain, "fps: k exceeds point count");
  check(start_index >= 0 && start_index < n, ErrorKind::Domain, "fps: start out of range");
  std::vector<int64_t> sel{start_index};
  std::vector<double> dist2(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i)
    dist2[size_t(i)] = (cloud.point(i) - cloud.point(start_index)).squaredNorm();
  while (int64_t(sel.size()) < k) {
    int64_t best = 0;
    for (int64_t i = 1; i < n; ++i)
      if (dist2[size_t(i)] > dist2[size_t(best)]) best = i;  // ties -> lowest index
    sel.push_back(best);
    for (int64_t i = 0; i < n; ++i)
      dist2[size_t(i)] =
          std::min(dist2[size_t(i)], (cloud.point(i) - cloud.point(best)).squaredNorm());
  }
  return sel;
}

std::vector<int64_t> farthest_point_sample(const PointCloud& cloud, int k, uint64_t start_seed) {
  check(cloud.size() > 0, ErrorKind::Domain, "fps: empty cloud");
  Rng rng = derive_rng(start_seed, "fps-start");
  return farthest_point_sample_from(cloud, k, int64_t(rng.uniform_int(uint64_t(cloud.size()))));
}

std::vector<Eigen::Matrix<double, Eigen::Dynamic, 3>> group_and_center(
    const PointCloud& cloud, const Eigen::Matrix<double, Eigen::Dynamic, 3>& centroids) {
  check(centroids.rows() > 0, ErrorKind::Domain, "group_and_center: no centroids");
  const int64_t k = centroids.rows();
  std::vector<std::vector<int64_t>> members(static_cast<size_t>(k));
  for (int64_t i = 0; i < cloud.size(); ++i) {
    Eigen::Vector3d p = cloud.point(i);
    int64_t best = 0;
    double bd = (p - centroids.row(0).transpose()).squaredNorm();
    for (int64_t c = 1; c < k; ++c) {
      double d = (p - centroids.row(c).transpose()).squaredNorm();
      if (d < bd) {  // ties -> lowest centroid index
        bd = d;
        best = c;
      }
    }
    members[size_t(best)].push_back(i);
  }
  std::vector<Eigen::Matrix<double, Eigen::Dynamic, 3>> groups;
  for (int64_t c = 0; c < k; ++c) {
    Eigen::Matrix<double, Eigen::Dynamic, 3> g(int64_t(members[size_t(c)].size()), 3);
    for (size_t j = 0; j < members[size_t(c)].size(); ++j)
      g.row(int64_t(j)) = (cloud.point(members[size_t(c)][j]) - centroids.row(c).transpose())
                              .transpose();
    groups.push_back(std::move(g));
  }
  return groups;
}

Eigen::VectorXd positional_encode(const Eigen::Vector3d& v, int l_freq) {
  check(l_freq >= 1, ErrorKind::Domain, "positional_encode: l_freq must be >= 1");
  Eigen::VectorXd out(6 * l_freq);
  double scale = M_PI;
  for (int f = 0; f < l_freq; ++f) {
    for (int c = 0; c < 3; ++c) {
      out(6 * f + c) = std::sin(scale * v(c));
      out(6 * f + 3 + c) = std::cos(scale * v(c));
    }
    scale *= 2;
  }
  return out;
}

EncoderParams init_encoder(const EncoderConfig& config, uint64_t seed) {
  check(config.channels >= 4 && config.channels % 2 == 0, ErrorKind::Config,
        "encoder channels must be even and >= 4");
  check(config.k_centroids >= 1, ErrorKind::Config, "k_centroids must be >= 1");
  Rng rng = derive_rng(seed, "encoder-init");
  EncoderParams p;
  p.config = config;
  for (const auto& d : arch_dims(config.channels)) {
    VnLayer l;
    double s = std::sqrt(1.0 / d.in);
    l.w = Eigen::MatrixXd::NullaryExpr(d.out, d.in, [&]() { return rng.normal() * s; });
    if (d.nonlinear)
      l.u = Eigen::MatrixXd::NullaryExpr(d.out, d.in, [&]() { return rng.normal() * s; });
    p.layers.push_back(std::move(l));
  }
  return p;
}

OccupancyDecoderParams init_decoder(const EncoderConfig& config, uint64_t seed) {
  Rng rng = derive_rng(seed, "decoder-init");
  OccupancyDecoderParams d;
  const int in = readout_dim(config);
  const std::array<std::pair<int, int>, 4> dims{{{128, in}, {128, 128}, {128, 128}, {1, 128}}};
  for (const auto& [rows, cols] : dims) {
    double s = std::sqrt(1.0 / cols);
    d.w.push_back(Eigen::MatrixXd::NullaryExpr(rows, cols, [&]() { return rng.normal() * s; }));
    d.b.push_back(Eigen::VectorXd::Zero(rows));
  }
  return d;
}

Eigen::Matrix<double, Eigen::Dynamic, 3> encode_group(
    const Eigen::Matrix<double, Eigen::Dynamic, 3>& group, const EncoderParams& params) {
  return forward_group(group, params, nullptr);
}

LocalFeatureSet encode_local(const std::vector<Eigen::Matrix<double, Eigen::Dynamic, 3>>& groups,
                             const Eigen::Matrix<double, Eigen::Dynamic, 3>& centroids,
                             const EncoderParams& params) {
  check(int64_t(groups.size()) == centroids.rows(), ErrorKind::Domain,
        "encode_local: groups/centroids mismatch");
  LocalFeatureSet out;
  out.positions = centroids;
  for (const auto& g : groups) out.features.push_back(forward_group(g, params, nullptr));
  return out;
}

LocalFeatureSet encode_cloud(const PointCloud& cloud, const EncoderParams& params,
                             uint64_t fps_seed) {
  auto idx = farthest_point_sample(cloud, params.config.k_centroids, fps_seed);
  Eigen::Matrix<double, Eigen::Dynamic, 3> centroids(int64_t(idx.size()), 3);
  for (size_t i = 0; i < idx.size(); ++i) centroids.row(int64_t(i)) = cloud.point(idx[i]);
  return encode_local(group_and_center(cloud, centroids), centroids, params);
}

double occupancy_decode(const Eigen::Matrix<double, Eigen::Dynamic, 3>& feature,
                        const Eigen::Vector3d& query, const EncoderConfig& config,
                        const OccupancyDecoderParams& params) {
  return sigmoid(decoder_forward(params, readout(feature, query, config), nullptr));
}

double occupancy_loss_and_grad(const Eigen::Matrix<double, Eigen::Dynamic, 3>& group,
                               const std::vector<Eigen::Vector3d>& queries,
                               const std::vector<double>& labels, const EncoderParams& enc,
                               const OccupancyDecoderParams& dec, EncoderParams& enc_grad,
                               OccupancyDecoderParams& dec_grad) {
  check(queries.size() == labels.size(), ErrorKind::Domain,
        "occupancy_loss_and_grad: queries/labels mismatch");
  if (queries.empty() || group.rows() == 0) return 0;
  GroupCache cache;
  auto f = forward_group(group, enc, &cache);
  Eigen::Matrix<double, Eigen::Dynamic, 3> df =
      Eigen::Matrix<double, Eigen::Dynamic, 3>::Zero(f.rows(), 3);
  double loss = 0;
  for (size_t i = 0; i < queries.size(); ++i) {
    DecoderCache dc;
    Eigen::VectorXd z = readout(f, queries[i], enc.config);
    double logit = decoder_forward(dec, z, &dc);
    loss += bce(logit, labels[i]);
    double dlogit = sigmoid(logit) - labels[i];
    Eigen::VectorXd dz = decoder_backward(dec, dc, dlogit, dec_grad);
    readout_backward(f, queries[i], enc.config, dz, df);
  }
  backward_group(enc, cache, df, enc_grad);
  return loss;
}

namespace {

// --- pretraining -------------------------------------------------------------

struct QueryPoint {
  Eigen::Vector3d q;
  double label;
  int type;  // 0 surface, 1 band, 2 far
};

struct TrainCloud {
  std::vector<Eigen::Matrix<double, Eigen::Dynamic, 3>> groups;
  std::vector<std::vector<QueryPoint>> queries;  // per group
};

double nn_distance(const Eigen::Matrix<double, Eigen::Dynamic, 3>& pts,
                   const Eigen::Vector3d& q) {
  double best = std::numeric_limits<double>::infinity();
  for (int64_t i = 0; i < pts.rows(); ++i)
    best = std::min(best, (pts.row(i).transpose() - q).squaredNorm());
  return std::sqrt(best);
}

TrainCloud make_train_cloud(const EncoderPretrainConfig& cfg, Rng& rng) {
  PointCloud cloud;
  for (int attempt = 0;; ++attempt) {
    int cat = cfg.categories[size_t(rng.uniform_int(uint64_t(cfg.categories.size())))];
    CanonicalShape shape = generate_shape(cat, rng.next_u64());
    DeformationParams dp;
    dp.magnitude = rng.uniform(0, cfg.magnitude_hi);
    for (int c = 0; c < 3; ++c) dp.anisotropic_scale(c) = rng.uniform(0.85, 1.15);
    dp.warp_seed = rng.next_u64();
    CanonicalShape d = deform_shape(shape, dp);
    RigidTransform pose = random_transform(0.15, M_PI, rng);
    cloud = render_partial_cloud(d, pose, cfg.n_views, cfg.points_per_view, rng.next_u64());
    if (cloud.size() >= 4 * cfg.encoder.k_centroids) break;
    check(attempt < 5, ErrorKind::Domain, "pretrain: cannot render a usable cloud");
  }

  TrainCloud tc;
  auto idx = farthest_point_sample(cloud, cfg.encoder.k_centroids, rng.next_u64());
  Eigen::Matrix<double, Eigen::Dynamic, 3> centroids(int64_t(idx.size()), 3);
  for (size_t i = 0; i < idx.size(); ++i) centroids.row(int64_t(i)) = cloud.point(idx[i]);
  tc.groups = group_and_center(cloud, centroids);

  const double band = cfg.surface_band;
  for (const auto& g : tc.groups) {
    std::vector<QueryPoint> qs;
    if (g.rows() > 0) {
      double radius = 0.01;
      for (int64_t i = 0; i < g.rows(); ++i)
        radius = std::max(radius, g.row(i).norm());
      for (int t = 0; t < cfg.queries_per_group; ++t) {
        QueryPoint qp;
        qp.type = t % 3;
        Eigen::Vector3d base = g.row(int64_t(rng.uniform_int(uint64_t(g.rows())))).transpose();
        switch (qp.type) {
          case 0:  // on or next to the surface
            qp.q = base + 0.5 * band * rng.normal3();
            break;
          case 1:  // just outside the band, still local
            qp.q = base + rng.uniform(band, 6 * band) * rng.unit_axis();
            break;
          default:  // far exterior, beyond twice the local radius
            qp.q = (radius * rng.uniform(2.0, 3.0) + 3 * band) * rng.unit_axis();
        }
        qp.label = nn_distance(g, qp.q) <= band ? 1.0 : 0.0;
        qs.push_back(qp);
      }
    }
    tc.queries.push_back(std::move(qs));
  }
  return tc;
}

std::vector<ParamRef<double>> param_refs(EncoderParams& enc, OccupancyDecoderParams& dec) {
  std::vector<ParamRef<double>> r;
  for (auto& l : enc.layers) {
    r.push_back({l.w.data(), l.w.size()});
    if (l.u.size() > 0) r.push_back({l.u.data(), l.u.size()});
  }
  for (auto& m : dec.w) r.push_back({m.data(), m.size()});
  for (auto& v : dec.b) r.push_back({v.data(), v.size()});
  return r;
}

struct EvalStats {
  double loss = 0;
  double surface_acc = 0;
  double far_acc = 0;
};

EvalStats evaluate(const std::vector<TrainCloud>& val, const EncoderParams& enc,
                   const OccupancyDecoderParams& dec) {
  double loss = 0;
  int64_t n = 0, surf_ok = 0, surf_n = 0, far_ok = 0, far_n = 0;
  for (const auto& tc : val)
    for (size_t g = 0; g < tc.groups.size(); ++g) {
      if (tc.queries[g].empty()) continue;
      auto f = encode_group(tc.groups[g], enc);
      for (const auto& qp : tc.queries[g]) {
        double logit = decoder_forward(dec, readout(f, qp.q, enc.config), nullptr);
        loss += bce(logit, qp.label);
        ++n;
        if (qp.label > 0.5) {
          surf_n++;
          if (sigmoid(logit) > 0.5) surf_ok++;
        }
        if (qp.type == 2) {
          far_n++;
          if (sigmoid(logit) < 0.5) far_ok++;
        }
      }
    }
  EvalStats s;
  s.loss = loss / double(std::max<int64_t>(n, 1));
  s.surface_acc = surf_n ? double(surf_ok) / double(surf_n) : 0;
  s.far_acc = far_n ? double(far_ok) / double(far_n) : 0;
  return s;
}

}  // namespace

EncoderPretrainResult pretrain_encoder(
    const EncoderPretrainConfig& config,
    const std::function<void(int step, double val_loss)>& progress) {
  check(config.steps >= 1, ErrorKind::Config, "pretrain: steps must be >= 1");
  EncoderPretrainResult res;
  res.encoder = init_encoder(config.encoder, derive_seed(config.seed, "enc", 0));
  res.decoder = init_decoder(config.encoder, derive_seed(config.seed, "dec", 0));

  std::vector<TrainCloud> val;
  for (int i = 0; i < config.val_clouds; ++i) {
    Rng rng = derive_rng(config.seed, "pretrain-val", uint64_t(i));
    val.push_back(make_train_cloud(config, rng));
  }

  EvalStats init_stats = evaluate(val, res.encoder, res.decoder);
  res.init_val_loss = init_stats.loss;

  Adam<double> opt;
  opt.init(param_refs(res.encoder, res.decoder));

  EncoderParams best_enc = res.encoder;
  OccupancyDecoderParams best_dec = res.decoder;
  double best_val = init_stats.loss, prev_val = init_stats.loss;
  int bad_evals = 0;

  for (int step = 0; step < config.steps; ++step) {
    Rng rng = derive_rng(config.seed, "pretrain-step", uint64_t(step));
    TrainCloud tc = make_train_cloud(config, rng);

    EncoderParams eg = zero_grads(res.encoder);
    OccupancyDecoderParams dg = zero_decoder_grads(res.decoder);
    int64_t n_queries = 0;
    for (const auto& qs : tc.queries) n_queries += int64_t(qs.size());
    if (n_queries == 0) continue;

    for (size_t g = 0; g < tc.groups.size(); ++g) {
      if (tc.queries[g].empty()) continue;
      std::vector<Eigen::Vector3d> qs;
      std::vector<double> labels;
      for (const auto& qp : tc.queries[g]) {
        qs.push_back(qp.q);
        labels.push_back(qp.label);
      }
      occupancy_loss_and_grad(tc.groups[g], qs, labels, res.encoder, res.decoder, eg, dg);
    }

    // Mean over every query of the step.
    double inv = 1.0 / double(n_queries);
    for (auto& ref : param_refs(eg, dg))
      Eigen::Map<Eigen::VectorXd>(ref.data, ref.n) *= inv;

    double lr = cosine_lr(config.lr, 0.1, step, config.steps);
    opt.step(lr, 0.0, param_refs(res.encoder, res.decoder), param_refs(eg, dg));

    if ((step + 1) % config.val_every == 0 || step + 1 == config.steps) {
      EvalStats s = evaluate(val, res.encoder, res.decoder);
      res.val_history.push_back(s.loss);
      if (progress) progress(step + 1, s.loss);
      if (s.loss < best_val) {
        best_val = s.loss;
        best_enc = res.encoder;
        best_dec = res.decoder;
      }
      bad_evals = s.loss > prev_val ? bad_evals + 1 : 0;
      prev_val = s.loss;
      if (bad_evals >= 5) {
        res.aborted = true;
        break;
      }
    }
  }

  res.encoder = best_enc;
  res.decoder = best_dec;
  EvalStats final_stats = evaluate(val, res.encoder, res.decoder);
  res.final_val_loss = final_stats.loss;
  res.surface_accuracy = final_stats.surface_acc;
  res.far_accuracy = final_stats.far_acc;
  return res;
}

void save_encoder(const EncoderPretrainResult& result, const std::string& path) {
  BinWriter w;
  w.put_bytes(kMagic, sizeof(kMagic));
  w.put(kVersion);
  w.put(result.encoder.config.digest());
  w.put(int32_t(result.encoder.config.k_centroids));
  w.put(int32_t(result.encoder.config.channels));
  w.put(int32_t(result.encoder.config.l_freq_query));
  w.put(uint32_t(result.encoder.layers.size()));
  for (const auto& l : result.encoder.layers) {
    w.put_matrix(l.w);
    w.put(uint8_t(l.u.size() > 0 ? 1 : 0));
    if (l.u.size() > 0) w.put_matrix(l.u);
  }
  w.put(uint32_t(result.decoder.w.size()));
  for (size_t i = 0; i < result.decoder.w.size(); ++i) {
    w.put_matrix(result.decoder.w[i]);
    w.put_matrix(Eigen::MatrixXd(result.decoder.b[i]));
  }
  w.put(result.init_val_loss);
  w.put(result.final_val_loss);
  w.put(result.surface_accuracy);
  w.put(result.far_accuracy);
  w.put(uint8_t(result.aborted ? 1 : 0));
  w.put(uint32_t(result.val_history.size()));
  for (double v : result.val_history) w.put(v);
  write_file_atomic(path, w.buf);
}

EncoderPretrainResult load_encoder(const std::string& path) {
  std::string bytes = read_file(path);
  BinReader r{bytes.data(), bytes.data() + bytes.size()};
  char magic[8];
  r.get_bytes(magic, sizeof(magic));
  check(std::memcmp(magic, kMagic, sizeof(kMagic)) == 0, ErrorKind::Data,
        "encoder checkpoint: bad magic");
  uint32_t version = r.get<uint32_t>();
  check(version == kVersion, ErrorKind::Data, "encoder checkpoint: unsupported version");
  uint64_t digest = r.get<uint64_t>();
  EncoderPretrainResult res;
  res.encoder.config.k_centroids = r.get<int32_t>();
  res.encoder.config.channels = r.get<int32_t>();
  res.encoder.config.l_freq_query = r.get<int32_t>();
  check(res.encoder.config.digest() == digest, ErrorKind::Data,
        "encoder checkpoint: config digest mismatch");
  uint32_t n_layers = r.get<uint32_t>();
  auto dims = arch_dims(res.encoder.config.channels);
  check(n_layers == dims.size(), ErrorKind::Data, "encoder checkpoint: layer count mismatch");
  for (uint32_t i = 0; i < n_layers; ++i) {
    VnLayer l;
    l.w = r.get_matrix();
    check(l.w.rows() == dims[i].out && l.w.cols() == dims[i].in, ErrorKind::Data,
          "encoder checkpoint: layer shape mismatch");
    if (r.get<uint8_t>()) l.u = r.get_matrix();
    check((l.u.size() > 0) == dims[i].nonlinear, ErrorKind::Data,
          "encoder checkpoint: activation shape mismatch");
    res.encoder.layers.push_back(std::move(l));
  }
  uint32_t n_dec = r.get<uint32_t>();
  check(n_dec == 4, ErrorKind::Data, "encoder checkpoint: decoder layer count");
  for (uint32_t i = 0; i < n_dec; ++i) {
    res.decoder.w.push_back(r.get_matrix());
    res.decoder.b.push_back(Eigen::VectorXd(r.get_matrix()));
  }
  res.init_val_loss = r.get<double>();
  res.final_val_loss = r.get<double>();
  res.surface_accuracy = r.get<double>();
  res.far_accuracy = r.get<double>();
  res.aborted = r.get<uint8_t>() != 0;
  uint32_t n_hist = r.get<uint32_t>();
  for (uint32_t i = 0; i < n_hist; ++i) res.val_history.push_back(r.get<double>());
  check(r.p == r.end, ErrorKind::Data, "encoder checkpoint: trailing bytes");
  return res;
}

}  // namespace galign
