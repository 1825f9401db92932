#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "galign/point_cloud.hpp"

namespace galign {

// Rotation-equivariant local geometry encoder: a point cloud becomes K local
// (feature, position) pairs. Each feature is C vector channels (C x 3); every
// network op is a linear mix of channels or a vector nonlinearity, so rotating
// the input rotates every channel and translation never enters (groups are
// re-centered). Math is double throughout: encoding runs once per object and
// the equivariance margin is architectural, not a tolerance to spend.

struct EncoderConfig {
  int k_centroids = 8;   // K local parts
  int channels = 32;     // C vector channels per part
  int l_freq_query = 10; // positional encoding for occupancy queries
  uint64_t digest() const;
};

struct LocalFeatureSet {
  std::vector<Eigen::Matrix<double, Eigen::Dynamic, 3>> features;  // K of C x 3
  Eigen::Matrix<double, Eigen::Dynamic, 3> positions;              // K x 3
  int k() const { return int(features.size()); }
};

// Channel-major group layout: row = channel, columns = 3 per point
// [p0.xyz | p1.xyz | ...], so a linear layer is one GEMM on the left.
using VnFeat = Eigen::MatrixXd;

// Greedy max-min selection; the first index is drawn from start_seed, the rest
// maximize distance to the selected set (ties -> lowest index).
std::vector<int64_t> farthest_point_sample(const PointCloud& cloud, int k, uint64_t start_seed);
std::vector<int64_t> farthest_point_sample_from(const PointCloud& cloud, int k,
                                                int64_t start_index);

// Nearest-centroid partition (ties -> lowest centroid index); each group is
// translated so its centroid sits at the origin.
std::vector<Eigen::Matrix<double, Eigen::Dynamic, 3>> group_and_center(
    const PointCloud& cloud, const Eigen::Matrix<double, Eigen::Dynamic, 3>& centroids);

// [sin(2^f pi v), cos(2^f pi v)] blocks, f = 0..l_freq-1: dimension 6*l_freq.
Eigen::VectorXd positional_encode(const Eigen::Vector3d& v, int l_freq);

struct VnLayer {
  Eigen::MatrixXd w;  // C_out x C_in feature mix
  Eigen::MatrixXd u;  // C_out x C_in direction mix (empty for linear layers)
};

struct EncoderParams {
  EncoderConfig config;
  std::vector<VnLayer> layers;  // 8 layers; layers[7] is linear (u empty)
};

struct OccupancyDecoderParams {
  std::vector<Eigen::MatrixXd> w;  // 4 layers
  std::vector<Eigen::VectorXd> b;
};

EncoderParams init_encoder(const EncoderConfig& config, uint64_t seed);

// Digest over config and every weight byte; identifies the frozen encoder a
// downstream model was trained against.
uint64_t encoder_weights_digest(const EncoderParams& params);
OccupancyDecoderParams init_decoder(const EncoderConfig& config, uint64_t seed);

// Encodes one re-centered group into a C x 3 feature (zeros if empty).
Eigen::Matrix<double, Eigen::Dynamic, 3> encode_group(
    const Eigen::Matrix<double, Eigen::Dynamic, 3>& group, const EncoderParams& params);

// Groups -> features; positions are the centroids the groups were built from.
LocalFeatureSet encode_local(const std::vector<Eigen::Matrix<double, Eigen::Dynamic, 3>>& groups,
                             const Eigen::Matrix<double, Eigen::Dynamic, 3>& centroids,
                             const EncoderParams& params);

// FPS + grouping + encoding in one call.
LocalFeatureSet encode_cloud(const PointCloud& cloud, const EncoderParams& params,
                             uint64_t fps_seed);

// Probability that a query (relative to the feature's centroid) lies on the
// encoded local surface.
// Summed binary cross-entropy of the decoder against one group's queries,
// with gradients accumulated into grad containers shaped like the parameters
// (pass them zeroed, or keep accumulating across groups). Shared by the
// pretraining loop and by gradient checks.
double occupancy_loss_and_grad(const Eigen::Matrix<double, Eigen::Dynamic, 3>& group,
                               const std::vector<Eigen::Vector3d>& queries,
                               const std::vector<double>& labels, const EncoderParams& enc,
                               const OccupancyDecoderParams& dec, EncoderParams& enc_grad,
                               OccupancyDecoderParams& dec_grad);

double occupancy_decode(const Eigen::Matrix<double, Eigen::Dynamic, 3>& feature,
                        const Eigen::Vector3d& query, const EncoderConfig& config,
                        const OccupancyDecoderParams& params);

struct EncoderPretrainConfig {
  int steps = 12000;
  double lr = 1e-3;
  int queries_per_group = 24;
  int val_every = 250;
  int val_clouds = 48;
  uint64_t seed = 1;
  std::vector<int> categories = {0, 1, 2, 3, 4, 5};
  int n_views = 3;
  int points_per_view = 256;
  double magnitude_hi = 0.3;
  double surface_band = 0.005;  // |signed distance| <= band counts as surface
  EncoderConfig encoder;
};

struct EncoderPretrainResult {
  EncoderParams encoder;
  OccupancyDecoderParams decoder;
  double init_val_loss = 0;
  double final_val_loss = 0;
  double surface_accuracy = 0;  // held-out surface queries scoring > 0.5
  double far_accuracy = 0;      // held-out far queries scoring < 0.5
  bool aborted = false;
  std::vector<double> val_history;
};

// Implicit-occupancy pretraining; aborts to the best checkpoint if validation
// loss rises for 5 consecutive evals. progress (if set) is called per eval.
EncoderPretrainResult pretrain_encoder(
    const EncoderPretrainConfig& config,
    const std::function<void(int step, double val_loss)>& progress = {});

void save_encoder(const EncoderPretrainResult& result, const std::string& path);
EncoderPretrainResult load_encoder(const std::string& path);

}  // namespace galign
