#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "galign/point_cloud.hpp"
#include "galign/se3.hpp"

namespace galign {

// ---------------------------------------------------------------------------
// Procedural object catalog. Each category is a union of parametric primitives
// sampled on fixed (u,v) grids, so every surface point carries a stable
// correspondence id: two instances of a category have identical id sets and
// deformations never touch ids.
// ---------------------------------------------------------------------------

struct CanonicalShape {
  int category_id = -1;
  PointCloud cloud;   // surface points + correspondence ids + outward normals
  double scale = 0;   // bounding-box diagonal, meters

  int64_t size() const { return cloud.size(); }
};

struct CategoryInfo {
  std::string name;
  bool rotationally_symmetric = false;  // excluded from eval sets per protocol
};

// Registered catalog: mug, pan, peg, bowl, bottle, brush, hook, box ("-like").
const std::vector<CategoryInfo>& shape_catalog();
int category_count();
int category_by_name(const std::string& name);  // -1 if unknown

// Deterministic per (category_id, instance_seed). Canonical pose: centered at
// the centroid, axis-aligned. Diagonal lands in [0.08, 0.35] m.
CanonicalShape generate_shape(int category_id, uint64_t instance_seed);

struct DeformationParams {
  double magnitude = 0;                               // in [0, 1]
  Eigen::Vector3d anisotropic_scale{1, 1, 1};         // full-magnitude axis scales
  uint64_t warp_seed = 0;
  int n_warp_kernels = 4;
};

// Smooth correspondence-preserving warp in the canonical frame:
//   d(p) = mag*[(S - I) .* p + sum_k a_k exp(-|p-c_k|^2 / 2 s_k^2) d_k]
// with |d| clamped to mag * 0.25 * scale, normals warped by the inverse-
// transpose Jacobian, and a final uniform rescale keeping the diagonal inside
// [0.08, 0.35] m. magnitude 0 returns bitwise-identical coordinates.
CanonicalShape deform_shape(const CanonicalShape& shape, const DeformationParams& params);

struct AlignedPair {
  PointCloud cloud_a;  // grasped object observation, world frame
  PointCloud cloud_b;  // target object observation, world frame
  RigidTransform pose_a, pose_b;  // world poses of the canonical shapes
  RigidTransform gt_relative;     // pose of A expressed in B's frame

  // |gt_relative - pose_b^-1 * pose_a| within 1e-9.
  bool relative_consistent(double tol = 1e-9) const;
};

// Poses deformed A/B so the correspondence-matched neighborhoods around each
// object's anchor point (radius in meters, canonical-frame distances) fit the
// original pair's neighborhoods in the least-squares sense. Clouds of the
// result are the FULL posed surfaces (callers re-render partial views).
// anchor_a / anchor_b are correspondence ids on A and B respectively; the
// paper-style single shared id cannot exist across two category grids.
AlignedPair align_deformed_pair(const AlignedPair& original, const CanonicalShape& original_a,
                                const CanonicalShape& original_b, const CanonicalShape& deformed_a,
                                const CanonicalShape& deformed_b, int32_t anchor_a,
                                int32_t anchor_b, double neighborhood_radius);

// Back-face-culling partiality model: viewpoints on a fixed 1 m sphere around
// the posed centroid (Fibonacci directions), a point survives a view when its
// outward normal faces that view; union over views, seeded uniform downsample
// to <= n_views * points_per_view points. Seed affects only the downsample.
PointCloud render_partial_cloud(const CanonicalShape& shape, const RigidTransform& world_pose,
                                int n_views, int points_per_view, uint64_t seed);

struct SampleConfig {
  int n_pairs = 5;
  double magnitude_lo = 0.05, magnitude_hi = 0.3;
  double aniso_extent = 0.15;  // anisotropic_scale components in 1 +- extent
  int n_warp_kernels = 4;
  bool multimodal = false;
  double neighborhood_radius = 0.05;  // meters; paper leaves this unstated
  int n_views = 3;
  int points_per_view = 256;
  double place_trans_range = 0.15;          // world placement of each pair
  double residual_limit_factor = 0.1;       // part-consistency gate, x radius
  std::vector<int> categories;              // empty = all non-held-out
  // Pin the objects (used by eval modes that reuse training shapes).
  std::optional<int> fixed_category_a, fixed_category_b;
  std::optional<uint64_t> fixed_instance_a, fixed_instance_b;

  uint64_t digest() const;
};

struct AlignmentSample {
  std::vector<AlignedPair> pairs;       // partial rendered observations
  int32_t anchor_a = -1, anchor_b = -1; // mode-0 anchor correspondence ids
  int32_t anchor_a2 = -1, anchor_b2 = -1;  // mode-1 anchors (multimodal only)
  std::vector<RigidTransform> modes;    // gt alternatives for the LAST pair
  std::vector<int32_t> pair_mode;       // mode index per pair

  uint64_t sample_seed = 0;
  int32_t category_a = -1, category_b = -1;
  uint64_t instance_seed_a = 0, instance_seed_b = 0;

  int n_pairs() const { return int(pairs.size()); }
  const AlignedPair& target() const { return pairs.back(); }
};

// Full §-pipeline: pick objects, deform per pair, align by anchors, render.
// Pure function of (config, sample_seed); retries with a derived fresh seed up
// to 5 times on degenerate parts / residual-gate / mode-distance failures.
AlignmentSample build_sample(const SampleConfig& config, uint64_t sample_seed);

// Part-consistency check used by the generation gate and acceptance: maps each
// pair's A-anchor neighborhood into B's frame and returns the max pairwise RMS
// deviation between pairs sharing a mode.
double sample_part_residual(const AlignmentSample& sample, const SampleConfig& config);

// Distance between two candidate mode transforms, measured at a reference
// point c (grasped centroid): translation part and geodesic rotation.
void mode_distance(const RigidTransform& m0, const RigidTransform& m1, const Eigen::Vector3d& c,
                   double* trans_diff, double* rot_diff);

}  // namespace galign
