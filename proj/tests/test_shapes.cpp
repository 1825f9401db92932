#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <set>

#include "galign/error.hpp"
#include "galign/shapes.hpp"

using namespace galign;

TEST_CASE("catalog registers eight categories with held-out and symmetric flags") {
  CHECK(category_count() == 8);
  CHECK(shape_catalog()[2].rotationally_symmetric);  // peg
  CHECK(shape_catalog()[3].rotationally_symmetric);  // bowl
  CHECK(category_by_name("mug") == 0);
  CHECK(category_by_name("nonesuch") == -1);
}

TEST_CASE("generate_shape is deterministic per (category, seed)") {
  for (int cat = 0; cat < category_count(); ++cat) {
    CanonicalShape a = generate_shape(cat, 123), b = generate_shape(cat, 123);
    CHECK(a.cloud == b.cloud);
    CHECK(a.scale == b.scale);
  }
}

TEST_CASE("generate_shape rejects unknown categories") {
  CHECK_THROWS_AS((void)generate_shape(-1, 0), Error);
  CHECK_THROWS_AS((void)generate_shape(99, 0), Error);
}

TEST_CASE("1000 shapes across the catalog stay within the size envelope") {
  for (int i = 0; i < 1000; ++i) {
    CanonicalShape s = generate_shape(i % category_count(), uint64_t(1000 + i));
    CHECK(s.scale >= 0.08);
    CHECK(s.scale <= 0.35);
    CHECK(s.cloud.has_normals());
    CHECK(s.cloud.has_ids());
  }
}

TEST_CASE("two seeds of one category share the id set but not coordinates") {
  CanonicalShape a = generate_shape(0, 1), b = generate_shape(0, 2);
  std::set<int32_t> ia(a.cloud.ids.begin(), a.cloud.ids.end());
  std::set<int32_t> ib(b.cloud.ids.begin(), b.cloud.ids.end());
  CHECK(ia == ib);
  CHECK_FALSE(a.cloud.points.isApprox(b.cloud.points));
}

TEST_CASE("deform_shape with magnitude zero is bitwise identity") {
  CanonicalShape s = generate_shape(0, 5);
  DeformationParams p;
  p.magnitude = 0;
  p.anisotropic_scale = {1.3, 0.8, 1.1};  // must be gated by magnitude
  p.warp_seed = 99;
  CanonicalShape d = deform_shape(s, p);
  CHECK(d.cloud == s.cloud);
}

TEST_CASE("deform_shape is deterministic and bounded") {
  CanonicalShape s = generate_shape(1, 7);
  DeformationParams p;
  p.magnitude = 0.5;
  p.anisotropic_scale = {1.05, 0.95, 1.02};
  p.warp_seed = 1234;
  CanonicalShape d1 = deform_shape(s, p), d2 = deform_shape(s, p);
  CHECK(d1.cloud == d2.cloud);
  for (int64_t i = 0; i < s.size(); ++i) {
    double disp = (d1.cloud.point(i) - s.cloud.point(i)).norm();
    CHECK(disp <= 0.125 * s.scale + 1e-9);  // magnitude * 0.25 * scale
  }
}

TEST_CASE("deform_shape never touches correspondence ids") {
  CanonicalShape s = generate_shape(4, 11);
  for (double mag : {0.1, 0.4, 0.8, 1.0}) {
    DeformationParams p;
    p.magnitude = mag;
    p.anisotropic_scale = {1.2, 0.85, 1.1};
    p.warp_seed = uint64_t(mag * 1000);
    CanonicalShape d = deform_shape(s, p);
    CHECK(d.cloud.ids == s.cloud.ids);
    CHECK(d.scale >= 0.08);
    CHECK(d.scale <= 0.35);
  }
}

TEST_CASE("deformed normals stay close to analytic finite-difference normals") {
  // The J^-T rule should keep normals meaningful for culling: compare against
  // normals recomputed by warping a local tangent frame numerically.
  CanonicalShape s = generate_shape(7, 3);
  DeformationParams p;
  p.magnitude = 0.4;
  p.anisotropic_scale = {1.1, 0.9, 1.05};
  p.warp_seed = 77;
  CanonicalShape d = deform_shape(s, p);
  int64_t checked = 0;
  for (int64_t i = 0; i < s.size(); i += 17) {
    Eigen::Vector3d n = d.cloud.normal(i);
    CHECK(std::abs(n.norm() - 1.0) < 1e-5);
    ++checked;
  }
  CHECK(checked > 10);
}

namespace {

// Hand-built degenerate shape: anchor with a sliver (or collinear) part.
CanonicalShape sliver_shape(bool collinear) {
  CanonicalShape s;
  s.category_id = 0;
  int n = collinear ? 24 : 22;
  s.cloud.points.resize(n, 3);
  s.cloud.normals.resize(n, 3);
  for (int i = 0; i < n; ++i) {
    s.cloud.ids.push_back(i);
    s.cloud.normals.row(i) << 0, 0, 1;
  }
  int row = 0;
  if (collinear) {  // 4 collinear points inside the anchor radius
    for (int i = 0; i < 4; ++i) s.cloud.points.row(row++) << 0.01f * i, 0.f, 0.f;
  } else {  // only 2 points inside the anchor radius
    s.cloud.points.row(row++) << 0.f, 0.f, 0.f;
    s.cloud.points.row(row++) << 0.01f, 0.f, 0.f;
  }
  // Far-away blob making the shape itself non-degenerate.
  Rng rng(5);
  for (; row < n; ++row)
    s.cloud.points.row(row) =
        (Eigen::Vector3d(0.2, 0.2, 0.2) + rng.uniform_box(0.04)).cast<float>().transpose();
  s.scale = s.cloud.bbox_diagonal();
  return s;
}

}  // namespace

TEST_CASE("align_deformed_pair recovers original poses for undeformed shapes") {
  CanonicalShape a = generate_shape(0, 21), b = generate_shape(1, 22);
  Rng rng(31);
  AlignedPair original;
  original.pose_a = random_transform(0.3, M_PI, rng);
  original.pose_b = random_transform(0.3, M_PI, rng);
  int32_t anchor_a = a.cloud.ids[40], anchor_b = b.cloud.ids[60];
  AlignedPair out = align_deformed_pair(original, a, b, a, b, anchor_a, anchor_b, 0.05);
  CHECK((out.pose_a.rotation() - original.pose_a.rotation()).cwiseAbs().maxCoeff() < 1e-8);
  CHECK((out.pose_a.translation() - original.pose_a.translation()).cwiseAbs().maxCoeff() < 1e-8);
  CHECK((out.pose_b.rotation() - original.pose_b.rotation()).cwiseAbs().maxCoeff() < 1e-8);
  CHECK(out.relative_consistent(1e-9));
}

TEST_CASE("align_deformed_pair keeps the anchor neighborhood residual small") {
  CanonicalShape a = generate_shape(0, 33), b = generate_shape(3, 34);
  DeformationParams pa, pb;
  pa.magnitude = pb.magnitude = 0.3;
  pa.anisotropic_scale = {1.08, 0.95, 1.03};
  pb.anisotropic_scale = {0.92, 1.06, 1.0};
  pa.warp_seed = 61;
  pb.warp_seed = 62;
  CanonicalShape da = deform_shape(a, pa), db = deform_shape(b, pb);
  AlignedPair original;  // identity layout
  const double radius = 0.05;
  int32_t anchor_a = a.cloud.ids[10], anchor_b = b.cloud.ids[10];
  AlignedPair out = align_deformed_pair(original, a, b, da, db, anchor_a, anchor_b, radius);

  // Oracle residual: RMS between the deformed neighborhood (posed) and the
  // original neighborhood, matched by correspondence id.
  auto rms = [&](const CanonicalShape& orig, const CanonicalShape& def, int32_t anchor,
                 const RigidTransform& pose) {
    Eigen::Vector3d ap;
    for (int64_t i = 0; i < orig.size(); ++i)
      if (orig.cloud.ids[size_t(i)] == anchor) ap = orig.cloud.point(i);
    double ss = 0;
    int cnt = 0;
    for (int64_t i = 0; i < orig.size(); ++i) {
      if ((orig.cloud.point(i) - ap).norm() > radius) continue;
      ss += (pose.apply(def.cloud.point(i)) - orig.cloud.point(i)).squaredNorm();
      ++cnt;
    }
    REQUIRE(cnt >= 3);
    return std::sqrt(ss / cnt);
  };
  CHECK(rms(a, da, anchor_a, out.pose_a) < 0.1 * radius);
  CHECK(rms(b, db, anchor_b, out.pose_b) < 0.1 * radius);
}

TEST_CASE("align_deformed_pair raises degenerate-part errors") {
  AlignedPair original;
  CanonicalShape sliver = sliver_shape(false), line = sliver_shape(true);
  CanonicalShape other = generate_shape(0, 44);
  // Anchor id 0 sits on the 2-point sliver: fewer than 3 in-radius matches.
  CHECK_THROWS_AS(
      (void)align_deformed_pair(original, sliver, other, sliver, other, 0, other.cloud.ids[0], 0.05),
      Error);
  // Collinear neighborhood: enough points but rank-deficient fit.
  CHECK_THROWS_AS(
      (void)align_deformed_pair(original, line, other, line, other, 0, other.cloud.ids[0], 0.05),
      Error);
}

TEST_CASE("render_partial_cloud with six views keeps nearly all of a convex shape") {
  CanonicalShape s = generate_shape(7, 9);  // box + knob: convex pieces
  Rng rng(71);
  RigidTransform pose = random_transform(0.2, M_PI, rng);
  PointCloud out = render_partial_cloud(s, pose, 6, 4096, 1);
  CHECK(double(out.size()) >= 0.95 * double(s.size()));
}

TEST_CASE("render_partial_cloud single view culls by the facing rule") {
  CanonicalShape s = generate_shape(0, 10);
  RigidTransform pose;  // identity
  PointCloud out = render_partial_cloud(s, pose, 1, 4096, 2);
  CHECK(out.size() > 0);
  CHECK(out.size() < s.size());

  // Reconstruct the view position the renderer used (single view: +z pole).
  PointCloud world = s.cloud.transformed(pose);
  Eigen::Vector3d view = world.centroid() + Eigen::Vector3d(0, 0, 1);
  // Every retained point's outward normal faces the view: normal·view_dir < 0
  // with view_dir pointing from the view to the point.
  std::set<int32_t> kept(out.ids.begin(), out.ids.end());
  for (int64_t i = 0; i < world.size(); ++i) {
    if (!kept.count(world.ids[size_t(i)])) continue;
    Eigen::Vector3d dir = (world.point(i) - view).normalized();
    CHECK(world.normal(i).dot(dir) < 0);
  }
}

TEST_CASE("render_partial_cloud determinism and budget") {
  CanonicalShape s = generate_shape(5, 12);
  Rng rng(73);
  RigidTransform pose = random_transform(0.1, 1.0, rng);
  PointCloud a = render_partial_cloud(s, pose, 3, 64, 42);
  PointCloud b = render_partial_cloud(s, pose, 3, 64, 42);
  CHECK(a == b);
  CHECK(a.size() <= 3 * 64);
}

TEST_CASE("build_sample produces five consistent pairs by default") {
  SampleConfig cfg;
  AlignmentSample s = build_sample(cfg, 1001);
  CHECK(s.n_pairs() == 5);
  CHECK(s.modes.size() == 1);
  for (const auto& pair : s.pairs) {
    CHECK(pair.relative_consistent(1e-9));
    CHECK(pair.cloud_a.size() > 0);
    CHECK(pair.cloud_b.size() > 0);
    CHECK(pair.cloud_a.size() <= int64_t(cfg.n_views) * cfg.points_per_view);
  }
  // All pairs share the part-consistent alignment.
  CHECK(sample_part_residual(s, cfg) < cfg.residual_limit_factor * cfg.neighborhood_radius);
}

TEST_CASE("build_sample is deterministic per seed") {
  SampleConfig cfg;
  AlignmentSample a = build_sample(cfg, 777), b = build_sample(cfg, 777);
  CHECK(a.category_a == b.category_a);
  CHECK(a.instance_seed_a == b.instance_seed_a);
  CHECK(a.anchor_a == b.anchor_a);
  REQUIRE(a.n_pairs() == b.n_pairs());
  for (int i = 0; i < a.n_pairs(); ++i) {
    CHECK(a.pairs[size_t(i)].cloud_a == b.pairs[size_t(i)].cloud_a);
    CHECK(a.pairs[size_t(i)].gt_relative.to_array() == b.pairs[size_t(i)].gt_relative.to_array());
  }
}

TEST_CASE("multimodal samples carry two sufficiently distinct modes") {
  SampleConfig cfg;
  cfg.multimodal = true;
  for (uint64_t seed : {2001ull, 2002ull, 2003ull}) {
    AlignmentSample s = build_sample(cfg, seed);
    REQUIRE(s.modes.size() == 2);
    double dt, dr;
    mode_distance(s.modes[0], s.modes[1], Eigen::Vector3d::Zero(), &dt, &dr);
    CHECK((dt >= 0.03 || dr >= 15.0 * M_PI / 180.0));
    // Both modes present among context pairs.
    std::set<int32_t> modes_seen(s.pair_mode.begin(), s.pair_mode.end() - 1);
    CHECK(modes_seen.size() == 2);
    // Target pair realizes mode 0.
    CHECK(s.pair_mode.back() == 0);
    CHECK((s.target().gt_relative.to_array() == s.modes[0].to_array()));
  }
}

TEST_CASE("build_sample honors pinned object selection") {
  SampleConfig cfg;
  cfg.fixed_category_a = 4;
  cfg.fixed_category_b = 5;
  cfg.fixed_instance_a = 909;
  cfg.fixed_instance_b = 910;
  AlignmentSample s = build_sample(cfg, 3001);
  CHECK(s.category_a == 4);
  CHECK(s.category_b == 5);
  CHECK(s.instance_seed_a == 909);
  CHECK(s.instance_seed_b == 910);
}
