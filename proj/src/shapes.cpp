#include "galign/shapes.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <cmath>
#include <functional>
#include <unordered_map>

#include <Eigen/Eigenvalues>
#include <Eigen/Geometry>

#include "galign/error.hpp"
#include "galign/rng.hpp"

namespace galign {

namespace {

// ---------------------------------------------------------------------------
// Grid sampling of parametric primitives. Point order (and therefore the
// correspondence id layout) is fixed by the grid sizes, which are constants
// per category — never derived from instance parameters.
// ---------------------------------------------------------------------------

struct Builder {
  std::vector<Eigen::Vector3d> pts;
  std::vector<Eigen::Vector3d> nrm;

  using SurfaceFn =
      std::function<void(double u, double v, Eigen::Vector3d* p, Eigen::Vector3d* n)>;

  void grid(int nu, int nv, const SurfaceFn& fn) {
    for (int i = 0; i < nu; ++i)
      for (int j = 0; j < nv; ++j) {
        double u = (i + 0.5) / nu, v = (j + 0.5) / nv;
        Eigen::Vector3d p, n;
        fn(u, v, &p, &n);
        pts.push_back(p);
        nrm.push_back(n.normalized());
      }
  }

  // Open cylinder side, axis z, centered at `c`.
  void cylinder(const Eigen::Vector3d& c, double r, double h, int nu, int nv) {
    grid(nu, nv, [&](double u, double v, Eigen::Vector3d* p, Eigen::Vector3d* n) {
      double a = 2 * M_PI * u;
      *p = c + Eigen::Vector3d(r * std::cos(a), r * std::sin(a), (v - 0.5) * h);
      *n = Eigen::Vector3d(std::cos(a), std::sin(a), 0);
    });
  }

  // Conical side r0 (bottom) -> r1 (top), axis z, centered at `c`.
  void frustum(const Eigen::Vector3d& c, double r0, double r1, double h, int nu, int nv,
               bool flip = false) {
    grid(nu, nv, [&](double u, double v, Eigen::Vector3d* p, Eigen::Vector3d* n) {
      double a = 2 * M_PI * u, rr = r0 + (r1 - r0) * v;
      *p = c + Eigen::Vector3d(rr * std::cos(a), rr * std::sin(a), (v - 0.5) * h);
      *n = Eigen::Vector3d(h * std::cos(a), h * std::sin(a), r0 - r1).normalized() *
           (flip ? -1.0 : 1.0);
    });
  }

  // Flat disk at height z (normal ±z), radial grid.
  void disk(const Eigen::Vector3d& c, double r, double z, double nz, int nu, int nv) {
    grid(nu, nv, [&](double u, double v, Eigen::Vector3d* p, Eigen::Vector3d* n) {
      double a = 2 * M_PI * u, rr = r * std::sqrt(v);
      *p = c + Eigen::Vector3d(rr * std::cos(a), rr * std::sin(a), z);
      *n = Eigen::Vector3d(0, 0, nz);
    });
  }

  // Torus segment: ring of radius R in the x–z plane around `c`, tube radius
  // r, ring angle phi in [phi0, phi1] measured from +x toward +z.
  void torus_segment(const Eigen::Vector3d& c, double R, double r, double phi0, double phi1,
                     int nu, int nv) {
    grid(nu, nv, [&](double u, double v, Eigen::Vector3d* p, Eigen::Vector3d* n) {
      double phi = phi0 + (phi1 - phi0) * u, psi = 2 * M_PI * v;
      Eigen::Vector3d radial(std::cos(phi), 0, std::sin(phi));
      *p = c + (R + r * std::cos(psi)) * radial + Eigen::Vector3d(0, r * std::sin(psi), 0);
      *n = std::cos(psi) * radial + Eigen::Vector3d(0, std::sin(psi), 0);
    });
  }

  // Axis-aligned box: all six faces, nu x nv each, centered at `c`.
  void box(const Eigen::Vector3d& c, const Eigen::Vector3d& half, int nu, int nv) {
    for (int axis = 0; axis < 3; ++axis)
      for (int side = -1; side <= 1; side += 2) {
        int a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
        grid(nu, nv, [&](double u, double v, Eigen::Vector3d* p, Eigen::Vector3d* n) {
          Eigen::Vector3d q;
          q(axis) = side * half(axis);
          q(a1) = (2 * u - 1) * half(a1);
          q(a2) = (2 * v - 1) * half(a2);
          *p = c + q;
          *n = Eigen::Vector3d::Zero();
          (*n)(axis) = side;
        });
      }
  }

  // Ellipsoid with semi-axes `ax`, centered at `c`.
  void ellipsoid(const Eigen::Vector3d& c, const Eigen::Vector3d& ax, int nu, int nv) {
    grid(nu, nv, [&](double u, double v, Eigen::Vector3d* p, Eigen::Vector3d* n) {
      double phi = 2 * M_PI * u, th = M_PI * v;
      Eigen::Vector3d s(std::sin(th) * std::cos(phi), std::sin(th) * std::sin(phi),
                        std::cos(th));
      *p = c + s.cwiseProduct(ax);
      *n = s.cwiseQuotient(ax);
    });
  }

  CanonicalShape finish(int category_id) const {
    CanonicalShape out;
    out.category_id = category_id;
    int64_t n = int64_t(pts.size());
    Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
    for (const auto& p : pts) centroid += p;
    centroid /= double(n);
    out.cloud.points.resize(n, 3);
    out.cloud.normals.resize(n, 3);
    out.cloud.ids.resize(size_t(n));
    for (int64_t i = 0; i < n; ++i) {
      out.cloud.points.row(i) = (pts[size_t(i)] - centroid).cast<float>().transpose();
      out.cloud.normals.row(i) = nrm[size_t(i)].cast<float>().transpose();
      out.cloud.ids[size_t(i)] = int32_t(i);
    }
    out.scale = out.cloud.bbox_diagonal();
    check(out.scale >= 0.08 && out.scale <= 0.35, ErrorKind::Domain,
          "generated shape diagonal outside [0.08, 0.35] m");
    return out;
  }
};

}  // namespace

const std::vector<CategoryInfo>& shape_catalog() {
  static const std::vector<CategoryInfo> catalog = {
      {"mug", false},  {"pan", false},   {"peg", true},   {"bowl", true},
      {"bottle", false}, {"brush", false}, {"hook", false}, {"box", false},
  };
  return catalog;
}

int category_count() { return int(shape_catalog().size()); }

int category_by_name(const std::string& name) {
  const auto& cat = shape_catalog();
  for (size_t i = 0; i < cat.size(); ++i)
    if (cat[i].name == name) return int(i);
  return -1;
}

CanonicalShape generate_shape(int category_id, uint64_t instance_seed) {
  check(category_id >= 0 && category_id < category_count(), ErrorKind::Config,
        "generate_shape: unknown category " + std::to_string(category_id));
  Rng rng = derive_rng(instance_seed, "shape", uint64_t(category_id));
  Builder b;
  const Eigen::Vector3d O = Eigen::Vector3d::Zero();
  switch (category_id) {
    case 0: {  // mug: open cylinder + bottom + side handle
      double r = rng.uniform(0.035, 0.05), h = rng.uniform(0.08, 0.12);
      double hr = rng.uniform(0.022, 0.030), tr = rng.uniform(0.006, 0.008);
      b.cylinder(O, r, h, 26, 13);
      b.disk(O, r, -h / 2, -1, 16, 6);
      b.torus_segment({r, 0, 0}, hr, tr, -1.2, 1.2, 12, 9);
      break;
    }
    case 1: {  // pan: shallow dish + straight handle
      double r = rng.uniform(0.06, 0.085), h = rng.uniform(0.02, 0.035);
      double hl = rng.uniform(0.07, 0.10);
      b.disk(O, r, -h / 2, -1, 20, 8);
      b.cylinder(O, r, h, 30, 5);
      b.box({r + hl / 2, 0, h * 0.25}, {hl / 2, 0.011, 0.004}, 9, 4);
      break;
    }
    case 2: {  // peg: shaft on a base plate (rotationally symmetric)
      double br = rng.uniform(0.035, 0.05), sr = rng.uniform(0.011, 0.016);
      double sh = rng.uniform(0.10, 0.15);
      b.disk(O, br, 0.012, 1, 18, 7);
      b.disk(O, br, 0.0, -1, 18, 7);
      b.cylinder({0, 0, 0.006}, br, 0.012, 24, 3);
      b.cylinder({0, 0, 0.012 + sh / 2}, sr, sh, 14, 14);
      b.disk(O, sr, 0.012 + sh, 1, 8, 3);
      break;
    }
    case 3: {  // bowl: double-walled frustum (rotationally symmetric)
      double rt = rng.uniform(0.06, 0.09), h = rng.uniform(0.04, 0.06);
      double rb = 0.45 * rt;
      b.frustum(O, rb, rt, h, 28, 8);
      b.frustum({0, 0, 0.004}, rb - 0.004, rt - 0.004, h, 26, 7, /*flip=*/true);
      b.disk(O, rb, -h / 2, -1, 14, 5);
      break;
    }
    case 4: {  // bottle: body + shoulder + neck + cap + side nub
      double r = rng.uniform(0.03, 0.042), h = rng.uniform(0.10, 0.14);
      double nr = 0.4 * r;
      b.cylinder(O, r, h, 22, 12);
      b.disk(O, r, -h / 2, -1, 14, 5);
      b.frustum({0, 0, h / 2 + 0.0125}, r, nr, 0.025, 16, 4);
      b.cylinder({0, 0, h / 2 + 0.025 + 0.015}, nr, 0.03, 12, 4);
      b.disk({0, 0, 0}, nr, h / 2 + 0.055, 1, 8, 3);
      b.box({r + 0.005, 0, h * 0.2}, {0.005, 0.009, 0.012}, 4, 4);
      break;
    }
    case 5: {  // brush: handle bar + angled head block
      double hl = rng.uniform(0.10, 0.14), hw = rng.uniform(0.010, 0.014);
      double headl = rng.uniform(0.045, 0.055);
      b.box({0, 0, 0}, {hl / 2, hw, 0.006}, 16, 4);
      b.box({hl / 2 + headl / 2, 0, -0.008}, {headl / 2, 0.017, 0.010}, 8, 6);
      b.grid(12, 8, [&](double u, double v, Eigen::Vector3d* p, Eigen::Vector3d* n) {
        *p = Eigen::Vector3d(hl / 2 + headl * u, (2 * v - 1) * 0.017, -0.020);
        *n = Eigen::Vector3d(0, 0, -1);
      });
      break;
    }
    case 6: {  // hook: wall plate + arm + curved tip (held-out category)
      double al = rng.uniform(0.06, 0.09), R = rng.uniform(0.020, 0.028);
      b.box({0, 0, 0}, {0.005, 0.025, 0.04}, 4, 10);
      b.box({0.005 + al / 2, 0, 0.03}, {al / 2, 0.006, 0.006}, 10, 4);
      b.torus_segment({0.005 + al, 0, 0.03 - R}, R, 0.006, M_PI / 2, M_PI * 1.35, 12, 8);
      break;
    }
    case 7: {  // lidded box with off-center knob (held-out category)
      double w = rng.uniform(0.08, 0.12), d = rng.uniform(0.06, 0.09);
      double h = rng.uniform(0.05, 0.08), kr = rng.uniform(0.012, 0.018);
      b.box(O, {w / 2, d / 2, h / 2}, 9, 7);
      b.ellipsoid({w * 0.2, d * 0.15, h / 2 + kr * 0.6}, {kr, kr, kr * 0.8}, 10, 6);
      break;
    }
    default:
      fail(ErrorKind::Config, "generate_shape: unregistered category");
  }
  return b.finish(category_id);
}

CanonicalShape deform_shape(const CanonicalShape& shape, const DeformationParams& params) {
  check(params.magnitude >= 0 && params.magnitude <= 1, ErrorKind::Domain,
        "deform_shape: magnitude outside [0, 1]");
  if (params.magnitude == 0) return shape;  // exact identity, bitwise

  const double mag = params.magnitude, scale = shape.scale;
  const int64_t n = shape.size();
  Rng rng = derive_rng(params.warp_seed, "warp");

  struct Kernel {
    Eigen::Vector3d c, dir;
    double s, a;
  };
  std::vector<Kernel> kernels;
  Eigen::Vector3f lo = shape.cloud.points.colwise().minCoeff();
  Eigen::Vector3f hi = shape.cloud.points.colwise().maxCoeff();
  for (int k = 0; k < params.n_warp_kernels; ++k) {
    Kernel kr;
    for (int c = 0; c < 3; ++c) kr.c(c) = rng.uniform(lo(c), hi(c));
    kr.dir = rng.unit_axis();
    kr.s = rng.uniform(0.6, 1.0) * scale;  // wide kernels keep parts near-rigid
    kr.a = rng.uniform(0.3, 1.0) * 0.25 * scale;
    kernels.push_back(kr);
  }

  const Eigen::Vector3d S_eff =
      Eigen::Vector3d::Ones() + mag * (params.anisotropic_scale - Eigen::Vector3d::Ones());
  const double bound = mag * 0.25 * scale;

  std::vector<Eigen::Vector3d> disp(static_cast<size_t>(n));
  std::vector<Eigen::Matrix3d> jac(static_cast<size_t>(n));
  double max_disp = 0;
  for (int64_t i = 0; i < n; ++i) {
    Eigen::Vector3d p = shape.cloud.point(i);
    Eigen::Vector3d d = (S_eff - Eigen::Vector3d::Ones()).cwiseProduct(p);
    Eigen::Matrix3d J = (S_eff - Eigen::Vector3d::Ones()).asDiagonal();
    for (const auto& k : kernels) {
      Eigen::Vector3d r = p - k.c;
      double phi = std::exp(-r.squaredNorm() / (2 * k.s * k.s));
      d += mag * k.a * phi * k.dir;
      J += mag * k.a * phi * k.dir * (-r / (k.s * k.s)).transpose();
    }
    disp[size_t(i)] = d;
    jac[size_t(i)] = J;
    max_disp = std::max(max_disp, d.norm());
  }
  double shrink = (max_disp > bound && max_disp > 0) ? bound / max_disp : 1.0;

  CanonicalShape out;
  out.category_id = shape.category_id;
  out.cloud.ids = shape.cloud.ids;  // correspondences never touched
  out.cloud.points.resize(n, 3);
  out.cloud.normals.resize(n, 3);
  for (int64_t i = 0; i < n; ++i) {
    Eigen::Vector3d p = shape.cloud.point(i) + shrink * disp[size_t(i)];
    out.cloud.points.row(i) = p.cast<float>().transpose();
    Eigen::Matrix3d J = Eigen::Matrix3d::Identity() + shrink * jac[size_t(i)];
    Eigen::Vector3d nml = shape.cloud.normal(i);
    if (std::abs(J.determinant()) > 0.05) {
      nml = J.inverse().transpose() * nml;  // surface normals transform by J^-T
    }
    double nn = nml.norm();
    if (nn > 1e-12) nml /= nn;
    out.cloud.normals.row(i) = nml.cast<float>().transpose();
  }

  // Keep the size-realism invariant under extreme scale/warp combinations.
  double diag = out.cloud.bbox_diagonal();
  double fix = diag > 0.35 ? 0.35 / diag : (diag < 0.08 ? 0.08 / diag : 1.0);
  if (fix != 1.0) out.cloud.points *= float(fix);
  out.scale = out.cloud.bbox_diagonal();
  return out;
}

namespace {

std::unordered_map<int32_t, int64_t> id_index(const PointCloud& cloud) {
  std::unordered_map<int32_t, int64_t> m;
  m.reserve(size_t(cloud.size()));
  for (int64_t i = 0; i < cloud.size(); ++i) m.emplace(cloud.ids[size_t(i)], i);
  return m;
}

// Correspondence ids within `radius` of the anchor point, canonical frame.
std::vector<int32_t> neighborhood_ids(const CanonicalShape& shape, int32_t anchor_id,
                                      double radius) {
  auto idx = id_index(shape.cloud);
  auto it = idx.find(anchor_id);
  check(it != idx.end(), ErrorKind::Domain, "anchor id absent from shape");
  Eigen::Vector3d a = shape.cloud.point(it->second);
  std::vector<int32_t> out;
  for (int64_t i = 0; i < shape.size(); ++i)
    if ((shape.cloud.point(i) - a).norm() <= radius) out.push_back(shape.cloud.ids[size_t(i)]);
  return out;
}

// Kabsch of deformed neighborhood onto the original's world neighborhood.
RigidTransform fit_part_pose(const CanonicalShape& original, const RigidTransform& original_pose,
                             const CanonicalShape& deformed, const std::vector<int32_t>& ids) {
  check(ids.size() >= 3, ErrorKind::Domain,
        "degenerate part: fewer than 3 correspondences in anchor neighborhood");
  auto oidx = id_index(original.cloud), didx = id_index(deformed.cloud);
  Eigen::Matrix<double, Eigen::Dynamic, 3> src(int64_t(ids.size()), 3), dst(int64_t(ids.size()), 3);
  for (size_t j = 0; j < ids.size(); ++j) {
    auto oi = oidx.find(ids[j]);
    auto di = didx.find(ids[j]);
    check(oi != oidx.end() && di != didx.end(), ErrorKind::Domain,
          "anchor neighborhood id missing from correspondence set");
    src.row(int64_t(j)) = deformed.cloud.point(di->second).transpose();
    dst.row(int64_t(j)) = original_pose.apply(original.cloud.point(oi->second)).transpose();
  }
  return kabsch_fit(src, dst);
}

}  // namespace

AlignedPair align_deformed_pair(const AlignedPair& original, const CanonicalShape& original_a,
                                const CanonicalShape& original_b, const CanonicalShape& deformed_a,
                                const CanonicalShape& deformed_b, int32_t anchor_a,
                                int32_t anchor_b, double neighborhood_radius) {
  auto ids_a = neighborhood_ids(original_a, anchor_a, neighborhood_radius);
  auto ids_b = neighborhood_ids(original_b, anchor_b, neighborhood_radius);
  AlignedPair out;
  out.pose_a = fit_part_pose(original_a, original.pose_a, deformed_a, ids_a);
  out.pose_b = fit_part_pose(original_b, original.pose_b, deformed_b, ids_b);
  out.gt_relative = out.pose_b.inverse() * out.pose_a;
  out.cloud_a = deformed_a.cloud.transformed(out.pose_a);
  out.cloud_b = deformed_b.cloud.transformed(out.pose_b);
  return out;
}

bool AlignedPair::relative_consistent(double tol) const {
  RigidTransform ref = pose_b.inverse() * pose_a;
  double err = (ref.rotation() - gt_relative.rotation()).cwiseAbs().maxCoeff();
  err = std::max(err, (ref.translation() - gt_relative.translation()).cwiseAbs().maxCoeff());
  return err <= tol;
}

PointCloud render_partial_cloud(const CanonicalShape& shape, const RigidTransform& world_pose,
                                int n_views, int points_per_view, uint64_t seed) {
  check(n_views >= 1, ErrorKind::Domain, "render: n_views must be >= 1");
  check(points_per_view >= 1, ErrorKind::Domain, "render: points_per_view must be >= 1");
  check(shape.cloud.has_normals(), ErrorKind::Domain, "render: shape lacks normals");
  PointCloud world = shape.cloud.transformed(world_pose);
  Eigen::Vector3d center = world.centroid();

  // Fixed Fibonacci-sphere view directions; geometry is seed-independent.
  const double golden = M_PI * (3.0 - std::sqrt(5.0));
  std::vector<Eigen::Vector3d> views;
  for (int v = 0; v < n_views; ++v) {
    double z = n_views == 1 ? 1.0 : 1.0 - 2.0 * (v + 0.5) / n_views;
    double rho = std::sqrt(std::max(0.0, 1.0 - z * z)), a = golden * v;
    views.push_back(center + Eigen::Vector3d(rho * std::cos(a), rho * std::sin(a), z));
  }

  std::vector<int64_t> kept;
  for (int64_t i = 0; i < world.size(); ++i) {
    Eigen::Vector3d p = world.point(i), n = world.normal(i);
    for (const auto& vp : views) {
      if (n.dot(vp - p) > 1e-9) {  // outward normal faces the viewpoint
        kept.push_back(i);
        break;
      }
    }
  }

  int64_t budget = int64_t(n_views) * points_per_view;
  if (int64_t(kept.size()) > budget) {
    Rng rng = derive_rng(seed, "render-downsample");
    // Partial Fisher-Yates, then re-sort so output order stays index-stable.
    for (int64_t i = 0; i < budget; ++i) {
      int64_t j = i + int64_t(rng.uniform_int(uint64_t(int64_t(kept.size()) - i)));
      std::swap(kept[size_t(i)], kept[size_t(j)]);
    }
    kept.resize(size_t(budget));
    std::sort(kept.begin(), kept.end());
  }

  PointCloud out = world.subset(kept);
  out.normals.resize(0, 3);  // observations carry positions + ids only
  return out;
}

uint64_t SampleConfig::digest() const {
  uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&h](const void* p, size_t n) { h = fnv1a(p, n, h); };
  mix(&n_pairs, sizeof(n_pairs));
  mix(&magnitude_lo, sizeof(magnitude_lo));
  mix(&magnitude_hi, sizeof(magnitude_hi));
  mix(&aniso_extent, sizeof(aniso_extent));
  mix(&n_warp_kernels, sizeof(n_warp_kernels));
  mix(&multimodal, sizeof(multimodal));
  mix(&neighborhood_radius, sizeof(neighborhood_radius));
  mix(&n_views, sizeof(n_views));
  mix(&points_per_view, sizeof(points_per_view));
  mix(&place_trans_range, sizeof(place_trans_range));
  mix(&residual_limit_factor, sizeof(residual_limit_factor));
  for (int c : categories) mix(&c, sizeof(c));
  int32_t fa = fixed_category_a.value_or(-1), fb = fixed_category_b.value_or(-1);
  uint64_t ia = fixed_instance_a.value_or(0), ib = fixed_instance_b.value_or(0);
  uint8_t has = uint8_t((fixed_instance_a ? 1 : 0) | (fixed_instance_b ? 2 : 0));
  mix(&fa, sizeof(fa));
  mix(&fb, sizeof(fb));
  mix(&ia, sizeof(ia));
  mix(&ib, sizeof(ib));
  mix(&has, sizeof(has));
  return h;
}

namespace {

std::vector<int> default_pool() { return {0, 1, 2, 3, 4, 5}; }  // hook/box held out

// Picks an anchor whose neighborhood supports a stable fit.
int32_t pick_anchor(const CanonicalShape& shape, double radius, Rng& rng,
                    const std::optional<Eigen::Vector3d>& avoid, double avoid_dist) {
  for (int attempt = 0; attempt < 40; ++attempt) {
    int64_t i = int64_t(rng.uniform_int(uint64_t(shape.size())));
    Eigen::Vector3d p = shape.cloud.point(i);
    if (avoid && (p - *avoid).norm() < avoid_dist) continue;
    auto ids = neighborhood_ids(shape, shape.cloud.ids[size_t(i)], radius);
    if (int64_t(ids.size()) < 8) continue;
    // Reject near-collinear neighborhoods (free axis under Kabsch).
    auto idx = id_index(shape.cloud);
    Eigen::Matrix<double, Eigen::Dynamic, 3> pts(int64_t(ids.size()), 3);
    for (size_t j = 0; j < ids.size(); ++j)
      pts.row(int64_t(j)) = shape.cloud.point(idx.at(ids[j])).transpose();
    Eigen::RowVector3d mean = pts.colwise().mean();
    Eigen::Matrix3d cov = (pts.rowwise() - mean).transpose() * (pts.rowwise() - mean);
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov);
    if (eig.eigenvalues()(1) < 1e-8 * std::max(eig.eigenvalues()(2), 1e-300)) continue;
    return shape.cloud.ids[size_t(i)];
  }
  fail(ErrorKind::Domain, "degenerate part: no stable anchor neighborhood found");
}

// Rigidly re-seats a deformed instance so its anchor patch returns to the
// canonical patch location. Deformation moves the patch inside the body frame;
// re-seating keeps body frames patch-stable across a sample's pairs, which is
// what lets their gt transforms agree at the part.
CanonicalShape reseat_at_patch(const CanonicalShape& original, const CanonicalShape& deformed,
                               int32_t anchor, double radius) {
  auto ids = neighborhood_ids(original, anchor, radius);
  RigidTransform t = fit_part_pose(original, RigidTransform::identity(), deformed, ids);
  CanonicalShape out;
  out.category_id = deformed.category_id;
  out.cloud = deformed.cloud.transformed(t);
  out.scale = out.cloud.bbox_diagonal();
  return out;
}

// Max pairwise RMS of A-anchor neighborhoods mapped into B's frame, per mode.
double part_residual(const std::vector<std::vector<Eigen::Vector3d>>& in_b_frame,
                     const std::vector<int32_t>& pair_mode) {
  double worst = 0;
  for (size_t i = 0; i < in_b_frame.size(); ++i)
    for (size_t j = i + 1; j < in_b_frame.size(); ++j) {
      if (pair_mode[i] != pair_mode[j]) continue;
      double ss = 0;
      size_t n = std::min(in_b_frame[i].size(), in_b_frame[j].size());
      for (size_t k = 0; k < n; ++k) ss += (in_b_frame[i][k] - in_b_frame[j][k]).squaredNorm();
      worst = std::max(worst, std::sqrt(ss / double(n)));
    }
  return worst;
}

AlignmentSample try_build_sample(const SampleConfig& cfg, uint64_t sample_seed,
                                 uint64_t attempt_seed) {
  check(cfg.n_pairs >= 2, ErrorKind::Config, "build_sample: n_pairs must be >= 2");
  check(!cfg.multimodal || cfg.n_pairs >= 3, ErrorKind::Config,
        "build_sample: multimodal needs >= 3 pairs so both modes fit in the context");
  Rng rng = derive_rng(attempt_seed, "sample");

  AlignmentSample s;
  s.sample_seed = sample_seed;
  std::vector<int> pool = cfg.categories.empty() ? default_pool() : cfg.categories;
  s.category_a =
      cfg.fixed_category_a.value_or(pool[size_t(rng.uniform_int(uint64_t(pool.size())))]);
  s.category_b =
      cfg.fixed_category_b.value_or(pool[size_t(rng.uniform_int(uint64_t(pool.size())))]);
  s.instance_seed_a = cfg.fixed_instance_a.value_or(rng.next_u64());
  s.instance_seed_b = cfg.fixed_instance_b.value_or(rng.next_u64());

  CanonicalShape A0 = generate_shape(s.category_a, s.instance_seed_a);
  CanonicalShape B0 = generate_shape(s.category_b, s.instance_seed_b);

  const int n_modes = cfg.multimodal ? 2 : 1;

  auto anchor_pt = [](const CanonicalShape& sh, int32_t id) {
    auto idx = id_index(sh.cloud);
    return sh.cloud.point(idx.at(id));
  };
  s.anchor_a = pick_anchor(A0, cfg.neighborhood_radius, rng, std::nullopt, 0);
  s.anchor_b = pick_anchor(B0, cfg.neighborhood_radius, rng, std::nullopt, 0);
  if (cfg.multimodal) {
    s.anchor_a2 = pick_anchor(A0, cfg.neighborhood_radius, rng, anchor_pt(A0, s.anchor_a),
                              0.3 * A0.scale);
    s.anchor_b2 = pick_anchor(B0, cfg.neighborhood_radius, rng, anchor_pt(B0, s.anchor_b),
                              0.3 * B0.scale);
  }
  auto anchors = [&](int m) {
    return m == 0 ? std::pair<int32_t, int32_t>{s.anchor_a, s.anchor_b}
                  : std::pair<int32_t, int32_t>{s.anchor_a2, s.anchor_b2};
  };

  // Original layouts: one contact placement per mode. A's anchor patch meets
  // B's anchor patch face to face (antiparallel normals) with a small gap, a
  // random spin about the contact normal, and a slight tangential offset.
  // Anchoring the task at the touching parts is what keeps every pair's
  // alignment agreeing there even though both objects deform independently.
  std::vector<AlignedPair> layout(static_cast<size_t>(n_modes));
  {
    auto ia = id_index(A0.cloud), ib = id_index(B0.cloud);
    for (int m = 0; m < n_modes; ++m) {
      auto [aa, ab] = anchors(m);
      Eigen::Vector3d ap = A0.cloud.point(ia.at(aa)), an = A0.cloud.normal(ia.at(aa));
      Eigen::Vector3d bp = B0.cloud.point(ib.at(ab)), bn = B0.cloud.normal(ib.at(ab));
      Eigen::Matrix3d flip = Eigen::Quaterniond::FromTwoVectors(an, -bn).toRotationMatrix();
      double spin = rng.uniform(0, 2 * M_PI);
      Eigen::Matrix3d R = Eigen::AngleAxisd(spin, bn).toRotationMatrix() * flip;
      double gap = rng.uniform(0.004, 0.02);
      Eigen::Vector3d u = bn.unitOrthogonal(), v = bn.cross(u);
      Eigen::Vector3d site =
          bp + gap * bn + rng.uniform(-0.01, 0.01) * u + rng.uniform(-0.01, 0.01) * v;
      layout[size_t(m)].pose_b = RigidTransform::identity();
      layout[size_t(m)].pose_a = RigidTransform::trusted(R, site - R * ap);
    }
  }

  // Mode assignment: uniform per context pair, both modes represented; the
  // target (last) pair realizes mode 0 and stores every mode's alignment.
  s.pair_mode.assign(size_t(cfg.n_pairs), 0);
  if (cfg.multimodal) {
    do {
      for (int i = 0; i + 1 < cfg.n_pairs; ++i) s.pair_mode[size_t(i)] = int32_t(rng.uniform_int(2));
    } while (std::count(s.pair_mode.begin(), s.pair_mode.end() - 1, 0) == 0 ||
             std::count(s.pair_mode.begin(), s.pair_mode.end() - 1, 1) == 0);
  }

  auto ids_a0 = neighborhood_ids(A0, s.anchor_a, cfg.neighborhood_radius);
  std::vector<std::vector<Eigen::Vector3d>> neigh_in_b(static_cast<size_t>(cfg.n_pairs));

  for (int i = 0; i < cfg.n_pairs; ++i) {
    DeformationParams pa, pb;
    pa.magnitude = rng.uniform(cfg.magnitude_lo, cfg.magnitude_hi);
    pb.magnitude = rng.uniform(cfg.magnitude_lo, cfg.magnitude_hi);
    for (int c = 0; c < 3; ++c) {
      pa.anisotropic_scale(c) = rng.uniform(1 - cfg.aniso_extent, 1 + cfg.aniso_extent);
      pb.anisotropic_scale(c) = rng.uniform(1 - cfg.aniso_extent, 1 + cfg.aniso_extent);
    }
    pa.warp_seed = rng.next_u64();
    pb.warp_seed = rng.next_u64();
    pa.n_warp_kernels = pb.n_warp_kernels = cfg.n_warp_kernels;

    CanonicalShape dA = deform_shape(A0, pa), dB = deform_shape(B0, pb);
    const int mode = s.pair_mode[size_t(i)];
    auto [aa, ab] = anchors(mode);
    dA = reseat_at_patch(A0, dA, aa, cfg.neighborhood_radius);
    dB = reseat_at_patch(B0, dB, ab, cfg.neighborhood_radius);
    AlignedPair aligned = align_deformed_pair(layout[size_t(mode)], A0, B0, dA, dB, aa, ab,
                                              cfg.neighborhood_radius);

    if (i == cfg.n_pairs - 1) {  // record every mode's gt for the target pair
      for (int m = 0; m < n_modes; ++m) {
        auto [ma, mb] = anchors(m);
        AlignedPair alt = (m == mode) ? aligned
                                      : align_deformed_pair(layout[size_t(m)], A0, B0, dA, dB,
                                                            ma, mb, cfg.neighborhood_radius);
        s.modes.push_back(alt.gt_relative);
      }
    }

    // Re-pose the pair at a fresh world placement; gt_relative is placement-free.
    AlignedPair pair;
    pair.pose_b = random_transform(cfg.place_trans_range, M_PI, rng);
    pair.gt_relative = aligned.gt_relative;
    pair.pose_a = pair.pose_b * pair.gt_relative;
    pair.cloud_a = render_partial_cloud(dA, pair.pose_a, cfg.n_views, cfg.points_per_view,
                                        rng.next_u64());
    pair.cloud_b = render_partial_cloud(dB, pair.pose_b, cfg.n_views, cfg.points_per_view,
                                        rng.next_u64());
    s.pairs.push_back(std::move(pair));

    // Mode-0 part residual bookkeeping (gate below).
    if (mode == 0) {
      auto didx = id_index(dA.cloud);
      std::vector<Eigen::Vector3d> q;
      for (int32_t id : ids_a0) q.push_back(aligned.gt_relative.apply(dA.cloud.point(didx.at(id))));
      neigh_in_b[size_t(i)] = std::move(q);
    }
  }

  // Part-consistency gate on the mode-0 pairs (full-surface neighborhoods).
  std::vector<std::vector<Eigen::Vector3d>> mode0;
  std::vector<int32_t> zeros;
  for (int i = 0; i < cfg.n_pairs; ++i)
    if (s.pair_mode[size_t(i)] == 0) {
      mode0.push_back(neigh_in_b[size_t(i)]);
      zeros.push_back(0);
    }
  double resid = part_residual(mode0, zeros);
  check(resid < cfg.residual_limit_factor * cfg.neighborhood_radius, ErrorKind::Domain,
        "part-consistency residual gate failed");

  if (cfg.multimodal) {
    double dt, dr;
    Eigen::Vector3d c = Eigen::Vector3d::Zero();  // shapes are centroid-centered
    mode_distance(s.modes[0], s.modes[1], c, &dt, &dr);
    check(dt >= 0.03 || dr >= 15.0 * M_PI / 180.0, ErrorKind::Domain,
          "multimodal modes not distinct enough");
  }
  return s;
}

}  // namespace

AlignmentSample build_sample(const SampleConfig& config, uint64_t sample_seed) {
  std::string last;
  for (int attempt = 0; attempt < 5; ++attempt) {
    uint64_t aseed = derive_seed(sample_seed, "build-attempt", uint64_t(attempt));
    try {
      return try_build_sample(config, sample_seed, aseed);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::Domain) throw;
      last = e.what();
    }
  }
  fail(ErrorKind::Data, "build_sample: 5 attempts failed for seed " +
                            std::to_string(sample_seed) + " (last: " + last + ")");
}

double sample_part_residual(const AlignmentSample& sample, const SampleConfig& config) {
  // Post-hoc variant on the rendered observations: neighborhoods matched by
  // correspondence id against the regenerated original shape, compared on the
  // id intersection across pairs of the same mode.
  CanonicalShape A0 = generate_shape(sample.category_a, sample.instance_seed_a);
  auto ids = neighborhood_ids(A0, sample.anchor_a, config.neighborhood_radius);
  std::vector<std::unordered_map<int32_t, Eigen::Vector3d>> maps;
  for (const auto& pair : sample.pairs) {
    std::unordered_map<int32_t, Eigen::Vector3d> m;
    RigidTransform to_b = pair.pose_b.inverse();
    auto idx = id_index(pair.cloud_a);
    for (int32_t id : ids) {
      auto it = idx.find(id);
      if (it != idx.end()) m.emplace(id, to_b.apply(pair.cloud_a.point(it->second)));
    }
    maps.push_back(std::move(m));
  }
  double worst = 0;
  for (size_t i = 0; i < maps.size(); ++i)
    for (size_t j = i + 1; j < maps.size(); ++j) {
      if (sample.pair_mode[i] != sample.pair_mode[j]) continue;
      double ss = 0;
      int n = 0;
      for (const auto& [id, q] : maps[i]) {
        auto it = maps[j].find(id);
        if (it == maps[j].end()) continue;
        ss += (q - it->second).squaredNorm();
        ++n;
      }
      if (n >= 3) worst = std::max(worst, std::sqrt(ss / double(n)));
    }
  return worst;
}

void mode_distance(const RigidTransform& m0, const RigidTransform& m1, const Eigen::Vector3d& c,
                   double* trans_diff, double* rot_diff) {
  if (trans_diff) *trans_diff = (m0.apply(c) - m1.apply(c)).norm();
  if (rot_diff) *rot_diff = rotation_distance(m0, m1);
}

}  // namespace galign
