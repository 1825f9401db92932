#pragma once

#include <array>
#include <cstdint>

#include <Eigen/Core>

#include "galign/rng.hpp"

namespace galign {

// Body twist, split form: rot is an axis-angle vector (radians), trans in meters.
struct Twist {
  Eigen::Vector3d rot = Eigen::Vector3d::Zero();
  Eigen::Vector3d trans = Eigen::Vector3d::Zero();

  Eigen::Matrix<double, 6, 1> packed() const {
    Eigen::Matrix<double, 6, 1> v;
    v << rot, trans;
    return v;
  }
  static Twist from_packed(const Eigen::Matrix<double, 6, 1>& v) {
    return Twist{v.head<3>(), v.tail<3>()};
  }
};

inline Eigen::Matrix3d skew(const Eigen::Vector3d& w) {
  Eigen::Matrix3d m;
  m << 0, -w.z(), w.y(), w.z(), 0, -w.x(), -w.y(), w.x(), 0;
  return m;
}

class RigidTransform {
 public:
  RigidTransform() : R_(Eigen::Matrix3d::Identity()), t_(Eigen::Vector3d::Zero()) {}

  // Validates orthonormality (det +1) unless trusted.
  RigidTransform(const Eigen::Matrix3d& R, const Eigen::Vector3d& t);

  static RigidTransform identity() { return RigidTransform(); }
  // Skips validation; for internal use where R is orthonormal by construction.
  static RigidTransform trusted(const Eigen::Matrix3d& R, const Eigen::Vector3d& t) {
    RigidTransform out;
    out.R_ = R;
    out.t_ = t;
    return out;
  }
  static RigidTransform translation(const Eigen::Vector3d& t) {
    return trusted(Eigen::Matrix3d::Identity(), t);
  }
  // Rotation by R about a fixed point c: p -> R (p - c) + c.
  static RigidTransform rotation_about(const Eigen::Matrix3d& R, const Eigen::Vector3d& c) {
    return trusted(R, c - R * c);
  }

  const Eigen::Matrix3d& rotation() const { return R_; }
  const Eigen::Vector3d& translation() const { return t_; }

  Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return R_ * p + t_; }
  // Rotates a direction (no translation).
  Eigen::Vector3d apply_dir(const Eigen::Vector3d& d) const { return R_ * d; }

  // this ∘ other: (a*b).apply(p) == a.apply(b.apply(p)). Composition depth is
  // tracked; the rotation is polar-re-orthonormalized every 50 compositions so
  // long Langevin chains cannot drift off the manifold.
  RigidTransform operator*(const RigidTransform& other) const;

  RigidTransform inverse() const {
    return trusted(R_.transpose(), -(R_.transpose() * t_));
  }

  Eigen::Matrix4d matrix() const {
    Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
    m.topLeftCorner<3, 3>() = R_;
    m.topRightCorner<3, 1>() = t_;
    return m;
  }

  bool is_valid(double tol = 1e-6) const;
  int compose_depth() const { return depth_; }

  // Row-major rotation then translation, 12 numbers.
  std::array<double, 12> to_array() const;
  static RigidTransform from_array(const std::array<double, 12>& a);

 private:
  Eigen::Matrix3d R_;
  Eigen::Vector3d t_;
  int depth_ = 0;
};

// Exponential map: rotation via Rodrigues, translation via the V matrix.
// Small-angle branch below 1e-8 rad (second-order Taylor).
RigidTransform expmap(const Twist& xi);

// Inverse of expmap. Throws Domain error within 1e-6 rad of a π rotation,
// where the axis is not recoverable to useful precision.
Twist logmap(const RigidTransform& T);

// Least-squares rigid fit src -> dst (SVD with reflection correction).
// Throws Domain error when under 3 points or the point sets are degenerate
// (collinear/coincident) so no unique rotation exists.
RigidTransform kabsch_fit(const Eigen::Matrix<double, Eigen::Dynamic, 3>& src,
                          const Eigen::Matrix<double, Eigen::Dynamic, 3>& dst);

// Uniform translation in [-trans_range, trans_range]^3, rotation with uniform
// axis and uniform angle in [-rot_range, rot_range]. Zero ranges → identity.
RigidTransform random_transform(double trans_range, double rot_range, Rng& rng);

// Geodesic distance on SO(3), radians in [0, π].
double rotation_distance(const Eigen::Matrix3d& a, const Eigen::Matrix3d& b);
inline double rotation_distance(const RigidTransform& a, const RigidTransform& b) {
  return rotation_distance(a.rotation(), b.rotation());
}

// Nearest orthonormal matrix with det +1 (polar factor via SVD).
Eigen::Matrix3d orthonormalized(const Eigen::Matrix3d& R);

}  // namespace galign
