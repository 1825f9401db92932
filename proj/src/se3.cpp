#include "galign/se3.hpp"

#include <cmath>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "galign/error.hpp"

namespace galign {

namespace {
constexpr double kSmallAngle = 1e-8;
constexpr int kReorthPeriod = 50;
}  // namespace

RigidTransform::RigidTransform(const Eigen::Matrix3d& R, const Eigen::Vector3d& t)
    : R_(R), t_(t) {
  check(is_valid(1e-6), ErrorKind::Domain, "RigidTransform: rotation not orthonormal");
}

bool RigidTransform::is_valid(double tol) const {
  if (!R_.allFinite() || !t_.allFinite()) return false;
  Eigen::Matrix3d err = R_.transpose() * R_ - Eigen::Matrix3d::Identity();
  if (err.cwiseAbs().maxCoeff() > tol) return false;
  return R_.determinant() > 0.0;
}

RigidTransform RigidTransform::operator*(const RigidTransform& other) const {
  RigidTransform out;
  out.R_ = R_ * other.R_;
  out.t_ = R_ * other.t_ + t_;
  out.depth_ = std::max(depth_, other.depth_) + 1;
  if (out.depth_ >= kReorthPeriod) {
    out.R_ = orthonormalized(out.R_);
    out.depth_ = 0;
  }
  return out;
}

std::array<double, 12> RigidTransform::to_array() const {
  std::array<double, 12> a;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) a[size_t(3 * r + c)] = R_(r, c);
  for (int i = 0; i < 3; ++i) a[size_t(9 + i)] = t_(i);
  return a;
}

RigidTransform RigidTransform::from_array(const std::array<double, 12>& a) {
  Eigen::Matrix3d R;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) R(r, c) = a[size_t(3 * r + c)];
  Eigen::Vector3d t(a[9], a[10], a[11]);
  return RigidTransform(R, t);  // validating ctor: rejects corrupted data
}

Eigen::Matrix3d orthonormalized(const Eigen::Matrix3d& R) {
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(R, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d U = svd.matrixU(), V = svd.matrixV();
  Eigen::Matrix3d S = Eigen::Matrix3d::Identity();
  if ((U * V.transpose()).determinant() < 0) S(2, 2) = -1;
  return U * S * V.transpose();
}

RigidTransform expmap(const Twist& xi) {
  const Eigen::Vector3d& w = xi.rot;
  const double theta2 = w.squaredNorm();
  const double theta = std::sqrt(theta2);
  const Eigen::Matrix3d K = skew(w);
  Eigen::Matrix3d R, V;
  if (theta < kSmallAngle) {
    R = Eigen::Matrix3d::Identity() + K + 0.5 * K * K;
    V = Eigen::Matrix3d::Identity() + 0.5 * K + K * K / 6.0;
  } else {
    const double s = std::sin(theta), c = std::cos(theta);
    R = Eigen::Matrix3d::Identity() + (s / theta) * K + ((1.0 - c) / theta2) * K * K;
    V = Eigen::Matrix3d::Identity() + ((1.0 - c) / theta2) * K +
        ((theta - s) / (theta2 * theta)) * K * K;
  }
  return RigidTransform::trusted(R, V * xi.trans);
}

Twist logmap(const RigidTransform& T) {
  const Eigen::Matrix3d& R = T.rotation();
  double cos_theta = std::clamp((R.trace() - 1.0) * 0.5, -1.0, 1.0);
  double theta = std::acos(cos_theta);
  check(theta < M_PI - 1e-6, ErrorKind::Domain,
        "logmap: rotation within 1e-6 of pi, axis ill-conditioned");

  Eigen::Vector3d w;
  Eigen::Vector3d asym(R(2, 1) - R(1, 2), R(0, 2) - R(2, 0), R(1, 0) - R(0, 1));
  if (theta < kSmallAngle) {
    w = 0.5 * asym;  // sin θ ≈ θ
  } else {
    w = (theta / (2.0 * std::sin(theta))) * asym;
  }

  const double theta2 = theta * theta;
  const Eigen::Matrix3d K = skew(w);
  Eigen::Matrix3d Vinv;
  if (theta < kSmallAngle) {
    Vinv = Eigen::Matrix3d::Identity() - 0.5 * K + K * K / 12.0;
  } else {
    const double half = 0.5 * theta;
    const double cot_half = std::cos(half) / std::sin(half);
    Vinv = Eigen::Matrix3d::Identity() - 0.5 * K +
           ((1.0 - half * cot_half) / theta2) * K * K;
  }
  return Twist{w, Vinv * T.translation()};
}

RigidTransform kabsch_fit(const Eigen::Matrix<double, Eigen::Dynamic, 3>& src,
                          const Eigen::Matrix<double, Eigen::Dynamic, 3>& dst) {
  check(src.rows() == dst.rows(), ErrorKind::Domain, "kabsch_fit: size mismatch");
  check(src.rows() >= 3, ErrorKind::Domain, "kabsch_fit: needs at least 3 points");
  const Eigen::RowVector3d sc = src.colwise().mean(), dc = dst.colwise().mean();
  Eigen::Matrix3d H = (src.rowwise() - sc).transpose() * (dst.rowwise() - dc);
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(H, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Vector3d sv = svd.singularValues();
  // Rank < 2 leaves a free rotation about the dominant axis: no unique fit.
  check(sv(1) > 1e-9 * std::max(sv(0), 1e-300), ErrorKind::Domain,
        "kabsch_fit: degenerate (collinear or coincident) point sets");
  Eigen::Matrix3d U = svd.matrixU(), V = svd.matrixV();
  Eigen::Matrix3d S = Eigen::Matrix3d::Identity();
  if ((V * U.transpose()).determinant() < 0) S(2, 2) = -1;
  Eigen::Matrix3d R = V * S * U.transpose();
  return RigidTransform::trusted(R, dc.transpose() - R * sc.transpose());
}

RigidTransform random_transform(double trans_range, double rot_range, Rng& rng) {
  check(trans_range >= 0 && rot_range >= 0, ErrorKind::Domain,
        "random_transform: negative range");
  // Fixed draw order keeps streams reproducible even when a range is zero.
  Eigen::Vector3d t = rng.uniform_box(trans_range);
  Eigen::Vector3d axis = rng.unit_axis();
  double angle = rng.uniform(-rot_range, rot_range);
  RigidTransform rot = expmap(Twist{axis * angle, Eigen::Vector3d::Zero()});
  return RigidTransform::trusted(rot.rotation(), t);
}

double rotation_distance(const Eigen::Matrix3d& a, const Eigen::Matrix3d& b) {
  double c = std::clamp(((a.transpose() * b).trace() - 1.0) * 0.5, -1.0, 1.0);
  return std::acos(c);
}

}  // namespace galign
