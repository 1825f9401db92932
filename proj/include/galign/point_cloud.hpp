#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Core>

#include "galign/se3.hpp"

namespace galign {

using PointMatrix = Eigen::Matrix<float, Eigen::Dynamic, 3, Eigen::RowMajor>;

// Ordered 3D point set with optional per-point correspondence ids and normals.
// Coordinates are float32 end-to-end (generation computes in double and rounds
// once) so dataset round-trips are bitwise. Geometry math on clouds is done in
// double and rounded back.
struct PointCloud {
  PointMatrix points;                 // n x 3, meters
  std::vector<int32_t> ids;           // empty or size n
  PointMatrix normals;                // empty or n x 3, unit

  int64_t size() const { return points.rows(); }
  bool has_ids() const { return !ids.empty(); }
  bool has_normals() const { return normals.rows() == points.rows() && points.rows() > 0; }

  Eigen::Vector3d point(int64_t i) const { return points.row(i).cast<double>().transpose(); }
  Eigen::Vector3d normal(int64_t i) const { return normals.row(i).cast<double>().transpose(); }

  Eigen::Vector3d centroid() const;
  double bbox_diagonal() const;

  PointCloud transformed(const RigidTransform& t) const;
  PointCloud subset(const std::vector<int64_t>& indices) const;

  bool operator==(const PointCloud& o) const;
};

}  // namespace galign
