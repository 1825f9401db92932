#include "galign/point_cloud.hpp"

#include "galign/error.hpp"

namespace galign {

Eigen::Vector3d PointCloud::centroid() const {
  check(size() > 0, ErrorKind::Domain, "centroid of empty cloud");
  Eigen::Vector3d c = Eigen::Vector3d::Zero();
  for (int64_t i = 0; i < size(); ++i) c += point(i);
  return c / double(size());
}

double PointCloud::bbox_diagonal() const {
  check(size() > 0, ErrorKind::Domain, "bbox of empty cloud");
  Eigen::Vector3f lo = points.colwise().minCoeff();
  Eigen::Vector3f hi = points.colwise().maxCoeff();
  return (hi - lo).cast<double>().norm();
}

PointCloud PointCloud::transformed(const RigidTransform& t) const {
  PointCloud out;
  out.points.resize(size(), 3);
  for (int64_t i = 0; i < size(); ++i)
    out.points.row(i) = t.apply(point(i)).cast<float>().transpose();
  out.ids = ids;
  if (has_normals()) {
    out.normals.resize(size(), 3);
    for (int64_t i = 0; i < size(); ++i)
      out.normals.row(i) = t.apply_dir(normal(i)).cast<float>().transpose();
  }
  return out;
}

PointCloud PointCloud::subset(const std::vector<int64_t>& indices) const {
  PointCloud out;
  out.points.resize(int64_t(indices.size()), 3);
  if (has_normals()) out.normals.resize(int64_t(indices.size()), 3);
  if (has_ids()) out.ids.reserve(indices.size());
  for (size_t j = 0; j < indices.size(); ++j) {
    int64_t i = indices[j];
    check(i >= 0 && i < size(), ErrorKind::Domain, "subset index out of range");
    out.points.row(int64_t(j)) = points.row(i);
    if (has_normals()) out.normals.row(int64_t(j)) = normals.row(i);
    if (has_ids()) out.ids.push_back(ids[size_t(i)]);
  }
  return out;
}

bool PointCloud::operator==(const PointCloud& o) const {
  if (size() != o.size() || ids != o.ids || has_normals() != o.has_normals()) return false;
  if (size() > 0 && points != o.points) return false;
  if (has_normals() && normals != o.normals) return false;
  return true;
}

}  // namespace galign
