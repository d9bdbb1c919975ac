#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "graphsc/error.hpp"

namespace graphsc {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Ordered set of 3D points in meters.
struct PointCloud {
  std::vector<Vec3> points;

  std::size_t size() const noexcept { return points.size(); }
  bool empty() const noexcept { return points.empty(); }
  const Vec3& operator[](std::size_t i) const { return points[i]; }
  std::span<const Vec3> view() const noexcept { return points; }
};

inline bool is_finite(const Vec3& p) { return p.allFinite(); }

/// Nearest single-precision value. The volatile store keeps GCC 11 at -O3
/// from folding a vectorized double->float->double pair into a no-op.
inline double round_to_float(double v) {
  volatile float f = static_cast<float>(v);
  return f;
}

/// Throws if any coordinate is NaN or infinite.
inline void validate_finite(std::span<const Vec3> pts, const std::string& what) {
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (!is_finite(pts[i])) {
      fail_validation(what + ": non-finite coordinate at point " + std::to_string(i));
    }
  }
}

struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
  RigidTransform inverse() const { return {rotation.transpose(), -(rotation.transpose() * translation)}; }
  RigidTransform operator*(const RigidTransform& rhs) const {
    return {rotation * rhs.rotation, rotation * rhs.translation + translation};
  }
  static RigidTransform identity() { return {}; }
};

/// Cross-product matrix: skew(v) * w == v.cross(w).
inline Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0.0, -v.z(), v.y(),
       v.z(), 0.0, -v.x(),
       -v.y(), v.x(), 0.0;
  return m;
}

/// Rodrigues exponential map from an axis-angle vector (radians) to a rotation.
inline Mat3 exp_so3(const Vec3& omega) {
  const double theta_sq = omega.squaredNorm();
  const double theta = std::sqrt(theta_sq);
  double a;  // sin(t)/t
  double b;  // (1 - cos(t))/t^2
  if (theta < 1e-8) {
    a = 1.0 - theta_sq / 6.0;
    b = 0.5 - theta_sq / 24.0;
  } else {
    a = std::sin(theta) / theta;
    b = (1.0 - std::cos(theta)) / theta_sq;
  }
  const Mat3 k = skew(omega);
  return Mat3::Identity() + a * k + b * (k * k);
}

/// Inverse of exp_so3, returning the axis-angle vector with angle in [0, pi].
inline Vec3 log_so3(const Mat3& r) {
  const Eigen::AngleAxisd aa(r);
  return aa.angle() * aa.axis();
}

/// Closest rotation in the Frobenius sense (polar factor), det forced to +1.
inline Mat3 nearest_rotation(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 u = svd.matrixU();
  const Mat3 v = svd.matrixV();
  if ((u * v.transpose()).determinant() < 0.0) u.col(2) *= -1.0;
  return u * v.transpose();
}

/// Furthest point sampling. Starts at `start_index` and keeps adding the point
/// farthest from the selected set until every point lies within `coverage` of
/// some selected point. Ties go to the lowest index.
inline std::vector<std::size_t> furthest_point_sample(std::span<const Vec3> pts, double coverage,
                                                      std::size_t start_index = 0) {
  if (pts.empty()) fail_validation("furthest_point_sample: empty cloud");
  if (!(coverage > 0.0)) fail_validation("furthest_point_sample: coverage must be positive");
  if (start_index >= pts.size()) fail_validation("furthest_point_sample: start index out of range");

  std::vector<std::size_t> selected{start_index};
  std::vector<double> nearest(pts.size(), std::numeric_limits<double>::infinity());
  std::size_t latest = start_index;
  while (true) {
    std::size_t far_index = 0;
    double far_dist = -1.0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      nearest[i] = std::min(nearest[i], (pts[i] - pts[latest]).norm());
      if (nearest[i] > far_dist) {
        far_dist = nearest[i];
        far_index = i;
      }
    }
    if (far_dist <= coverage) break;
    selected.push_back(far_index);
    latest = far_index;
  }
  return selected;
}

struct Neighbor {
  std::size_t index;
  double distance;
};

/// Exhaustive k-nearest-neighbour query, ascending by distance, ties by index.
inline std::vector<Neighbor> knn(const Vec3& query, std::span<const Vec3> pts, std::size_t k) {
  if (k == 0) fail_validation("knn: k must be at least 1");
  if (k > pts.size()) fail_validation("knn: insufficient points");

  struct Candidate {
    double sq;
    std::size_t index;
    bool operator<(const Candidate& o) const { return sq < o.sq || (sq == o.sq && index < o.index); }
  };
  std::vector<Candidate> all(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) all[i] = {(pts[i] - query).squaredNorm(), i};
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end());

  std::vector<Neighbor> out(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = {all[i].index, std::sqrt(all[i].sq)};
  return out;
}

struct BoundingBox {
  Vec3 lo;
  Vec3 hi;
};

inline BoundingBox bounding_box(std::span<const Vec3> pts) {
  if (pts.empty()) fail_validation("bounding_box: empty cloud");
  BoundingBox box{pts[0], pts[0]};
  for (const Vec3& p : pts) {
    box.lo = box.lo.cwiseMin(p);
    box.hi = box.hi.cwiseMax(p);
  }
  return box;
}

inline Vec3 centroid(std::span<const Vec3> pts) {
  if (pts.empty()) fail_validation("centroid: empty cloud");
  Vec3 c = Vec3::Zero();
  for (const Vec3& p : pts) c += p;
  return c / static_cast<double>(pts.size());
}

}  // namespace graphsc
