#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace overlapreg {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Ordered list of 3-D points. Ordering is meaningful: masks and
/// correspondences index into it.
struct PointCloud {
  std::vector<Vec3> points;

  PointCloud() = default;
  explicit PointCloud(std::vector<Vec3> pts) : points(std::move(pts)) {}

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  const Vec3& operator[](std::size_t i) const { return points[i]; }
  Vec3& operator[](std::size_t i) { return points[i]; }

  Vec3 centroid() const {
    Vec3 c = Vec3::Zero();
    for (const auto& p : points) c += p;
    return points.empty() ? c : Vec3(c / static_cast<double>(points.size()));
  }

  /// N x 3 row-major copy, one point per row.
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> to_matrix() const {
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> m(points.size(), 3);
    for (std::size_t i = 0; i < points.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = points[i].transpose();
    return m;
  }

  bool operator==(const PointCloud& o) const {
    if (points.size() != o.points.size()) return false;
    for (std::size_t i = 0; i < points.size(); ++i)
      if (points[i] != o.points[i]) return false;
    return true;
  }
};

inline double deg2rad(double d) { return d * std::numbers::pi / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / std::numbers::pi; }

/// Rotation quaternion (w, x, y, z). normalize() canonicalizes the sign to w >= 0.
struct Quaternion {
  double w = 1.0, x = 0.0, y = 0.0, z = 0.0;

  static Quaternion identity() { return {}; }

  double squared_norm() const { return w * w + x * x + y * y + z * z; }
  double norm() const { return std::sqrt(squared_norm()); }

  Quaternion normalized() const {
    const double n = norm();
    if (!(n > 0.0) || !std::isfinite(n)) throw std::invalid_argument("cannot normalize a zero or non-finite quaternion");
    Quaternion q{w / n, x / n, y / n, z / n};
    if (q.w < 0.0) q = -q;
    return q;
  }

  bool is_unit(double tol = 1e-6) const { return std::abs(squared_norm() - 1.0) <= tol; }

  Quaternion operator-() const { return {-w, -x, -y, -z}; }

  /// Hamilton product; (a * b) rotates by b first, then a.
  Quaternion operator*(const Quaternion& b) const {
    return {w * b.w - x * b.x - y * b.y - z * b.z,
            w * b.x + x * b.w + y * b.z - z * b.y,
            w * b.y - x * b.z + y * b.w + z * b.x,
            w * b.z + x * b.y - y * b.x + z * b.w};
  }

  Quaternion conjugate() const { return {w, -x, -y, -z}; }
  double dot(const Quaternion& o) const { return w * o.w + x * o.x + y * o.y + z * o.z; }
  std::array<double, 4> as_array() const { return {w, x, y, z}; }

  static Quaternion from_axis_angle(const Vec3& axis, double angle_rad) {
    const Vec3 a = axis.normalized();
    const double s = std::sin(angle_rad / 2.0);
    return Quaternion{std::cos(angle_rad / 2.0), a.x() * s, a.y() * s, a.z() * s}.normalized();
  }

  bool operator==(const Quaternion&) const = default;
};

inline Mat3 quat_to_rotmat(const Quaternion& q) {
  if (!q.is_unit(1e-6)) throw std::invalid_argument("quat_to_rotmat: quaternion is not normalized (|q|^2 = " + std::to_string(q.squared_norm()) + ")");
  const double w = q.w, x = q.x, y = q.y, z = q.z;
  Mat3 r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

/// Shepperd's method; result canonicalized to w >= 0.
inline Quaternion rotmat_to_quat(const Mat3& r) {
  const double tr = r.trace();
  Quaternion q;
  if (tr > 0.0) {
    const double s = std::sqrt(tr + 1.0) * 2.0;
    q = {0.25 * s, (r(2, 1) - r(1, 2)) / s, (r(0, 2) - r(2, 0)) / s, (r(1, 0) - r(0, 1)) / s};
  } else if (r(0, 0) > r(1, 1) && r(0, 0) > r(2, 2)) {
    const double s = std::sqrt(1.0 + r(0, 0) - r(1, 1) - r(2, 2)) * 2.0;
    q = {(r(2, 1) - r(1, 2)) / s, 0.25 * s, (r(0, 1) + r(1, 0)) / s, (r(0, 2) + r(2, 0)) / s};
  } else if (r(1, 1) > r(2, 2)) {
    const double s = std::sqrt(1.0 + r(1, 1) - r(0, 0) - r(2, 2)) * 2.0;
    q = {(r(0, 2) - r(2, 0)) / s, (r(0, 1) + r(1, 0)) / s, 0.25 * s, (r(1, 2) + r(2, 1)) / s};
  } else {
    const double s = std::sqrt(1.0 + r(2, 2) - r(0, 0) - r(1, 1)) * 2.0;
    q = {(r(1, 0) - r(0, 1)) / s, (r(0, 2) + r(2, 0)) / s, (r(1, 2) + r(2, 1)) / s, 0.25 * s};
  }
  return q.normalized();
}

/// Intrinsic Z-Y-X Euler angles (radians): R = Rz(yaw) * Ry(pitch) * Rx(roll).
struct EulerZYX {
  double yaw = 0.0, pitch = 0.0, roll = 0.0;
};

inline Mat3 euler_zyx_to_rotmat(const EulerZYX& e) {
  return (Eigen::AngleAxisd(e.yaw, Vec3::UnitZ()) * Eigen::AngleAxisd(e.pitch, Vec3::UnitY()) *
          Eigen::AngleAxisd(e.roll, Vec3::UnitX()))
      .toRotationMatrix();
}

inline EulerZYX rotmat_to_euler_zyx(const Mat3& r) {
  EulerZYX e;
  e.pitch = std::asin(std::clamp(-r(2, 0), -1.0, 1.0));
  e.yaw = std::atan2(r(1, 0), r(0, 0));
  e.roll = std::atan2(r(2, 1), r(2, 2));
  return e;
}

/// Rigid transform p -> R(q) p + t.
struct RigidTransform {
  Quaternion rotation;
  Vec3 translation = Vec3::Zero();

  static RigidTransform identity() { return {}; }

  RigidTransform() = default;
  RigidTransform(const Quaternion& q, const Vec3& t) : rotation(q.normalized()), translation(t) {}
  RigidTransform(const Mat3& r, const Vec3& t) : rotation(rotmat_to_quat(r)), translation(t) {}

  Mat3 rotation_matrix() const { return quat_to_rotmat(rotation); }

  Vec3 apply(const Vec3& p) const { return rotation_matrix() * p + translation; }

  bool operator==(const RigidTransform& o) const { return rotation == o.rotation && translation == o.translation; }
};

/// Result applies b first, then a.
inline RigidTransform compose(const RigidTransform& a, const RigidTransform& b) {
  RigidTransform out;
  out.rotation = (a.rotation * b.rotation).normalized();
  out.translation = a.rotation_matrix() * b.translation + a.translation;
  return out;
}

inline RigidTransform inverse(const RigidTransform& t) {
  RigidTransform out;
  out.rotation = t.rotation.conjugate().normalized();
  out.translation = -(out.rotation_matrix() * t.translation);
  return out;
}

inline PointCloud apply(const RigidTransform& t, const PointCloud& cloud) {
  const Mat3 r = t.rotation_matrix();
  PointCloud out;
  out.points.reserve(cloud.size());
  for (const auto& p : cloud.points) out.points.emplace_back(r * p + t.translation);
  return out;
}

/// Angle of R_a^T R_b in degrees, in [0, 180]. Same value as
/// acos((trace - 1) / 2) but evaluated through atan2, which keeps full
/// precision near 0 and 180 degrees.
inline double rotation_angle_between(const Mat3& ra, const Mat3& rb) {
  const Mat3 r = ra.transpose() * rb;
  const double c = std::clamp((r.trace() - 1.0) / 2.0, -1.0, 1.0);
  const double s = 0.5 * Vec3(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1)).norm();
  return std::clamp(rad2deg(std::atan2(s, c)), 0.0, 180.0);
}

struct IsotropicError {
  double rot_deg = 0.0;
  double trans = 0.0;
};

inline IsotropicError isotropic_errors(const RigidTransform& pred, const RigidTransform& gt) {
  return {rotation_angle_between(gt.rotation_matrix(), pred.rotation_matrix()), (gt.translation - pred.translation).norm()};
}

struct ErrorReport {
  double rmse_rot = 0.0;  ///< degrees
  double mae_rot = 0.0;   ///< degrees
  double rmse_trans = 0.0;
  double mae_trans = 0.0;
  double iso_rot = 0.0;  ///< mean isotropic rotation error, degrees
  double iso_trans = 0.0;
  std::size_t count = 0;
};

/// Wraps an angle difference in degrees into (-180, 180].
inline double wrap_degrees(double d) {
  d = std::fmod(d, 360.0);
  if (d > 180.0) d -= 360.0;
  if (d <= -180.0) d += 360.0;
  return d;
}

/// Per-axis residuals of ZYX Euler angles (degrees) and translations; RMSE and
/// MAE aggregate over every (pair, axis) entry.
inline ErrorReport anisotropic_errors(std::span<const RigidTransform> preds, std::span<const RigidTransform> gts) {
  if (preds.empty()) throw std::invalid_argument("anisotropic_errors: empty transform lists");
  if (preds.size() != gts.size())
    throw std::invalid_argument("anisotropic_errors: list sizes differ (" + std::to_string(preds.size()) + " vs " + std::to_string(gts.size()) + ")");
  double sq_rot = 0.0, abs_rot = 0.0, sq_t = 0.0, abs_t = 0.0, iso_r = 0.0, iso_t = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const EulerZYX ep = rotmat_to_euler_zyx(preds[i].rotation_matrix());
    const EulerZYX eg = rotmat_to_euler_zyx(gts[i].rotation_matrix());
    const std::array<double, 3> dr{wrap_degrees(rad2deg(ep.yaw - eg.yaw)), wrap_degrees(rad2deg(ep.pitch - eg.pitch)),
                                   wrap_degrees(rad2deg(ep.roll - eg.roll))};
    const Vec3 dt = preds[i].translation - gts[i].translation;
    for (int a = 0; a < 3; ++a) {
      sq_rot += dr[a] * dr[a];
      abs_rot += std::abs(dr[a]);
      sq_t += dt[a] * dt[a];
      abs_t += std::abs(dt[a]);
    }
    const IsotropicError iso = isotropic_errors(preds[i], gts[i]);
    iso_r += iso.rot_deg;
    iso_t += iso.trans;
  }
  const double entries = 3.0 * static_cast<double>(preds.size());
  const double n = static_cast<double>(preds.size());
  ErrorReport rep;
  rep.rmse_rot = std::sqrt(sq_rot / entries);
  rep.mae_rot = abs_rot / entries;
  rep.rmse_trans = std::sqrt(sq_t / entries);
  rep.mae_trans = abs_t / entries;
  rep.iso_rot = iso_r / n;
  rep.iso_trans = iso_t / n;
  rep.count = preds.size();
  return rep;
}

}  // namespace overlapreg
