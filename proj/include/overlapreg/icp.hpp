#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/SVD>

#include "geometry.hpp"
#include "kdtree.hpp"

namespace overlapreg {

/// Least-squares rigid transform taking src[i] onto dst[i] (Kabsch), with the
/// reflection case corrected to a proper rotation.
inline RigidTransform svd_align(const PointCloud& src, const PointCloud& dst) {
  if (src.size() != dst.size())
    throw std::invalid_argument("svd_align: point counts differ (" + std::to_string(src.size()) + " vs " + std::to_string(dst.size()) + ")");
  if (src.size() < 3) throw std::invalid_argument("svd_align: need at least 3 correspondences, got " + std::to_string(src.size()));
  const Vec3 cs = src.centroid(), cd = dst.centroid();
  Mat3 h = Mat3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) h += (src[i] - cs) * (dst[i] - cd).transpose();
  Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 s = svd.singularValues();
  // rank < 2 leaves the rotation about the degenerate axis unconstrained
  if (!(s(0) > 0.0) || s(1) <= 1e-12 * s(0))
    throw std::runtime_error("svd_align: rank-deficient cross-covariance (points coincident or collinear)");
  const Mat3 u = svd.matrixU(), v = svd.matrixV();
  Mat3 d = Mat3::Identity();
  if ((v * u.transpose()).determinant() < 0.0) d(2, 2) = -1.0;
  const Mat3 r = v * d * u.transpose();
  return RigidTransform(r, cd - r * cs);
}

struct IcpConfig {
  std::size_t max_iterations = 50;
  double convergence_eps = 1e-6;
  std::optional<double> max_correspondence_dist;
  std::optional<double> trim_fraction;  ///< keep this fraction of closest correspondences

  void validate() const {
    if (max_iterations < 1) throw std::invalid_argument("IcpConfig: max_iterations must be >= 1");
    if (!(convergence_eps > 0.0)) throw std::invalid_argument("IcpConfig: convergence_eps must be positive");
    if (max_correspondence_dist && !(*max_correspondence_dist > 0.0)) throw std::invalid_argument("IcpConfig: max_correspondence_dist must be positive");
    if (trim_fraction && !(*trim_fraction > 0.0 && *trim_fraction <= 1.0)) throw std::invalid_argument("IcpConfig: trim_fraction must lie in (0, 1]");
  }
};

struct IcpResult {
  RigidTransform transform;
  std::vector<double> residual_history;  ///< RMS correspondence distance; entry 0 is at `init`
  std::size_t iterations = 0;            ///< alignment steps taken
  bool converged = false;
  bool degenerate = false;
  std::string degeneracy;
};

namespace detail {
struct Correspondences {
  PointCloud src, dst;
  double rms = 0.0;
};

inline Correspondences correspond(const PointCloud& moved, const PointCloud& dst, const KdTree& tree, const IcpConfig& cfg) {
  std::vector<std::pair<double, std::size_t>> hits;  // (sq_dist, src index) -> dst index kept alongside
  std::vector<std::size_t> nn(moved.size());
  hits.reserve(moved.size());
  for (std::size_t i = 0; i < moved.size(); ++i) {
    const auto h = tree.nearest(moved[i]);
    nn[i] = h.index;
    if (cfg.max_correspondence_dist && h.sq_dist > *cfg.max_correspondence_dist * *cfg.max_correspondence_dist) continue;
    hits.push_back({h.sq_dist, i});
  }
  if (cfg.trim_fraction && !hits.empty()) {
    const auto keep = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(*cfg.trim_fraction * static_cast<double>(hits.size()))));
    std::stable_sort(hits.begin(), hits.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    hits.resize(keep);
    std::sort(hits.begin(), hits.end(), [](const auto& a, const auto& b) { return a.second < b.second; });
  }
  Correspondences c;
  double sq = 0.0;
  for (const auto& [d2, i] : hits) {
    c.src.points.push_back(moved[i]);
    c.dst.points.push_back(dst[nn[i]]);
    sq += d2;
  }
  c.rms = hits.empty() ? std::numeric_limits<double>::infinity() : std::sqrt(sq / static_cast<double>(hits.size()));
  return c;
}
}  // namespace detail

/// Point-to-point ICP from `init`. Stops when the RMS residual changes by less
/// than convergence_eps or after max_iterations alignment steps. A degenerate
/// step keeps the last valid transform and raises the flag.
inline IcpResult icp_register(const PointCloud& src, const PointCloud& dst, const RigidTransform& init = RigidTransform::identity(),
                              const IcpConfig& cfg = {}) {
  cfg.validate();
  if (src.empty() || dst.empty()) throw std::invalid_argument("icp_register: empty input cloud");
  const KdTree tree(dst.points);
  IcpResult res;
  res.transform = init;
  auto corr = detail::correspond(apply(init, src), dst, tree, cfg);
  res.residual_history.push_back(corr.rms);
  for (std::size_t k = 1; k <= cfg.max_iterations; ++k) {
    RigidTransform delta;
    try {
      delta = svd_align(corr.src, corr.dst);
    } catch (const std::exception& e) {
      res.degenerate = true;
      res.degeneracy = e.what();
      break;
    }
    res.transform = compose(delta, res.transform);
    res.iterations = k;
    corr = detail::correspond(apply(res.transform, src), dst, tree, cfg);
    const double prev = res.residual_history.back();
    res.residual_history.push_back(corr.rms);
    if (std::abs(prev - corr.rms) < cfg.convergence_eps) {
      res.converged = true;
      break;
    }
  }
  return res;
}

}  // namespace overlapreg
