#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "geometry.hpp"

namespace overlapreg {

inline double squared_distance(const Vec3& a, const Vec3& b) {
  const double dx = a.x() - b.x(), dy = a.y() - b.y(), dz = a.z() - b.z();
  return dx * dx + dy * dy + dz * dz;
}

/// Static 3-D k-d tree over a borrowed point set. Exact nearest neighbour;
/// among equidistant points the lowest index wins.
class KdTree {
public:
  explicit KdTree(const std::vector<Vec3>& points) : points_(&points) {
    if (points.empty()) throw std::invalid_argument("KdTree: empty target cloud");
    order_.resize(points.size());
    std::iota(order_.begin(), order_.end(), std::uint32_t{0});
    nodes_.reserve(2 * points.size() / kLeafSize + 2);
    root_ = build(0, order_.size(), 0);
  }

  struct Hit {
    std::size_t index = 0;
    double sq_dist = std::numeric_limits<double>::infinity();
  };

  Hit nearest(const Vec3& q) const {
    Hit best;
    search(root_, q, best);
    return best;
  }

private:
  static constexpr std::size_t kLeafSize = 8;

  struct Node {
    std::uint32_t begin = 0, end = 0;  // leaf range into order_
    std::int32_t left = -1, right = -1;
    int axis = -1;  // -1 marks a leaf
    double split = 0.0;
  };

  std::int32_t build(std::size_t begin, std::size_t end, int depth) {
    Node node;
    node.begin = static_cast<std::uint32_t>(begin);
    node.end = static_cast<std::uint32_t>(end);
    if (end - begin <= kLeafSize) {
      nodes_.push_back(node);
      return static_cast<std::int32_t>(nodes_.size() - 1);
    }
    // split along the widest extent
    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
    Vec3 hi = -lo;
    for (std::size_t i = begin; i < end; ++i) {
      lo = lo.cwiseMin((*points_)[order_[i]]);
      hi = hi.cwiseMax((*points_)[order_[i]]);
    }
    int axis = 0;
    (hi - lo).maxCoeff(&axis);
    const std::size_t mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + static_cast<std::ptrdiff_t>(begin), order_.begin() + static_cast<std::ptrdiff_t>(mid),
                     order_.begin() + static_cast<std::ptrdiff_t>(end),
                     [&](std::uint32_t a, std::uint32_t b) { return (*points_)[a][axis] < (*points_)[b][axis]; });
    node.axis = axis;
    node.split = (*points_)[order_[mid]][axis];
    const auto self = static_cast<std::int32_t>(nodes_.size());
    nodes_.push_back(node);
    const std::int32_t l = build(begin, mid, depth + 1);
    const std::int32_t r = build(mid, end, depth + 1);
    nodes_[static_cast<std::size_t>(self)].left = l;
    nodes_[static_cast<std::size_t>(self)].right = r;
    return self;
  }

  void search(std::int32_t id, const Vec3& q, Hit& best) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.axis < 0) {
      for (std::uint32_t i = n.begin; i < n.end; ++i) {
        const std::size_t idx = order_[i];
        const double d = squared_distance(q, (*points_)[idx]);
        if (d < best.sq_dist || (d == best.sq_dist && idx < best.index)) best = {idx, d};
      }
      return;
    }
    const double diff = q[n.axis] - n.split;
    const std::int32_t near = diff < 0.0 ? n.left : n.right;
    const std::int32_t far = diff < 0.0 ? n.right : n.left;
    search(near, q, best);
    // <= keeps equidistant candidates on the far side reachable for tie-breaking
    if (diff * diff <= best.sq_dist) search(far, q, best);
  }

  const std::vector<Vec3>* points_;
  std::vector<std::uint32_t> order_;
  std::vector<Node> nodes_;
  std::int32_t root_ = -1;
};

struct NeighborResult {
  std::vector<std::size_t> indices;
  std::vector<double> distances;
};

inline NeighborResult nearest_neighbors(const PointCloud& query, const PointCloud& target) {
  if (target.empty()) throw std::invalid_argument("nearest_neighbors: empty target cloud");
  const KdTree tree(target.points);
  NeighborResult out;
  out.indices.resize(query.size());
  out.distances.resize(query.size());
  for (std::size_t i = 0; i < query.size(); ++i) {
    const auto hit = tree.nearest(query[i]);
    out.indices[i] = hit.index;
    out.distances[i] = std::sqrt(hit.sq_dist);
  }
  return out;
}

}  // namespace overlapreg
