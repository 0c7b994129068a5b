#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <numbers>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "geometry.hpp"
#include "kdtree.hpp"
#include "ply.hpp"
#include "random.hpp"

namespace overlapreg {

using BinaryMask = std::vector<std::uint8_t>;

inline std::size_t count_ones(const BinaryMask& m) {
  return static_cast<std::size_t>(std::count(m.begin(), m.end(), std::uint8_t{1}));
}

// ---------------------------------------------------------------------------
// Shapes
// ---------------------------------------------------------------------------

enum class ShapeKind { sphere, box, cylinder, torus, composite, ply_file };

/// Parametric surface. Dimensions:
///   sphere   {radius}
///   box      {size_x, size_y, size_z}   (full edge lengths)
///   cylinder {radius, height}           (lateral surface plus both caps, axis z)
///   torus    {major_radius, minor_radius} (axis z)
struct ShapeSpec {
  ShapeKind kind = ShapeKind::sphere;
  std::vector<double> params{1.0};
  bool symmetric = true;  ///< surface is invariant under rotation about some axis
  std::vector<ShapeSpec> children;           ///< composite only
  std::vector<RigidTransform> child_poses;   ///< composite only, one per child
  std::string path;                          ///< ply_file only
  std::shared_ptr<const PointCloud> vertices;  ///< ply_file only

  static ShapeSpec sphere(double r) { return {ShapeKind::sphere, {r}, true, {}, {}, {}, {}}; }
  static ShapeSpec box(double sx, double sy, double sz) { return {ShapeKind::box, {sx, sy, sz}, false, {}, {}, {}, {}}; }
  static ShapeSpec cylinder(double r, double h) { return {ShapeKind::cylinder, {r, h}, true, {}, {}, {}, {}}; }
  static ShapeSpec torus(double major, double minor) { return {ShapeKind::torus, {major, minor}, true, {}, {}, {}, {}}; }

  static ShapeSpec composite(std::vector<ShapeSpec> parts, std::vector<RigidTransform> poses, bool symmetric = false) {
    ShapeSpec s;
    s.kind = ShapeKind::composite;
    s.params.clear();
    s.symmetric = symmetric;
    s.children = std::move(parts);
    s.child_poses = std::move(poses);
    return s;
  }

  static ShapeSpec ply(const std::filesystem::path& file) {
    ShapeSpec s;
    s.kind = ShapeKind::ply_file;
    s.params.clear();
    s.symmetric = false;
    s.path = file.string();
    s.vertices = std::make_shared<const PointCloud>(ply::read(file));
    return s;
  }

  void validate() const {
    auto need = [&](std::size_t k, const char* name) {
      if (params.size() != k) throw std::invalid_argument(std::string("ShapeSpec(") + name + "): expected " + std::to_string(k) + " parameters");
      for (double p : params)
        if (!(p > 0.0) || !std::isfinite(p)) throw std::invalid_argument(std::string("ShapeSpec(") + name + "): parameters must be strictly positive");
    };
    switch (kind) {
      case ShapeKind::sphere: need(1, "sphere"); break;
      case ShapeKind::box: need(3, "box"); break;
      case ShapeKind::cylinder: need(2, "cylinder"); break;
      case ShapeKind::torus: need(2, "torus"); break;
      case ShapeKind::composite:
        if (children.empty()) throw std::invalid_argument("ShapeSpec(composite): needs at least one child");
        if (child_poses.size() != children.size()) throw std::invalid_argument("ShapeSpec(composite): one pose per child required");
        for (const auto& c : children) c.validate();
        break;
      case ShapeKind::ply_file:
        if (!vertices || vertices->empty()) throw std::invalid_argument("ShapeSpec(ply): no vertices in " + path);
        break;
    }
  }
};

inline double surface_area(const ShapeSpec& s) {
  constexpr double pi = std::numbers::pi;
  switch (s.kind) {
    case ShapeKind::sphere: return 4.0 * pi * s.params[0] * s.params[0];
    case ShapeKind::box: {
      const double a = s.params[0], b = s.params[1], c = s.params[2];
      return 2.0 * (a * b + b * c + a * c);
    }
    case ShapeKind::cylinder: return 2.0 * pi * s.params[0] * s.params[1] + 2.0 * pi * s.params[0] * s.params[0];
    case ShapeKind::torus: return 4.0 * pi * pi * s.params[0] * s.params[1];
    case ShapeKind::composite: {
      double a = 0.0;
      for (const auto& c : s.children) a += surface_area(c);
      return a;
    }
    case ShapeKind::ply_file: return static_cast<double>(s.vertices ? s.vertices->size() : 0);
  }
  return 0.0;
}

namespace detail {

inline Vec3 sample_unit_sphere(Rng& rng) {
  for (;;) {
    Vec3 v(standard_normal(rng), standard_normal(rng), standard_normal(rng));
    const double n = v.norm();
    if (n > 1e-12) return v / n;
  }
}

inline Vec3 sample_point(const ShapeSpec& s, Rng& rng) {
  constexpr double pi = std::numbers::pi;
  switch (s.kind) {
    case ShapeKind::sphere: return s.params[0] * sample_unit_sphere(rng);
    case ShapeKind::box: {
      const double a = s.params[0], b = s.params[1], c = s.params[2];
      const double areas[3] = {b * c, a * c, a * b};  // faces normal to x, y, z
      double u = uniform(rng, 0.0, areas[0] + areas[1] + areas[2]);
      int axis = 0;
      while (axis < 2 && u >= areas[axis]) u -= areas[axis++];
      const double sign = uniform(rng) < 0.5 ? -1.0 : 1.0;
      Vec3 half(a / 2, b / 2, c / 2);
      Vec3 p(uniform(rng, -half.x(), half.x()), uniform(rng, -half.y(), half.y()), uniform(rng, -half.z(), half.z()));
      p[axis] = sign * half[axis];
      return p;
    }
    case ShapeKind::cylinder: {
      const double r = s.params[0], h = s.params[1];
      const double lateral = 2.0 * pi * r * h, cap = pi * r * r;
      const double u = uniform(rng, 0.0, lateral + 2.0 * cap);
      if (u < lateral) {
        const double th = uniform(rng, 0.0, 2.0 * pi);
        return {r * std::cos(th), r * std::sin(th), uniform(rng, -h / 2, h / 2)};
      }
      const double rr = r * std::sqrt(uniform(rng));
      const double th = uniform(rng, 0.0, 2.0 * pi);
      return {rr * std::cos(th), rr * std::sin(th), u < lateral + cap ? h / 2 : -h / 2};
    }
    case ShapeKind::torus: {
      // area element is proportional to (R + r cos v); rejection on v
      const double big = s.params[0], small = s.params[1];
      for (;;) {
        const double u = uniform(rng, 0.0, 2.0 * pi), v = uniform(rng, 0.0, 2.0 * pi);
        if (uniform(rng, 0.0, big + small) <= big + small * std::cos(v))
          return {(big + small * std::cos(v)) * std::cos(u), (big + small * std::cos(v)) * std::sin(u), small * std::sin(v)};
      }
    }
    case ShapeKind::composite: {
      double u = uniform(rng, 0.0, surface_area(s));
      std::size_t k = 0;
      for (; k + 1 < s.children.size(); ++k) {
        const double a = surface_area(s.children[k]);
        if (u < a) break;
        u -= a;
      }
      return s.child_poses[k].apply(sample_point(s.children[k], rng));
    }
    case ShapeKind::ply_file: return (*s.vertices)[uniform_index(rng, s.vertices->size())];
  }
  return Vec3::Zero();
}

}  // namespace detail

/// Surface samples in the shape's own frame (no normalization).
inline PointCloud sample_surface_raw(const ShapeSpec& spec, std::size_t n, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("sample_surface: n must be >= 1");
  spec.validate();
  if (!(surface_area(spec) > 0.0)) throw std::invalid_argument("sample_surface: degenerate (zero-area) shape");
  Rng rng = make_rng(seed);
  PointCloud out;
  out.points.reserve(n);
  if (spec.kind == ShapeKind::ply_file && n <= spec.vertices->size()) {
    // vertex subset without replacement (partial Fisher-Yates)
    std::vector<std::size_t> idx(spec.vertices->size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < n; ++i) std::swap(idx[i], idx[i + uniform_index(rng, idx.size() - i)]);
    for (std::size_t i = 0; i < n; ++i) out.points.push_back((*spec.vertices)[idx[i]]);
    return out;
  }
  for (std::size_t i = 0; i < n; ++i) out.points.push_back(detail::sample_point(spec, rng));
  return out;
}

/// Centering and scaling that maps a reference cloud into the unit sphere.
struct Normalization {
  Vec3 center = Vec3::Zero();
  double scale = 1.0;

  static Normalization fit(const PointCloud& ref) {
    Normalization n;
    n.center = ref.centroid();
    double r = 0.0;
    for (const auto& p : ref.points) r = std::max(r, (p - n.center).norm());
    if (!(r > 0.0)) throw std::invalid_argument("Normalization: cloud has zero extent");
    n.scale = 1.0 / r;
    return n;
  }

  PointCloud apply(const PointCloud& c) const {
    PointCloud out;
    out.points.reserve(c.size());
    for (const auto& p : c.points) out.points.emplace_back((p - center) * scale);
    return out;
  }
};

/// n area-uniform samples, centered at their centroid and scaled into the unit sphere.
inline PointCloud sample_surface(const ShapeSpec& spec, std::size_t n, std::uint64_t seed) {
  PointCloud raw = sample_surface_raw(spec, n, seed);
  return Normalization::fit(raw).apply(raw);
}

/// Random asymmetric composite of two or three boxes/cylinders/spheres.
/// Used as the synthetic stand-in for a CAD model collection.
inline ShapeSpec random_shape(std::uint64_t seed) {
  Rng rng = make_rng(derive_seed(seed, {0x5A}));
  const int parts = 2 + static_cast<int>(uniform_index(rng, 2));
  std::vector<ShapeSpec> kids;
  std::vector<RigidTransform> poses;
  for (int i = 0; i < parts; ++i) {
    const auto kind = uniform_index(rng, 3);
    if (kind == 0 || i == 0)
      kids.push_back(ShapeSpec::box(uniform(rng, 0.3, 1.2), uniform(rng, 0.3, 1.2), uniform(rng, 0.2, 0.8)));
    else if (kind == 1)
      kids.push_back(ShapeSpec::cylinder(uniform(rng, 0.1, 0.35), uniform(rng, 0.4, 1.2)));
    else
      kids.push_back(ShapeSpec::sphere(uniform(rng, 0.15, 0.35)));
    if (i == 0) {
      poses.push_back(RigidTransform::identity());
    } else {
      const Quaternion q = Quaternion::from_axis_angle(detail::sample_unit_sphere(rng), uniform(rng, 0.0, std::numbers::pi));
      const Vec3 t(uniform(rng, -0.6, 0.6), uniform(rng, -0.6, 0.6), uniform(rng, -0.4, 0.4));
      poses.emplace_back(q, t);
    }
  }
  return ShapeSpec::composite(std::move(kids), std::move(poses), false);
}

// ---------------------------------------------------------------------------
// Transforms
// ---------------------------------------------------------------------------

/// Per-axis sampling ranges: Euler angles in degrees, translation in length units.
struct TransformRanges {
  double rot_lo_deg = 0.0, rot_hi_deg = 45.0;
  double trans_lo = -0.5, trans_hi = 0.5;
};

inline RigidTransform sample_rigid_transform(const TransformRanges& r, std::uint64_t seed) {
  if (r.rot_lo_deg < 0.0 || r.rot_hi_deg >= 180.0 || r.rot_lo_deg > r.rot_hi_deg)
    throw std::invalid_argument("sample_rigid_transform: rotation range must lie within [0, 180)");
  if (!std::isfinite(r.trans_lo) || !std::isfinite(r.trans_hi) || r.trans_lo > r.trans_hi)
    throw std::invalid_argument("sample_rigid_transform: invalid translation range");
  Rng rng = make_rng(seed);
  EulerZYX e;
  e.yaw = deg2rad(uniform(rng, r.rot_lo_deg, r.rot_hi_deg));
  e.pitch = deg2rad(uniform(rng, r.rot_lo_deg, r.rot_hi_deg));
  e.roll = deg2rad(uniform(rng, r.rot_lo_deg, r.rot_hi_deg));
  Vec3 t;
  for (int a = 0; a < 3; ++a) t[a] = uniform(rng, r.trans_lo, r.trans_hi);
  return {euler_zyx_to_rotmat(e), t};
}

// ---------------------------------------------------------------------------
// Partial crops and noise
// ---------------------------------------------------------------------------

inline PointCloud select(const PointCloud& cloud, const std::vector<std::size_t>& idx) {
  PointCloud out;
  out.points.reserve(idx.size());
  for (auto i : idx) out.points.push_back(cloud[i]);
  return out;
}

/// Indices of the `keep` points closest to `viewpoint`, returned in original order.
inline std::vector<std::size_t> knn_crop_indices(const PointCloud& cloud, std::size_t keep, const Vec3& viewpoint) {
  if (keep > cloud.size())
    throw std::invalid_argument("partial_knn: keep (" + std::to_string(keep) + ") exceeds cloud size (" + std::to_string(cloud.size()) + ")");
  std::vector<std::size_t> idx(cloud.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::vector<double> d(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) d[i] = squared_distance(cloud[i], viewpoint);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return d[a] < d[b]; });
  idx.resize(keep);
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// Viewpoint on the radius-2 sphere around the cloud centroid.
inline Vec3 random_viewpoint(const PointCloud& cloud, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  return cloud.centroid() + 2.0 * detail::sample_unit_sphere(rng);
}

inline PointCloud partial_knn(const PointCloud& cloud, std::size_t keep, std::uint64_t seed) {
  if (keep > cloud.size())
    throw std::invalid_argument("partial_knn: keep (" + std::to_string(keep) + ") exceeds cloud size (" + std::to_string(cloud.size()) + ")");
  return select(cloud, knn_crop_indices(cloud, keep, random_viewpoint(cloud, seed)));
}

/// Keeps the ceil(retain_frac * n) points with the largest projection on `normal`,
/// in original order.
inline std::vector<std::size_t> halfspace_crop_indices(const PointCloud& cloud, const Vec3& normal, double retain_frac) {
  if (!(retain_frac > 0.0) || retain_frac > 1.0) throw std::invalid_argument("partial_halfspace: retain_frac must lie in (0, 1]");
  const auto retained = static_cast<std::size_t>(std::ceil(retain_frac * static_cast<double>(cloud.size()) - 1e-9));
  std::vector<std::size_t> idx(cloud.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::vector<double> proj(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) proj[i] = normal.dot(cloud[i]);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return proj[a] > proj[b]; });
  idx.resize(std::min(retained, cloud.size()));
  std::sort(idx.begin(), idx.end());
  return idx;
}

struct HalfspaceCrop {
  PointCloud cloud;
  Vec3 normal;
  std::vector<std::size_t> indices;  ///< into the input cloud
};

inline HalfspaceCrop partial_halfspace_detailed(const PointCloud& cloud, double retain_frac, std::size_t downsample_to, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  HalfspaceCrop out;
  out.normal = detail::sample_unit_sphere(rng);
  std::vector<std::size_t> kept = halfspace_crop_indices(cloud, out.normal, retain_frac);
  if (downsample_to > kept.size())
    throw std::invalid_argument("partial_halfspace: downsample_to (" + std::to_string(downsample_to) + ") exceeds retained count (" +
                                std::to_string(kept.size()) + ")");
  if (downsample_to < kept.size()) {
    for (std::size_t i = 0; i < downsample_to; ++i) std::swap(kept[i], kept[i + uniform_index(rng, kept.size() - i)]);
    kept.resize(downsample_to);
    std::sort(kept.begin(), kept.end());
  }
  out.cloud = select(cloud, kept);
  out.indices = std::move(kept);
  return out;
}

inline PointCloud partial_halfspace(const PointCloud& cloud, double retain_frac, std::size_t downsample_to, std::uint64_t seed) {
  return partial_halfspace_detailed(cloud, retain_frac, downsample_to, seed).cloud;
}

inline PointCloud add_gaussian_noise(const PointCloud& cloud, double sigma, double clip, std::uint64_t seed) {
  if (sigma < 0.0) throw std::invalid_argument("add_gaussian_noise: sigma must be >= 0");
  if (!(clip > 0.0)) throw std::invalid_argument("add_gaussian_noise: clip must be > 0");
  if (sigma == 0.0) return cloud;
  Rng rng = make_rng(seed);
  PointCloud out = cloud;
  for (auto& p : out.points)
    for (int a = 0; a < 3; ++a) p[a] += std::clamp(sigma * standard_normal(rng), -clip, clip);
  return out;
}

// ---------------------------------------------------------------------------
// Ground-truth masks and pairs
// ---------------------------------------------------------------------------

struct MaskPair {
  BinaryMask x, y;
};

/// mask_x[j] = 1 iff gt(x_j) has a point of y within `threshold`; mask_y uses gt^-1.
inline MaskPair compute_gt_masks(const PointCloud& x, const PointCloud& y, const RigidTransform& gt, double threshold) {
  if (!(threshold > 0.0)) throw std::invalid_argument("compute_gt_masks: threshold must be > 0");
  MaskPair m;
  m.x.assign(x.size(), 0);
  m.y.assign(y.size(), 0);
  if (x.empty() || y.empty()) return m;
  const double t2 = threshold * threshold;
  const PointCloud xt = apply(gt, x);
  const KdTree ytree(y.points);
  for (std::size_t j = 0; j < x.size(); ++j) m.x[j] = ytree.nearest(xt[j]).sq_dist <= t2 ? 1 : 0;
  const PointCloud yt = apply(inverse(gt), y);
  const KdTree xtree(x.points);
  for (std::size_t k = 0; k < y.size(); ++k) m.y[k] = xtree.nearest(yt[k]).sq_dist <= t2 ? 1 : 0;
  return m;
}

enum class PartialMode { none, knn, halfspace };

/// Generation protocol knobs. Defaults are the full-size (2048-point) values.
struct PairOptions {
  TransformRanges ranges;
  PartialMode partial = PartialMode::none;
  std::size_t keep = 768;          ///< knn crop size
  double retain_frac = 0.7;        ///< halfspace crop fraction
  std::size_t downsample_to = 717; ///< halfspace downsample size
  double noise_sigma = 0.0;
  double noise_clip = 0.05;
  double mask_threshold = 0.1;
  std::size_t samplings = 40;      ///< independent samplings per object
  bool twice_sampled = true;       ///< false: source and reference share one sampling
  std::size_t max_rejections = 64; ///< zero-overlap regenerations before giving up
};

struct SeedRecord {
  std::uint64_t pair_seed = 0;
  std::uint32_t sampling_x = 0, sampling_y = 0;
  std::uint32_t rejections = 0;
};

struct RegistrationPair {
  PointCloud source;     ///< X
  PointCloud reference;  ///< Y
  RigidTransform gt;     ///< apply(gt, X) aligns X onto Y
  BinaryMask mask_x, mask_y;
  double alpha = 1.0;    ///< ones(mask_x) / |X|
  SeedRecord seed;
};

/// All unordered index pairs out of `samplings` independent samplings.
inline std::vector<std::pair<std::uint32_t, std::uint32_t>> sampling_combinations(std::size_t samplings) {
  std::vector<std::pair<std::uint32_t, std::uint32_t>> out;
  for (std::uint32_t i = 0; i < samplings; ++i)
    for (std::uint32_t j = i + 1; j < samplings; ++j) out.emplace_back(i, j);
  return out;
}

namespace detail {

// Normalization is a property of the object, fitted on a dense reference sampling
// so every one of its samplings shares the same frame.
inline Normalization object_normalization(const ShapeSpec& spec, std::uint64_t object_seed) {
  return Normalization::fit(sample_surface_raw(spec, 4096, derive_seed(object_seed, {0x0B7})));
}

inline PointCloud object_sampling(const ShapeSpec& spec, const Normalization& norm, std::size_t n, std::uint64_t object_seed, std::uint32_t k) {
  return norm.apply(sample_surface_raw(spec, n, derive_seed(object_seed, {0x5A3, k})));
}

inline std::pair<std::uint32_t, std::uint32_t> choose_samplings(std::size_t samplings, std::uint64_t seed) {
  if (samplings < 2) return {0, 0};
  Rng rng = make_rng(seed);
  const auto a = static_cast<std::uint32_t>(uniform_index(rng, samplings));
  auto b = static_cast<std::uint32_t>(uniform_index(rng, samplings - 1));
  if (b >= a) ++b;
  return {a, b};
}

inline PointCloud crop(const PointCloud& c, const PairOptions& o, std::uint64_t seed) {
  switch (o.partial) {
    case PartialMode::none: return c;
    case PartialMode::knn: return partial_knn(c, o.keep, seed);
    case PartialMode::halfspace: return partial_halfspace(c, o.retain_frac, o.downsample_to, seed);
  }
  return c;
}

inline void finish_pair(RegistrationPair& p, double threshold) {
  auto m = compute_gt_masks(p.source, p.reference, p.gt, threshold);
  p.mask_x = std::move(m.x);
  p.mask_y = std::move(m.y);
  p.alpha = p.source.empty() ? 0.0 : static_cast<double>(count_ones(p.mask_x)) / static_cast<double>(p.source.size());
}

}  // namespace detail

/// Source and reference come from two different samplings of the same surface
/// (out of `options.samplings`), related by a sampled rigid transform, then
/// cropped, perturbed and labelled. Zero-overlap crops are regenerated.
inline RegistrationPair make_pair_twice_sampled(const ShapeSpec& spec, std::size_t n, const PairOptions& options, std::uint64_t seed) {
  if (n < 2) throw std::invalid_argument("make_pair_twice_sampled: n must be >= 2");
  const Normalization norm = detail::object_normalization(spec, seed);
  RegistrationPair pair;
  pair.seed.pair_seed = seed;
  auto [sx, sy] = options.twice_sampled ? detail::choose_samplings(options.samplings, derive_seed(seed, {1})) : std::pair<std::uint32_t, std::uint32_t>{0, 0};
  pair.seed.sampling_x = sx;
  pair.seed.sampling_y = sy;
  const PointCloud xs = detail::object_sampling(spec, norm, n, seed, sx);
  const PointCloud ys = options.twice_sampled ? detail::object_sampling(spec, norm, n, seed, sy) : xs;
  pair.gt = sample_rigid_transform(options.ranges, derive_seed(seed, {2}));
  const PointCloud y_full = apply(pair.gt, ys);

  for (std::uint32_t attempt = 0;; ++attempt) {
    pair.source = detail::crop(xs, options, derive_seed(seed, {3, attempt}));
    pair.reference = detail::crop(y_full, options, derive_seed(seed, {4, attempt}));
    pair.source = add_gaussian_noise(pair.source, options.noise_sigma, options.noise_clip, derive_seed(seed, {5, attempt}));
    pair.reference = add_gaussian_noise(pair.reference, options.noise_sigma, options.noise_clip, derive_seed(seed, {6, attempt}));
    detail::finish_pair(pair, options.mask_threshold);
    pair.seed.rejections = attempt;
    if (pair.alpha > 0.0) break;
    if (options.partial == PartialMode::none || attempt + 1 >= options.max_rejections)
      throw std::runtime_error("make_pair_twice_sampled: no overlapping points after " + std::to_string(attempt + 1) + " attempts (seed " +
                               std::to_string(seed) + ")");
  }
  return pair;
}

/// Builds a pair whose source overlap ratio is close to `target_alpha`: the
/// source is a k-NN crop (options.keep points) and the reference is assembled
/// from two contiguous regions of a second sampling, one inside and one
/// outside the source's footprint, grown from a shared boundary seed.
inline RegistrationPair make_pair_at_overlap(const ShapeSpec& spec, double target_alpha, std::size_t n, const PairOptions& options,
                                             std::uint64_t seed, double tolerance = 0.05) {
  if (!(target_alpha > 0.0) || target_alpha > 1.0) throw std::invalid_argument("make_pair_at_overlap: target_alpha must lie in (0, 1]");
  if (options.keep > n || options.keep < 1) throw std::invalid_argument("make_pair_at_overlap: keep must lie in [1, n]");
  const Normalization norm = detail::object_normalization(spec, seed);
  RegistrationPair pair;
  pair.seed.pair_seed = seed;
  auto [sx, sy] = detail::choose_samplings(options.samplings, derive_seed(seed, {1}));
  pair.seed.sampling_x = sx;
  pair.seed.sampling_y = sy;
  const PointCloud xs = detail::object_sampling(spec, norm, n, seed, sx);
  const PointCloud ys = detail::object_sampling(spec, norm, n, seed, sy);
  const PointCloud x = partial_knn(xs, options.keep, derive_seed(seed, {3}));

  const double t2 = options.mask_threshold * options.mask_threshold;
  const KdTree xtree(x.points);
  std::vector<std::size_t> inside, outside;
  for (std::size_t k = 0; k < ys.size(); ++k) (xtree.nearest(ys[k]).sq_dist <= t2 ? inside : outside).push_back(k);
  if (inside.empty()) throw std::runtime_error("make_pair_at_overlap: reference sampling does not touch the source crop");

  // boundary seed: the inside point nearest to a random outside point
  Rng rng = make_rng(derive_seed(seed, {7}));
  Vec3 anchor = ys[inside[uniform_index(rng, inside.size())]];
  if (!outside.empty()) {
    const Vec3 o = ys[outside[uniform_index(rng, outside.size())]];
    double best = std::numeric_limits<double>::infinity();
    for (auto k : inside)
      if (const double d = squared_distance(ys[k], o); d < best) best = d, anchor = ys[k];
  }
  auto by_distance = [&](std::vector<std::size_t>& v) {
    std::stable_sort(v.begin(), v.end(), [&](std::size_t a, std::size_t b) { return squared_distance(ys[a], anchor) < squared_distance(ys[b], anchor); });
  };
  by_distance(inside);
  by_distance(outside);

  // coverage of the source is monotone in the number of inside points taken
  auto coverage = [&](std::size_t m) {
    std::vector<Vec3> pts;
    for (std::size_t i = 0; i < m; ++i) pts.push_back(ys[inside[i]]);
    const KdTree t(pts);
    std::size_t c = 0;
    for (const auto& p : x.points) c += t.nearest(p).sq_dist <= t2 ? 1 : 0;
    return static_cast<double>(c) / static_cast<double>(x.size());
  };
  const double lo = coverage(1), hi = coverage(inside.size());
  if (target_alpha > hi + tolerance || target_alpha < lo - tolerance)
    throw std::invalid_argument("make_pair_at_overlap: target alpha " + std::to_string(target_alpha) + " infeasible; achievable range is [" +
                                std::to_string(lo) + ", " + std::to_string(hi) + "]");
  std::size_t left = 1, right = inside.size();
  while (left < right) {
    const std::size_t mid = (left + right) / 2;
    if (coverage(mid) < target_alpha) left = mid + 1;
    else right = mid;
  }
  std::size_t m_in = left;
  if (m_in > 1 && std::abs(coverage(m_in - 1) - target_alpha) <= std::abs(coverage(m_in) - target_alpha)) --m_in;
  const std::size_t y_size = std::max(options.keep, m_in);
  const std::size_t m_out = std::min(outside.size(), y_size - m_in);

  std::vector<std::size_t> chosen(inside.begin(), inside.begin() + static_cast<std::ptrdiff_t>(m_in));
  chosen.insert(chosen.end(), outside.begin(), outside.begin() + static_cast<std::ptrdiff_t>(m_out));
  std::sort(chosen.begin(), chosen.end());

  pair.gt = sample_rigid_transform(options.ranges, derive_seed(seed, {2}));
  pair.source = add_gaussian_noise(x, options.noise_sigma, options.noise_clip, derive_seed(seed, {5}));
  pair.reference = add_gaussian_noise(apply(pair.gt, select(ys, chosen)), options.noise_sigma, options.noise_clip, derive_seed(seed, {6}));
  detail::finish_pair(pair, options.mask_threshold);
  return pair;
}

}  // namespace overlapreg
