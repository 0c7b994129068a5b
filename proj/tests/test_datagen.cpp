#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include <overlapreg/datagen.hpp>

using namespace overlapreg;

namespace {

MaskPair brute_force_masks(const PointCloud& x, const PointCloud& y, const RigidTransform& gt, double thr) {
  MaskPair m;
  const PointCloud xt = apply(gt, x), yt = apply(inverse(gt), y);
  for (const auto& p : xt.points) {
    double best = INFINITY;
    for (const auto& q : y.points) best = std::min(best, (p - q).squaredNorm());
    m.x.push_back(best <= thr * thr);
  }
  for (const auto& p : yt.points) {
    double best = INFINITY;
    for (const auto& q : x.points) best = std::min(best, (p - q).squaredNorm());
    m.y.push_back(best <= thr * thr);
  }
  return m;
}

PairOptions knn_options(std::size_t keep) {
  PairOptions o;
  o.partial = PartialMode::knn;
  o.keep = keep;
  return o;
}

}  // namespace

TEST(SampleSurface, SphereRawRadius) {
  const PointCloud c = sample_surface_raw(ShapeSpec::sphere(1.0), 2048, 1);
  ASSERT_EQ(c.size(), 2048u);
  for (const auto& p : c.points) EXPECT_NEAR(p.norm(), 1.0, 1e-9);
}

TEST(SampleSurface, NormalizedIntoUnitSphere) {
  const PointCloud c = sample_surface(ShapeSpec::box(2.0, 1.0, 0.5), 1024, 2);
  EXPECT_LT(c.centroid().norm(), 1e-12);
  double r = 0;
  for (const auto& p : c.points) r = std::max(r, p.norm());
  EXPECT_NEAR(r, 1.0, 1e-12);
}

TEST(SampleSurface, BoxFaceCountsFollowAreas) {
  const double a = 1.0, b = 0.6, c = 0.3;
  const std::size_t n = 4096;
  const PointCloud pts = sample_surface_raw(ShapeSpec::box(a, b, c), n, 3);
  const double half[3] = {a / 2, b / 2, c / 2};
  std::array<int, 6> counts{};
  for (const auto& p : pts.points) {
    int face = -1;
    for (int ax = 0; ax < 3; ++ax)
      if (std::abs(std::abs(p[ax]) - half[ax]) < 1e-12) face = 2 * ax + (p[ax] > 0);
    ASSERT_GE(face, 0);
    ++counts[static_cast<std::size_t>(face)];
  }
  const double area[3] = {b * c, a * c, a * b};
  const double total = 2 * (area[0] + area[1] + area[2]);
  for (int f = 0; f < 6; ++f) {
    const double pf = area[f / 2] / total;
    const double mean = n * pf, sd = std::sqrt(n * pf * (1 - pf));
    EXPECT_LE(std::abs(counts[static_cast<std::size_t>(f)] - mean), 3 * sd) << "face " << f;
  }
}

TEST(SampleSurface, DeterministicAndErrors) {
  const ShapeSpec s = ShapeSpec::torus(0.8, 0.2);
  EXPECT_EQ(sample_surface(s, 300, 9), sample_surface(s, 300, 9));
  EXPECT_FALSE(sample_surface(s, 300, 9) == sample_surface(s, 300, 10));
  EXPECT_THROW(sample_surface(s, 0, 1), std::invalid_argument);
  EXPECT_THROW(sample_surface(ShapeSpec::box(1.0, 0.0, 1.0), 10, 1), std::invalid_argument);
  EXPECT_THROW(sample_surface(ShapeSpec::composite({}, {}), 10, 1), std::invalid_argument);
}

TEST(SampleSurface, CylinderAndTorusLieOnSurface) {
  for (const auto& p : sample_surface_raw(ShapeSpec::cylinder(0.5, 2.0), 500, 4).points) {
    const double rho = std::hypot(p.x(), p.y());
    EXPECT_TRUE(std::abs(rho - 0.5) < 1e-9 || std::abs(std::abs(p.z()) - 1.0) < 1e-12);
  }
  for (const auto& p : sample_surface_raw(ShapeSpec::torus(1.0, 0.25), 500, 5).points)
    EXPECT_NEAR(std::hypot(std::hypot(p.x(), p.y()) - 1.0, p.z()), 0.25, 1e-9);
}

TEST(SampleSurface, RandomShapesAreAsymmetricComposites) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const ShapeSpec sh = random_shape(s);
    EXPECT_EQ(sh.kind, ShapeKind::composite);
    EXPECT_FALSE(sh.symmetric);
    EXPECT_GE(sh.children.size(), 2u);
    EXPECT_NO_THROW(sh.validate());
  }
}

TEST(RigidSampling, ZeroRangesGiveIdentity) {
  TransformRanges r{0, 0, 0, 0};
  const RigidTransform t = sample_rigid_transform(r, 5);
  EXPECT_EQ(t.rotation, Quaternion{});
  EXPECT_EQ(t.translation, Vec3::Zero());
}

TEST(RigidSampling, DefaultRangesRespected) {
  for (std::uint64_t s = 0; s < 10000; ++s) {
    const RigidTransform t = sample_rigid_transform({}, s);
    const EulerZYX e = rotmat_to_euler_zyx(t.rotation_matrix());
    for (double a : {e.yaw, e.pitch, e.roll}) {
      EXPECT_GE(rad2deg(a), -1e-9);
      EXPECT_LE(rad2deg(a), 45.0 + 1e-9);
    }
    for (int k = 0; k < 3; ++k) EXPECT_LE(std::abs(t.translation[k]), 0.5);
  }
  EXPECT_EQ(sample_rigid_transform({}, 77), sample_rigid_transform({}, 77));
  EXPECT_THROW(sample_rigid_transform({0, 180, 0, 0}, 1), std::invalid_argument);
}

TEST(PartialKnn, KeepAllIsPermutationOfInput) {
  const PointCloud c = sample_surface(ShapeSpec::sphere(1), 200, 1);
  const PointCloud k = partial_knn(c, c.size(), 3);
  EXPECT_EQ(k, c);
  EXPECT_THROW(partial_knn(c, 201, 3), std::invalid_argument);
}

TEST(PartialKnn, MatchesDistanceSortOracle) {
  const PointCloud c = sample_surface(random_shape(4), 2048, 4);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Vec3 vp = random_viewpoint(c, seed);
    const auto idx = knn_crop_indices(c, 768, vp);
    ASSERT_EQ(idx.size(), 768u);
    std::vector<std::size_t> order(c.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return (c[a] - vp).norm() < (c[b] - vp).norm(); });
    std::set<std::size_t> oracle(order.begin(), order.begin() + 768);
    EXPECT_EQ(std::set<std::size_t>(idx.begin(), idx.end()), oracle);
    double worst_kept = 0, best_dropped = INFINITY;
    std::set<std::size_t> kept(idx.begin(), idx.end());
    for (std::size_t i = 0; i < c.size(); ++i) {
      const double d = (c[i] - vp).norm();
      if (kept.count(i)) worst_kept = std::max(worst_kept, d);
      else best_dropped = std::min(best_dropped, d);
    }
    EXPECT_LE(worst_kept, best_dropped);
    EXPECT_EQ(partial_knn(c, 768, seed), select(c, idx));
  }
}

TEST(PartialKnn, FarPlusZViewpointKeepsUpperCap) {
  const PointCloud c = sample_surface(ShapeSpec::sphere(1), 1000, 6);
  const auto idx = knn_crop_indices(c, 300, Vec3(0, 0, 10));
  std::set<std::size_t> kept(idx.begin(), idx.end());
  double zk = 0, zd = 0;
  for (std::size_t i = 0; i < c.size(); ++i) (kept.count(i) ? zk : zd) += c[i].z();
  EXPECT_GT(zk / 300.0, zd / 700.0);
}

TEST(PartialHalfspace, FullRetention) {
  const PointCloud c = sample_surface(ShapeSpec::sphere(1), 100, 1);
  EXPECT_EQ(partial_halfspace(c, 1.0, 100, 2), c);
}

TEST(PartialHalfspace, ExactCountsAndSeparation) {
  const PointCloud c = sample_surface(random_shape(2), 1024, 2);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto kept_all = halfspace_crop_indices(c, Vec3(0.3, -0.5, 0.8).normalized(), 0.7);
    EXPECT_EQ(kept_all.size(), static_cast<std::size_t>(std::ceil(0.7 * 1024)));
    const HalfspaceCrop h = partial_halfspace_detailed(c, 0.7, 717, seed);
    ASSERT_EQ(h.cloud.size(), 717u);
    const auto full = halfspace_crop_indices(c, h.normal, 0.7);
    std::set<std::size_t> kept(full.begin(), full.end());
    double min_kept = INFINITY, max_dropped = -INFINITY;
    for (std::size_t i = 0; i < c.size(); ++i)
      (kept.count(i) ? min_kept = std::min(min_kept, h.normal.dot(c[i])) : max_dropped = std::max(max_dropped, h.normal.dot(c[i])));
    EXPECT_GE(min_kept, max_dropped);
    for (auto i : h.indices) EXPECT_TRUE(kept.count(i));
  }
  EXPECT_THROW(partial_halfspace(c, 0.7, 800, 1), std::invalid_argument);
  EXPECT_THROW(partial_halfspace(c, 0.0, 10, 1), std::invalid_argument);
}

TEST(Noise, ZeroSigmaIsIdentity) {
  const PointCloud c = sample_surface(ShapeSpec::sphere(1), 50, 1);
  EXPECT_EQ(add_gaussian_noise(c, 0.0, 0.05, 3), c);
  EXPECT_THROW(add_gaussian_noise(c, -0.1, 0.05, 3), std::invalid_argument);
  EXPECT_THROW(add_gaussian_noise(c, 0.1, 0.0, 3), std::invalid_argument);
}

TEST(Noise, ClippedAndCalibrated) {
  PointCloud zeros(std::vector<Vec3>(333334, Vec3::Zero()));
  const PointCloud n = add_gaussian_noise(zeros, 0.01, 0.05, 7);
  double sq = 0, mx = 0;
  std::size_t cnt = 0;
  for (const auto& p : n.points)
    for (int a = 0; a < 3; ++a) sq += p[a] * p[a], mx = std::max(mx, std::abs(p[a])), ++cnt;
  EXPECT_LE(mx, 0.05);
  EXPECT_NEAR(std::sqrt(sq / static_cast<double>(cnt)), 0.01, 0.0005);
}

TEST(GtMasks, IdenticalCloudsAllOnes) {
  const PointCloud c = sample_surface(ShapeSpec::box(1, 1, 1), 200, 1);
  const MaskPair m = compute_gt_masks(c, c, RigidTransform::identity(), 1e-6);
  EXPECT_EQ(count_ones(m.x), 200u);
  EXPECT_EQ(count_ones(m.y), 200u);
}

TEST(GtMasks, DisjointCloudsAllZeros) {
  const PointCloud c = sample_surface(ShapeSpec::sphere(1), 100, 1);
  const PointCloud far = apply(RigidTransform(Quaternion{}, Vec3(10, 0, 0)), c);
  const MaskPair m = compute_gt_masks(c, far, RigidTransform::identity(), 0.1);
  EXPECT_EQ(count_ones(m.x), 0u);
  EXPECT_EQ(count_ones(m.y), 0u);
  EXPECT_THROW(compute_gt_masks(c, c, RigidTransform::identity(), 0.0), std::invalid_argument);
}

TEST(GtMasks, MatchBruteForceOnPartialPairs) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const RegistrationPair p = make_pair_twice_sampled(random_shape(s), 512, knn_options(300), s);
    const MaskPair oracle = brute_force_masks(p.source, p.reference, p.gt, 0.1);
    EXPECT_EQ(p.mask_x, oracle.x);
    EXPECT_EQ(p.mask_y, oracle.y);
  }
}

TEST(TwiceSampled, FullOverlapAndNoSharedPoints) {
  PairOptions o;
  const RegistrationPair p = make_pair_twice_sampled(random_shape(1), 1024, o, 5);
  EXPECT_DOUBLE_EQ(p.alpha, 1.0);
  EXPECT_EQ(count_ones(p.mask_x), p.source.size());
  EXPECT_NE(p.seed.sampling_x, p.seed.sampling_y);
  const PointCloud back = apply(inverse(p.gt), p.reference);
  std::size_t shared = 0;
  for (const auto& a : p.source.points)
    for (const auto& b : back.points) shared += (a - b).norm() < 1e-12;
  EXPECT_EQ(shared, 0u);
}

TEST(TwiceSampled, CombinationCountAndDeterminism) {
  const auto combos = sampling_combinations(40);
  EXPECT_EQ(combos.size(), 780u);
  std::set<std::pair<std::uint32_t, std::uint32_t>> uniq(combos.begin(), combos.end());
  EXPECT_EQ(uniq.size(), 780u);
  const PairOptions o = knn_options(96);
  const RegistrationPair a = make_pair_twice_sampled(random_shape(3), 256, o, 3);
  const RegistrationPair b = make_pair_twice_sampled(random_shape(3), 256, o, 3);
  EXPECT_EQ(a.source, b.source);
  EXPECT_EQ(a.reference, b.reference);
  EXPECT_EQ(a.gt, b.gt);
  EXPECT_EQ(a.mask_x, b.mask_x);
}

TEST(TwiceSampled, AlphaMatchesMaskAndLabelsAreConsistent) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    PairOptions o = knn_options(768);
    o.noise_sigma = 0.01;
    const RegistrationPair p = make_pair_twice_sampled(random_shape(s), 2048, o, s);
    EXPECT_GT(p.alpha, 0.0);
    EXPECT_NEAR(p.alpha, static_cast<double>(count_ones(p.mask_x)) / p.source.size(), 1.0 / p.source.size());
    const PointCloud xt = apply(p.gt, p.source);
    for (std::size_t j = 0; j < xt.size(); ++j) {
      if (!p.mask_x[j]) continue;
      double best = INFINITY;
      for (const auto& q : p.reference.points) best = std::min(best, (xt[j] - q).norm());
      EXPECT_LE(best, 0.1 + 1e-12);
    }
  }
}

TEST(OverlapControl, TargetsAreMet) {
  PairOptions o = knn_options(96);
  // 0.1 is below the sample spacing of 256-point clouds, which caps coverage well short of 1
  o.mask_threshold = 0.25;
  for (double target : {1.0, 0.9, 0.5, 0.1}) {
    int built = 0;
    for (std::uint64_t s = 0; s < 30 && built < 3; ++s) {
      RegistrationPair p;
      try {
        p = make_pair_at_overlap(random_shape(s), target, 256, o, s);
      } catch (const std::invalid_argument&) {
        continue;
      }
      ++built;
      const MaskPair m = compute_gt_masks(p.source, p.reference, p.gt, o.mask_threshold);
      const double alpha = static_cast<double>(count_ones(m.x)) / p.source.size();
      EXPECT_NEAR(alpha, p.alpha, 1e-12);
      EXPECT_NEAR(alpha, target, 0.05) << "target " << target << " seed " << s;
    }
    EXPECT_GE(built, 3) << "target " << target;
  }
  EXPECT_THROW(make_pair_at_overlap(random_shape(0), 0.0, 256, o, 1), std::invalid_argument);
  const RegistrationPair a = make_pair_at_overlap(random_shape(2), 0.5, 256, o, 2);
  const RegistrationPair b = make_pair_at_overlap(random_shape(2), 0.5, 256, o, 2);
  EXPECT_EQ(a.reference, b.reference);
}
