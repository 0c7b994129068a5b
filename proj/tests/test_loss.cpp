#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include <overlapreg/loss.hpp>

using namespace overlapreg;

namespace {

Matrix row(std::initializer_list<double> v) {
  Matrix m(1, static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) m(0, i++) = x;
  return m;
}

Matrix col(const std::vector<double>& v) {
  Matrix m(static_cast<Index>(v.size()), 1);
  for (std::size_t i = 0; i < v.size(); ++i) m(static_cast<Index>(i), 0) = v[i];
  return m;
}

double mask_loss_value(const Matrix& pred, const BinaryMask& label, double alpha) {
  Tape t;
  return mask_loss(t.constant(pred), label, alpha).scalar();
}

RegistrationPair small_pair(std::uint64_t seed) {
  PairOptions o;
  o.partial = PartialMode::knn;
  o.keep = 40;
  return make_pair_twice_sampled(random_shape(seed), 64, o, seed);
}

// Trace whose every prediction equals its residual target and whose masks
// equal the recomputed labels (clamped away from 0 and 1 by the loss).
IterationTrace perfect_trace(Tape& tape, const RegistrationPair& p, const std::vector<RigidTransform>& inputs) {
  IterationTrace tr;
  for (const auto& acc : inputs) {
    IterationRecord r;
    r.accumulated_before = acc;
    const RigidTransform res = residual_target(p.gt, acc);
    r.step = res;
    r.accumulated = compose(res, acc);
    r.q = tape.variable(row({res.rotation.w, res.rotation.x, res.rotation.y, res.rotation.z}));
    r.t = tape.variable(row({res.translation.x(), res.translation.y(), res.translation.z()}));
    const MaskPair m = compute_gt_masks(apply(acc, p.source), p.reference, res, 0.1);
    std::vector<double> mx(m.x.begin(), m.x.end()), my(m.y.begin(), m.y.end());
    r.mask_x_var = tape.variable(col(mx));
    r.mask_y_var = tape.variable(col(my));
    tr.iterations.push_back(r);
  }
  return tr;
}

}  // namespace

TEST(MaskLoss, ClosedFormAtHalf) {
  const BinaryMask label{1, 0, 0, 1, 0};
  const double alpha = 0.3;
  const double expect = (2 * alpha * std::log(2.0) + 3 * (1 - alpha) * std::log(2.0)) / 5.0;
  EXPECT_NEAR(mask_loss_value(Matrix::Constant(5, 1, 0.5), label, alpha), expect, 1e-15);
}

TEST(MaskLoss, PerfectPredictionIsNearZero) {
  const BinaryMask label{1, 0, 1, 1, 0, 0};
  std::vector<double> p(label.begin(), label.end());
  EXPECT_LT(mask_loss_value(col(p), label, 0.5), 1e-5);
  EXPECT_GE(mask_loss_value(col(p), label, 0.5), 0.0);
}

TEST(MaskLoss, RejectsAlphaOutsideOpenInterval) {
  const BinaryMask label{1, 0};
  EXPECT_THROW(mask_loss_value(Matrix::Constant(2, 1, 0.5), label, 0.0), std::invalid_argument);
  EXPECT_THROW(mask_loss_value(Matrix::Constant(2, 1, 0.5), label, 1.0), std::invalid_argument);
  EXPECT_THROW(mask_loss_value(Matrix::Constant(3, 1, 0.5), label, 0.5), std::invalid_argument);
  EXPECT_DOUBLE_EQ(clamp_alpha(1.0), 1.0 - 1e-3);
  EXPECT_DOUBLE_EQ(clamp_alpha(0.0), 1e-3);
}

TEST(MaskLoss, MovingTowardLabelStrictlyDecreases) {
  Rng rng = make_rng(1);
  BinaryMask label(20);
  Matrix p(20, 1);
  for (Index i = 0; i < 20; ++i) {
    label[static_cast<std::size_t>(i)] = uniform(rng) < 0.4;
    p(i, 0) = uniform(rng, 0.05, 0.95);
  }
  const double base = mask_loss_value(p, label, 0.4);
  for (Index i = 0; i < 20; ++i) {
    Matrix q = p;
    q(i, 0) += label[static_cast<std::size_t>(i)] ? 0.01 : -0.01;
    EXPECT_LT(mask_loss_value(q, label, 0.4), base) << i;
  }
}

TEST(MaskLoss, GradientMatchesFiniteDifferences) {
  Rng rng = make_rng(2);
  BinaryMask label(15);
  Matrix p(15, 1);
  for (Index i = 0; i < 15; ++i) {
    label[static_cast<std::size_t>(i)] = uniform(rng) < 0.5;
    p(i, 0) = uniform(rng, 0.1, 0.9);
  }
  Tape t;
  Var v = t.variable(p);
  t.backward(mask_loss(v, label, 0.35));
  const double h = 1e-6;
  Matrix num(15, 1);
  for (Index i = 0; i < 15; ++i) {
    Matrix a = p, b = p;
    a(i, 0) += h;
    b(i, 0) -= h;
    num(i, 0) = (mask_loss_value(a, label, 0.35) - mask_loss_value(b, label, 0.35)) / (2 * h);
  }
  EXPECT_LT((v.grad() - num).norm() / num.norm(), 1e-6);
}

TEST(RegLoss, ClosedForms) {
  Tape t;
  const Quaternion q = rotmat_to_quat(euler_zyx_to_rotmat({0.3, -0.2, 0.1}));
  const Var qv = t.constant(row({q.w, q.x, q.y, q.z}));
  EXPECT_NEAR(reg_loss(qv, t.constant(row({1.1, 2, 3})), q, Vec3(1, 2, 3), 4.0).scalar(), 0.4, 1e-12);
  EXPECT_EQ(reg_loss(qv, t.constant(row({1, 2, 3})), q, Vec3(1, 2, 3), 4.0).scalar(), 0.0);
  EXPECT_EQ(reg_loss(qv, t.constant(row({1, 2, 3})), -q, Vec3(1, 2, 3), 4.0).scalar(), 0.0);
  EXPECT_THROW(reg_loss(t.constant(row({1, 0, 0})), t.constant(row({1, 2, 3})), q, Vec3(1, 2, 3), 4.0), std::invalid_argument);
}

TEST(RegLoss, InvariantToTargetSign) {
  Rng rng = make_rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Quaternion qg{uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1)};
    qg = qg.normalized();
    Quaternion qp{uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1)};
    qp = qp.normalized();
    Tape t;
    const Var qv = t.constant(row({qp.w, qp.x, qp.y, qp.z})), tv = t.constant(row({0.1, 0.2, 0.3}));
    EXPECT_EQ(reg_loss(qv, tv, qg, Vec3::Zero(), 4.0).scalar(), reg_loss(qv, tv, -qg, Vec3::Zero(), 4.0).scalar());
  }
}

TEST(RegLoss, GradientMatchesFiniteDifferences) {
  const Quaternion qg = rotmat_to_quat(euler_zyx_to_rotmat({0.5, 0.1, -0.4}));
  const Vec3 tg(0.3, -0.1, 0.2);
  const Matrix q0 = row({0.6, 0.3, -0.5, 0.2}), t0 = row({0.25, 0.4, -0.3});
  auto value = [&](const Matrix& q, const Matrix& t) {
    Tape tape;
    return reg_loss(tape.constant(q), tape.constant(t), qg, tg, 4.0).scalar();
  };
  Tape tape;
  Var qv = tape.variable(q0), tv = tape.variable(t0);
  tape.backward(reg_loss(qv, tv, qg, tg, 4.0));
  const double h = 1e-6;
  for (Index j = 0; j < 4; ++j) {
    Matrix a = q0, b = q0;
    a(0, j) += h;
    b(0, j) -= h;
    EXPECT_NEAR(qv.grad()(0, j), (value(a, t0) - value(b, t0)) / (2 * h), 1e-6);
  }
  for (Index j = 0; j < 3; ++j) {
    Matrix a = t0, b = t0;
    a(0, j) += h;
    b(0, j) -= h;
    EXPECT_NEAR(tv.grad()(0, j), (value(q0, a) - value(q0, b)) / (2 * h), 1e-6);
  }
}

TEST(TotalLoss, PerfectPredictionsAreNearZero) {
  const RegistrationPair p = small_pair(4);
  Tape tape;
  const std::vector<RigidTransform> inputs{RigidTransform::identity(), sample_rigid_transform({}, 9), p.gt};
  const IterationTrace tr = perfect_trace(tape, p, inputs);
  const LossBreakdown lb = total_loss(tr, p, 4.0, 0.1);
  ASSERT_EQ(lb.iterations.size(), 3u);
  EXPECT_LT(lb.total, 1e-5);
  EXPECT_GE(lb.total, 0.0);
  // labels recomputed from the moved source match the stored masks
  for (const auto& it : lb.iterations) EXPECT_EQ(it.label_x, p.mask_x);
}

TEST(TotalLoss, SumsComponentsAndSeparatesLambda) {
  const RegistrationPair p = small_pair(5);
  OmnetConfig c;
  c.iterations = 3;
  c.feature_widths = {8, 8};
  c.fusion_widths = {8};
  c.mask_widths = {4, 2};
  c.regression_widths = {8, 7};
  const OmnetModel m(c, 3);
  auto run = [&](double lambda) {
    Tape tape;
    nn::Binding b(tape, m.params());
    const IterationTrace tr = run_iterative(m, tape, b, p.source, p.reference);
    return total_loss(tr, p, lambda, 0.1);
  };
  const LossBreakdown a = run(4.0), b = run(8.0);
  double sum = 0.0, trans = 0.0;
  for (const auto& it : a.iterations) {
    EXPECT_GE(it.mask_loss, 0.0);
    EXPECT_GE(it.reg_loss, 0.0);
    EXPECT_NEAR(it.reg_loss, it.rot_term + 4.0 * it.trans_term, 1e-12);
    sum += it.mask_loss + it.reg_loss;
    trans += it.trans_term;
  }
  EXPECT_NEAR(a.total, sum, 1e-12);
  EXPECT_NEAR(b.total - a.total, 4.0 * trans, 1e-12);
  for (std::size_t i = 0; i < a.iterations.size(); ++i) {
    EXPECT_EQ(a.iterations[i].mask_loss, b.iterations[i].mask_loss);
    EXPECT_EQ(a.iterations[i].rot_term, b.iterations[i].rot_term);
  }
}

TEST(TotalLoss, PermutationInvariant) {
  RegistrationPair p = small_pair(6);
  OmnetConfig c;
  c.iterations = 2;
  c.feature_widths = {8, 8};
  c.fusion_widths = {8};
  c.mask_widths = {4, 2};
  c.regression_widths = {8, 7};
  const OmnetModel m(c, 4);
  auto loss = [&](const RegistrationPair& pr) {
    Tape tape;
    nn::Binding b(tape, m.params());
    return total_loss(run_iterative(m, tape, b, pr.source, pr.reference), pr, 4.0, 0.1).total;
  };
  const double base = loss(p);
  std::vector<std::size_t> perm(p.source.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::reverse(perm.begin(), perm.end());
  RegistrationPair q = p;
  q.source = select(p.source, perm);
  for (std::size_t i = 0; i < perm.size(); ++i) q.mask_x[i] = p.mask_x[perm[i]];
  EXPECT_NEAR(loss(q), base, 1e-10 * std::max(1.0, base));
}

TEST(TotalLoss, RejectsInferenceTrace) {
  const RegistrationPair p = small_pair(7);
  OmnetConfig c;
  c.iterations = 1;
  c.mask_start_iteration = 1;
  c.feature_widths = {4};
  c.fusion_widths = {4};
  c.mask_widths = {4, 2};
  c.regression_widths = {7};
  const OmnetModel m(c, 5);
  EXPECT_THROW(total_loss(infer(m, p.source, p.reference), p, 4.0, 0.1), std::invalid_argument);
  EXPECT_THROW(total_loss(IterationTrace{}, p, 4.0, 0.1), std::invalid_argument);
}
