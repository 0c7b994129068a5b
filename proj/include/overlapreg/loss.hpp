#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "datagen.hpp"
#include "diff.hpp"
#include "model.hpp"

namespace overlapreg {

inline constexpr double kProbClamp = 1e-7;
inline constexpr double kAlphaClamp = 1e-3;

inline double clamp_alpha(double alpha) { return std::clamp(alpha, kAlphaClamp, 1.0 - kAlphaClamp); }

/// Frequency-weighted binary cross entropy, averaged over points.
inline Var mask_loss(const Var& pred, const BinaryMask& label, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("mask_loss: alpha must lie in (0, 1), got " + std::to_string(alpha));
  if (pred.cols() != 1 || static_cast<std::size_t>(pred.rows()) != label.size())
    throw std::invalid_argument("mask_loss: prediction " + diff::shape_str(pred.value()) + " vs " + std::to_string(label.size()) + " labels");
  Tape& tape = *pred.tape();
  const Index n = pred.rows();
  Matrix w_pos(n, 1), w_neg(n, 1);
  for (Index i = 0; i < n; ++i) {
    const double y = label[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
    w_pos(i, 0) = -alpha * y;
    w_neg(i, 0) = -(1.0 - alpha) * (1.0 - y);
  }
  Var p = diff::clamp(pred, kProbClamp, 1.0 - kProbClamp);
  Var pos = diff::hadamard(tape.constant(std::move(w_pos)), diff::log(p));
  Var neg = diff::hadamard(tape.constant(std::move(w_neg)), diff::log(diff::affine(p, -1.0, 1.0)));
  return diff::mean(diff::add(pos, neg));
}

/// Quaternion l1 (after double-cover alignment) plus lambda-weighted
/// translation l2.
inline Var reg_loss(const Var& q, const Var& t, const Quaternion& q_g, const Vec3& t_g, double lambda) {
  if (q.rows() != 1 || q.cols() != 4 || t.rows() != 1 || t.cols() != 3)
    throw std::invalid_argument("reg_loss: expected 1x4 q and 1x3 t, got " + diff::shape_str(q.value()) + " and " + diff::shape_str(t.value()));
  Tape& tape = *q.tape();
  const Quaternion qg = quaternion_of(q).dot(q_g) < 0.0 ? -q_g : q_g;
  Matrix qm(1, 4), tm(1, 3);
  qm << qg.w, qg.x, qg.y, qg.z;
  tm << t_g.x(), t_g.y(), t_g.z();
  Var l1 = diff::sum(diff::abs(diff::sub(q, tape.constant(std::move(qm)))));
  Var l2 = diff::norm2(diff::sub(t, tape.constant(std::move(tm))));
  return diff::add(l1, diff::scale(l2, lambda));
}

struct IterationLoss {
  double mask_loss = 0.0;  ///< both clouds
  double reg_loss = 0.0;
  double rot_term = 0.0;    ///< quaternion l1 part of reg_loss
  double trans_term = 0.0;  ///< translation norm (unweighted)
  double alpha_x = 0.0, alpha_y = 0.0;
  BinaryMask label_x, label_y;
};

struct LossBreakdown {
  std::vector<IterationLoss> iterations;
  double total = 0.0;
  Var root;  ///< scalar graph node; valid while the tape is alive
};

/// Residual ground truth left after applying `accumulated` to the source.
inline RigidTransform residual_target(const RigidTransform& gt, const RigidTransform& accumulated) { return compose(gt, inverse(accumulated)); }

/// Per-iteration losses against labels and residual targets recomputed from
/// each iteration's input pose.
inline LossBreakdown total_loss(const IterationTrace& trace, const RegistrationPair& pair, double lambda, double mask_threshold) {
  if (trace.iterations.empty()) throw std::invalid_argument("total_loss: empty trace");
  LossBreakdown out;
  Var total;
  for (const auto& rec : trace.iterations) {
    if (!rec.q.valid()) throw std::invalid_argument("total_loss: trace has no graph handles (produced by infer?)");
    const RigidTransform residual = residual_target(pair.gt, rec.accumulated_before);
    const PointCloud xt = apply(rec.accumulated_before, pair.source);
    MaskPair labels = compute_gt_masks(xt, pair.reference, residual, mask_threshold);

    IterationLoss il;
    il.alpha_x = clamp_alpha(static_cast<double>(count_ones(labels.x)) / static_cast<double>(labels.x.size()));
    il.alpha_y = clamp_alpha(static_cast<double>(count_ones(labels.y)) / static_cast<double>(labels.y.size()));
    Var ml = diff::add(mask_loss(rec.mask_x_var, labels.x, il.alpha_x), mask_loss(rec.mask_y_var, labels.y, il.alpha_y));
    Var rl = reg_loss(rec.q, rec.t, residual.rotation, residual.translation, lambda);
    il.mask_loss = ml.scalar();
    il.reg_loss = rl.scalar();
    {
      const Quaternion q = quaternion_of(rec.q);
      const Quaternion qg = q.dot(residual.rotation) < 0.0 ? -residual.rotation : residual.rotation;
      il.rot_term = std::abs(q.w - qg.w) + std::abs(q.x - qg.x) + std::abs(q.y - qg.y) + std::abs(q.z - qg.z);
      il.trans_term = (vec3_of(rec.t) - residual.translation).norm();
    }
    il.label_x = std::move(labels.x);
    il.label_y = std::move(labels.y);
    Var step = diff::add(ml, rl);
    total = total.valid() ? diff::add(total, step) : step;
    out.iterations.push_back(std::move(il));
  }
  out.root = total;
  out.total = total.scalar();
  return out;
}

}  // namespace overlapreg
