#pragma once

// Iterative overlap-mask registration network: per-point feature MLP f, fusion
// MLP g, mask head h and regression head r, unrolled for N iterations.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "diff.hpp"
#include "geometry.hpp"
#include "nn.hpp"

namespace overlapreg {

using diff::Index;
using diff::Matrix;
using diff::Tape;
using diff::Var;

struct OmnetConfig {
  std::size_t iterations = 4;
  std::vector<Index> feature_widths{64, 128, 256};
  std::vector<Index> fusion_widths{256, 128};
  std::vector<Index> mask_widths{64, 2};
  std::vector<Index> regression_widths{256, 128, 7};
  /// Masks predicted at iterations >= this index feed the next iteration;
  /// earlier iterations pass all-ones forward.
  std::size_t mask_start_iteration = 2;
  std::optional<std::size_t> topk;
  double mask_floor = 1e-6;

  Index feature_dim() const { return feature_widths.empty() ? 0 : feature_widths.back(); }
  Index fusion_dim() const { return fusion_widths.empty() ? 0 : fusion_widths.back(); }
  Index mask_feature_dim() const { return mask_widths.size() < 2 ? 0 : mask_widths[mask_widths.size() - 2]; }

  void validate() const {
    auto fail = [](const std::string& why) { throw std::invalid_argument("OmnetConfig: " + why); };
    if (iterations < 1) fail("iterations must be >= 1");
    if (mask_start_iteration > iterations) fail("mask_start_iteration exceeds iterations");
    if (feature_widths.empty() || fusion_widths.empty()) fail("feature and fusion widths must be non-empty");
    if (mask_widths.size() < 2 || mask_widths.back() != 2) fail("mask head needs a hidden layer and 2 output classes");
    if (regression_widths.empty() || regression_widths.back() != 7) fail("regression head must end in 7 outputs");
    for (const auto* ws : {&feature_widths, &fusion_widths, &mask_widths, &regression_widths})
      for (auto w : *ws)
        if (w < 1) fail("layer widths must be positive");
    if (topk && *topk < 1) fail("topk must be >= 1");
    if (!(mask_floor > 0.0)) fail("mask_floor must be positive");
  }

  bool operator==(const OmnetConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const OmnetConfig& c) {
  j = nlohmann::json{{"iterations", c.iterations},
                     {"feature_widths", c.feature_widths},
                     {"fusion_widths", c.fusion_widths},
                     {"mask_widths", c.mask_widths},
                     {"regression_widths", c.regression_widths},
                     {"mask_start_iteration", c.mask_start_iteration},
                     {"mask_floor", c.mask_floor}};
  j["topk"] = c.topk ? nlohmann::json(*c.topk) : nlohmann::json(nullptr);
}

inline void from_json(const nlohmann::json& j, OmnetConfig& c) {
  OmnetConfig d;
  c.iterations = j.value("iterations", d.iterations);
  c.feature_widths = j.value("feature_widths", d.feature_widths);
  c.fusion_widths = j.value("fusion_widths", d.fusion_widths);
  c.mask_widths = j.value("mask_widths", d.mask_widths);
  c.regression_widths = j.value("regression_widths", d.regression_widths);
  c.mask_start_iteration = j.value("mask_start_iteration", d.mask_start_iteration);
  c.mask_floor = j.value("mask_floor", d.mask_floor);
  if (j.contains("topk") && !j["topk"].is_null()) c.topk = j["topk"].get<std::size_t>();
  else c.topk.reset();
  c.validate();
}

class OmnetModel {
public:
  explicit OmnetModel(OmnetConfig cfg = {}, std::uint64_t seed = 0) : config_(std::move(cfg)) {
    config_.validate();
    const Index c = config_.feature_dim();
    f_ = nn::Mlp(params_, "f", 3, config_.feature_widths, true, derive_seed(seed, {1}));
    g_ = nn::Mlp(params_, "g", 3 * c, config_.fusion_widths, true, derive_seed(seed, {2}));
    h_ = nn::Mlp(params_, "h", config_.fusion_dim(), config_.mask_widths, false, derive_seed(seed, {3}));
    r_ = nn::Mlp(params_, "r", 2 * (config_.fusion_dim() + config_.mask_feature_dim()), config_.regression_widths, false, derive_seed(seed, {4}));
  }

  const OmnetConfig& config() const { return config_; }
  nn::ParameterStore& params() { return params_; }
  const nn::ParameterStore& params() const { return params_; }
  const nn::Mlp& f() const { return f_; }
  const nn::Mlp& g() const { return g_; }
  const nn::Mlp& h() const { return h_; }
  const nn::Mlp& r() const { return r_; }

  std::string config_json() const { return nlohmann::json(config_).dump(); }

  nn::Checkpoint to_checkpoint(const nn::AdamState& opt = {}) const { return {config_json(), params_, opt}; }

  /// Rebuilds the architecture from the embedded config and loads weights,
  /// rejecting any name/shape mismatch.
  static OmnetModel from_checkpoint(const nn::Checkpoint& ck) {
    OmnetConfig cfg;
    try {
      cfg = nlohmann::json::parse(ck.config_json).get<OmnetConfig>();
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(std::string("checkpoint: unreadable model config: ") + e.what());
    }
    OmnetModel m(cfg);
    nn::assign_compatible(m.params_, ck.params);
    return m;
  }

  /// Loads weights into this model's existing architecture.
  void load_parameters(const nn::ParameterStore& src) { nn::assign_compatible(params_, src); }

private:
  OmnetConfig config_;
  nn::ParameterStore params_;
  nn::Mlp f_, g_, h_, r_;
};

// ---------------------------------------------------------------------------
// Single-iteration building blocks
// ---------------------------------------------------------------------------

struct GlobalFeature {
  Var pointwise;  ///< f(cloud), N x C
  Var global;     ///< 1 x C
};

inline Var column_of_ones(Tape& tape, Index n) { return tape.constant(Matrix::Ones(n, 1)); }

inline Var cloud_var(Tape& tape, const PointCloud& cloud) { return tape.constant(cloud.to_matrix()); }

/// Masked global pooling of precomputed point features.
inline Var pool_global(const OmnetModel& model, const Var& pointwise, const Var& prev_mask) {
  if (prev_mask.rows() != pointwise.rows() || prev_mask.cols() != 1)
    throw std::invalid_argument("extract_global_feature: mask length " + std::to_string(prev_mask.rows()) + " vs " +
                                std::to_string(pointwise.rows()) + " points");
  return diff::masked_maxpool(diff::pointwise_scale(pointwise, diff::floor_at(prev_mask, model.config().mask_floor)));
}

inline GlobalFeature extract_global_feature(const OmnetModel& model, const nn::Binding& b, const Var& cloud, const Var& prev_mask) {
  if (cloud.cols() != 3) throw std::invalid_argument("extract_global_feature: cloud must be N x 3, got " + diff::shape_str(cloud.value()));
  Var f = model.f().forward(b, cloud);
  return {f, pool_global(model, f, prev_mask)};
}

struct MaskOutputs {
  Var g_x, g_y;        ///< fused point features
  Var h_x, h_y;        ///< mask-head hidden features
  Var mask_x, mask_y;  ///< overlap probabilities gated by the previous mask, N x 1
};

namespace detail {

/// g(f ⊕ F_own ⊕ F_other). The first layer is evaluated blockwise: the two
/// global features contribute one row that is broadcast to every point.
inline Var fuse(const OmnetModel& model, const nn::Binding& b, const Var& f, const Var& own, const Var& other) {
  const Index c = model.config().feature_dim();
  if (f.cols() != c || own.cols() != c || other.cols() != c || own.rows() != 1 || other.rows() != 1)
    throw std::invalid_argument("fuse_and_predict_masks: feature dims " + diff::shape_str(f.value()) + ", " + diff::shape_str(own.value()) + ", " +
                                diff::shape_str(other.value()) + " do not match feature_dim " + std::to_string(c));
  const nn::Mlp& g = model.g();
  const Var& w = b[g.weight_ids[0]];
  Var local = diff::matmul(f, diff::slice_rows(w, 0, c));
  Var globals = diff::add_bias(diff::matmul(diff::concat_cols({own, other}), diff::slice_rows(w, c, 2 * c)), b[g.bias_ids[0]]);
  Var x = diff::relu(diff::add(local, diff::repeat_rows(globals, f.rows())));
  return g.forward_range(b, x, 1, g.layers());
}

struct MaskHead {
  Var hidden;
  Var mask;
};

inline MaskHead mask_head(const OmnetModel& model, const nn::Binding& b, const Var& fused, const Var& prev) {
  const nn::Mlp& h = model.h();
  Var hidden = h.forward_range(b, fused, 0, h.layers() - 1);
  Var prob = diff::softmax_rows(h.forward_range(b, hidden, h.layers() - 1, h.layers()));
  return {hidden, diff::hadamard(diff::slice_cols(prob, 1, 1), prev)};
}

}  // namespace detail

inline MaskOutputs fuse_and_predict_masks(const OmnetModel& model, const nn::Binding& b, const Var& f_x, const Var& F_x, const Var& F_y,
                                          const Var& f_y, const Var& prev_x, const Var& prev_y) {
  if (prev_x.rows() != f_x.rows() || prev_y.rows() != f_y.rows())
    throw std::invalid_argument("fuse_and_predict_masks: mask lengths do not match point counts");
  Var gx = detail::fuse(model, b, f_x, F_x, F_y);
  Var gy = detail::fuse(model, b, f_y, F_y, F_x);
  auto hx = detail::mask_head(model, b, gx, prev_x);
  auto hy = detail::mask_head(model, b, gy, prev_y);
  return {gx, gy, hx.hidden, hy.hidden, hx.mask, hy.mask};
}

/// Row selector keeping the k largest mask values (ties to the lower index).
inline std::vector<std::uint8_t> topk_rows(const Matrix& mask, std::size_t k) {
  const auto n = static_cast<std::size_t>(mask.rows());
  std::vector<std::uint8_t> keep(n, 0);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const std::size_t kk = std::min(k, n);
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(kk), idx.end(), [&](std::size_t a, std::size_t b) {
    const double va = mask(static_cast<Index>(a), 0), vb = mask(static_cast<Index>(b), 0);
    return va > vb || (va == vb && a < b);
  });
  for (std::size_t i = 0; i < kk; ++i) keep[idx[i]] = 1;
  return keep;
}

struct Regression {
  Var q;  ///< 1 x 4 unit quaternion (w, x, y, z)
  Var t;  ///< 1 x 3
  bool zero_quaternion = false;
};

inline Regression regress_transform(const OmnetModel& model, const nn::Binding& b, const Var& g_x, const Var& h_x, const Var& mask_x, const Var& g_y,
                                    const Var& h_y, const Var& mask_y, std::optional<std::size_t> topk = std::nullopt) {
  auto pooled = [&](const Var& g, const Var& h, const Var& m) {
    if (g.rows() != h.rows() || m.rows() != g.rows())
      throw std::invalid_argument("regress_transform: row mismatch " + diff::shape_str(g.value()) + ", " + diff::shape_str(h.value()) + ", " +
                                  diff::shape_str(m.value()));
    Var stack = diff::concat_cols({g, diff::pointwise_scale(h, m)});
    return topk ? diff::masked_maxpool(stack, topk_rows(m.value(), *topk)) : diff::masked_maxpool(stack);
  };
  Var z = diff::concat_cols({pooled(g_x, h_x, mask_x), pooled(g_y, h_y, mask_y)});
  Var out = model.r().forward(b, z);
  Tape& tape = *out.tape();
  Regression res;
  res.t = diff::slice_cols(out, 0, 3);
  Var raw = diff::slice_cols(out, 3, 4);
  if (raw.value().norm() < 1e-12) {
    Matrix id = Matrix::Zero(1, 4);
    id(0, 0) = 1.0;
    res.q = tape.constant(std::move(id));
    res.zero_quaternion = true;
  } else {
    res.q = diff::divide_by_scalar(raw, diff::norm2(raw));
  }
  return res;
}

inline Quaternion quaternion_of(const Var& q) {
  const Matrix& v = q.value();
  return Quaternion{v(0, 0), v(0, 1), v(0, 2), v(0, 3)};
}

inline Vec3 vec3_of(const Var& t) {
  const Matrix& v = t.value();
  return {v(0, 0), v(0, 1), v(0, 2)};
}

// ---------------------------------------------------------------------------
// Iterative unrolling
// ---------------------------------------------------------------------------

struct IterationRecord {
  RigidTransform step;                ///< {q^i, t^i}
  RigidTransform accumulated_before;  ///< transform applied to X at the start of this iteration
  RigidTransform accumulated;         ///< compose(step, accumulated_before)
  Eigen::VectorXd mask_x, mask_y;     ///< gated probabilities M^i
  Eigen::RowVectorXd global_x, global_y;
  bool zero_quaternion = false;
  std::uint8_t masks_applied = 0;  ///< whether this iteration consumed predicted masks

  // graph handles; valid only while the producing tape is alive
  Var q, t, mask_x_var, mask_y_var;
};

struct IterationTrace {
  std::vector<IterationRecord> iterations;

  const RigidTransform& final_transform() const {
    if (iterations.empty()) throw std::logic_error("IterationTrace: empty");
    return iterations.back().accumulated;
  }
  std::vector<RigidTransform> accumulated_inputs() const {
    std::vector<RigidTransform> v;
    for (const auto& r : iterations) v.push_back(r.accumulated_before);
    return v;
  }
};

struct RunOptions {
  /// Overrides the accumulated transform entering each iteration (used to
  /// hold gradient-stopped inputs fixed in finite-difference checks).
  std::optional<std::vector<RigidTransform>> replay_inputs;
  std::optional<std::size_t> iterations;  ///< defaults to config().iterations
};

inline IterationTrace run_iterative(const OmnetModel& model, Tape& tape, const nn::Binding& b, const PointCloud& x, const PointCloud& y,
                                    const RunOptions& opts = {}) {
  const OmnetConfig& cfg = model.config();
  const std::size_t n_iter = opts.iterations.value_or(cfg.iterations);
  if (n_iter < 1) throw std::invalid_argument("run_iterative: iterations must be >= 1");
  if (x.empty() || y.empty()) throw std::invalid_argument("run_iterative: empty input cloud");
  if (opts.replay_inputs && opts.replay_inputs->size() < n_iter) throw std::invalid_argument("run_iterative: replay list shorter than iteration count");

  const Index nx = static_cast<Index>(x.size()), ny = static_cast<Index>(y.size());
  Var prev_x = column_of_ones(tape, nx), prev_y = column_of_ones(tape, ny);
  // Y never moves, so its point features are shared by every iteration.
  Var f_y = model.f().forward(b, cloud_var(tape, y));

  IterationTrace trace;
  RigidTransform acc = RigidTransform::identity();
  for (std::size_t i = 1; i <= n_iter; ++i) {
    if (opts.replay_inputs) acc = (*opts.replay_inputs)[i - 1];
    IterationRecord rec;
    rec.accumulated_before = acc;
    rec.masks_applied = (i > 1 && i - 1 >= cfg.mask_start_iteration) ? 1 : 0;

    Var xt = cloud_var(tape, apply(acc, x));
    Var f_x = model.f().forward(b, xt);
    Var F_x = pool_global(model, f_x, prev_x);
    Var F_y = pool_global(model, f_y, prev_y);
    MaskOutputs mo = fuse_and_predict_masks(model, b, f_x, F_x, F_y, f_y, prev_x, prev_y);
    Regression reg = regress_transform(model, b, mo.g_x, mo.h_x, prev_x, mo.g_y, mo.h_y, prev_y, rec.masks_applied ? cfg.topk : std::nullopt);

    if (!reg.q.value().allFinite() || !reg.t.value().allFinite())
      throw std::domain_error("run_iterative: non-finite pose at iteration " + std::to_string(i));
    // Gradient stop: the next iteration sees the pose only as data.
    Var q_stop = diff::detach(reg.q), t_stop = diff::detach(reg.t);
    rec.step = RigidTransform(quaternion_of(q_stop), vec3_of(t_stop));
    rec.accumulated = compose(rec.step, acc);
    rec.mask_x = mo.mask_x.value().col(0);
    rec.mask_y = mo.mask_y.value().col(0);
    rec.global_x = F_x.value().row(0);
    rec.global_y = F_y.value().row(0);
    rec.zero_quaternion = reg.zero_quaternion;
    rec.q = reg.q;
    rec.t = reg.t;
    rec.mask_x_var = mo.mask_x;
    rec.mask_y_var = mo.mask_y;

    if (i >= cfg.mask_start_iteration) {
      prev_x = mo.mask_x;
      prev_y = mo.mask_y;
    } else {
      prev_x = column_of_ones(tape, nx);
      prev_y = column_of_ones(tape, ny);
    }
    acc = rec.accumulated;
    trace.iterations.push_back(std::move(rec));
  }
  return trace;
}

/// Inference without gradient bookkeeping; graph handles are cleared.
inline IterationTrace infer(const OmnetModel& model, const PointCloud& x, const PointCloud& y, const RunOptions& opts = {}) {
  Tape tape;
  nn::Binding b(tape, model.params(), false);
  IterationTrace tr = run_iterative(model, tape, b, x, y, opts);
  for (auto& r : tr.iterations) r.q = r.t = r.mask_x_var = r.mask_y_var = Var{};
  return tr;
}

}  // namespace overlapreg
