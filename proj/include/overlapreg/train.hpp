#pragma once

// Training loop, schedules, held-out datasets and evaluation.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "datagen.hpp"
#include "geometry.hpp"
#include "loss.hpp"
#include "model.hpp"
#include "nn.hpp"

namespace overlapreg {

// ---------------------------------------------------------------------------
// Dataset description
// ---------------------------------------------------------------------------

/// Which surfaces pairs are drawn from. "random" draws a fresh composite per
/// pair; "sphere", "box", "cylinder", "torus" use fixed primitives; "ply:<path>"
/// loads a file.
struct DatasetSpec {
  std::string shape = "random";
  std::size_t n_points = 256;
  PairOptions pair = desk_pair_options();

  static PairOptions desk_pair_options() {
    PairOptions o;
    o.partial = PartialMode::knn;
    o.keep = 96;
    o.noise_sigma = 0.01;
    o.noise_clip = 0.05;
    // 0.1 sits below the sample spacing at 256 points; scaled by sqrt(2048 / 256)
    o.mask_threshold = 0.25;
    return o;
  }
};

inline ShapeSpec shape_for(const DatasetSpec& ds, std::uint64_t seed) {
  if (ds.shape == "random") return random_shape(seed);
  if (ds.shape == "sphere") return ShapeSpec::sphere(1.0);
  if (ds.shape == "box") return ShapeSpec::box(1.0, 0.7, 0.4);
  if (ds.shape == "cylinder") return ShapeSpec::cylinder(0.4, 1.2);
  if (ds.shape == "torus") return ShapeSpec::torus(0.8, 0.25);
  if (ds.shape.rfind("ply:", 0) == 0) return ShapeSpec::ply(ds.shape.substr(4));
  throw std::invalid_argument("unknown shape family '" + ds.shape + "'");
}

inline RegistrationPair make_dataset_pair(const DatasetSpec& ds, std::uint64_t seed) {
  return make_pair_twice_sampled(shape_for(ds, derive_seed(seed, {0x5E})), ds.n_points, ds.pair, seed);
}

inline constexpr std::uint64_t kTrainStream = 0x7472;
inline constexpr std::uint64_t kEvalStream = 0x6576;

/// Fixed evaluation set; disjoint seed stream from training batches.
inline std::vector<RegistrationPair> make_eval_set(const DatasetSpec& ds, std::size_t count, std::uint64_t seed) {
  std::vector<RegistrationPair> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(make_dataset_pair(ds, derive_seed(seed, {kEvalStream, i})));
  return out;
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct TrainConfig {
  std::size_t total_steps = 2000;
  std::size_t batch_size = 8;
  double lr = 1e-3;
  std::size_t lr_decay_step = 1700;
  double lr_decay_factor = 0.1;
  double lambda = 4.0;
  std::uint64_t seed = 0;
  DatasetSpec dataset;
  OmnetConfig model;
  nn::AdamConfig adam;
  std::size_t checkpoint_every = 0;  ///< 0 disables periodic checkpoints
  std::string checkpoint_path;       ///< final (and periodic) checkpoint
  std::string log_path;              ///< CSV metrics log

  void validate() const {
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    if (lr_decay_step > total_steps) throw std::invalid_argument("TrainConfig: lr_decay_step exceeds total_steps");
    if (!(lr > 0.0)) throw std::invalid_argument("TrainConfig: lr must be positive");
    if (!(lr_decay_factor > 0.0)) throw std::invalid_argument("TrainConfig: lr_decay_factor must be positive");
    if (lambda < 0.0) throw std::invalid_argument("TrainConfig: lambda must be non-negative");
    model.validate();
  }

  /// Learning rate used for the 1-based optimizer step `step`.
  double lr_at(std::size_t step) const { return step <= lr_decay_step ? lr : lr * lr_decay_factor; }
};

inline const char* partial_name(PartialMode m) {
  switch (m) {
    case PartialMode::none: return "none";
    case PartialMode::knn: return "knn";
    case PartialMode::halfspace: return "halfspace";
  }
  return "none";
}

inline PartialMode partial_from_name(const std::string& s) {
  if (s == "none") return PartialMode::none;
  if (s == "knn") return PartialMode::knn;
  if (s == "halfspace") return PartialMode::halfspace;
  throw std::invalid_argument("unknown partial mode '" + s + "' (expected none, knn or halfspace)");
}

inline void to_json(nlohmann::json& j, const PairOptions& o) {
  j = nlohmann::json{{"rot_range_deg", {o.ranges.rot_lo_deg, o.ranges.rot_hi_deg}},
                     {"trans_range", {o.ranges.trans_lo, o.ranges.trans_hi}},
                     {"partial", partial_name(o.partial)},
                     {"keep", o.keep},
                     {"retain_frac", o.retain_frac},
                     {"downsample_to", o.downsample_to},
                     {"noise_sigma", o.noise_sigma},
                     {"noise_clip", o.noise_clip},
                     {"mask_threshold", o.mask_threshold},
                     {"samplings", o.samplings},
                     {"twice_sampled", o.twice_sampled},
                     {"max_rejections", o.max_rejections}};
}

inline void from_json(const nlohmann::json& j, PairOptions& o) {
  if (j.contains("rot_range_deg")) {
    const auto r = j["rot_range_deg"].get<std::vector<double>>();
    if (r.size() != 2) throw std::invalid_argument("rot_range_deg needs two values");
    o.ranges.rot_lo_deg = r[0], o.ranges.rot_hi_deg = r[1];
  }
  if (j.contains("trans_range")) {
    const auto r = j["trans_range"].get<std::vector<double>>();
    if (r.size() != 2) throw std::invalid_argument("trans_range needs two values");
    o.ranges.trans_lo = r[0], o.ranges.trans_hi = r[1];
  }
  if (j.contains("partial")) o.partial = partial_from_name(j["partial"].get<std::string>());
  o.keep = j.value("keep", o.keep);
  o.retain_frac = j.value("retain_frac", o.retain_frac);
  o.downsample_to = j.value("downsample_to", o.downsample_to);
  o.noise_sigma = j.value("noise_sigma", o.noise_sigma);
  o.noise_clip = j.value("noise_clip", o.noise_clip);
  o.mask_threshold = j.value("mask_threshold", o.mask_threshold);
  o.samplings = j.value("samplings", o.samplings);
  o.twice_sampled = j.value("twice_sampled", o.twice_sampled);
  o.max_rejections = j.value("max_rejections", o.max_rejections);
}

inline void to_json(nlohmann::json& j, const DatasetSpec& d) { j = nlohmann::json{{"shape", d.shape}, {"n_points", d.n_points}, {"pair", d.pair}}; }

inline void from_json(const nlohmann::json& j, DatasetSpec& d) {
  d.shape = j.value("shape", d.shape);
  d.n_points = j.value("n_points", d.n_points);
  if (j.contains("pair")) {
    PairOptions o = d.pair;
    from_json(j["pair"], o);
    d.pair = o;
  }
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"total_steps", c.total_steps},
                     {"batch_size", c.batch_size},
                     {"lr", c.lr},
                     {"lr_decay_step", c.lr_decay_step},
                     {"lr_decay_factor", c.lr_decay_factor},
                     {"lambda", c.lambda},
                     {"seed", c.seed},
                     {"dataset", c.dataset},
                     {"model", c.model},
                     {"adam", {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}}},
                     {"checkpoint_every", c.checkpoint_every},
                     {"checkpoint_path", c.checkpoint_path},
                     {"log_path", c.log_path}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.total_steps = j.value("total_steps", c.total_steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.lr_decay_step = j.value("lr_decay_step", c.lr_decay_step);
  c.lr_decay_factor = j.value("lr_decay_factor", c.lr_decay_factor);
  c.lambda = j.value("lambda", c.lambda);
  c.seed = j.value("seed", c.seed);
  if (j.contains("dataset")) from_json(j["dataset"], c.dataset);
  if (j.contains("model")) c.model = j["model"].get<OmnetConfig>();
  if (j.contains("adam")) {
    c.adam.beta1 = j["adam"].value("beta1", c.adam.beta1);
    c.adam.beta2 = j["adam"].value("beta2", c.adam.beta2);
    c.adam.eps = j["adam"].value("eps", c.adam.eps);
  }
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.checkpoint_path = j.value("checkpoint_path", c.checkpoint_path);
  c.log_path = j.value("log_path", c.log_path);
  c.validate();
}

inline TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("train config: cannot open " + path.string());
  try {
    return nlohmann::json::parse(f).get<TrainConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("train config " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Loop
// ---------------------------------------------------------------------------

struct TrainState {
  OmnetModel model;
  nn::AdamState adam;
  std::size_t step = 0;  ///< optimizer steps completed

  static TrainState fresh(const TrainConfig& cfg) {
    TrainState s{OmnetModel(cfg.model, derive_seed(cfg.seed, {0x4D})), {}, 0};
    s.adam = nn::AdamState::zeros_like(s.model.params());
    return s;
  }

  nn::Checkpoint checkpoint() const { return model.to_checkpoint(adam); }

  static TrainState from_checkpoint(const nn::Checkpoint& ck) {
    TrainState s{OmnetModel::from_checkpoint(ck), ck.optimizer, static_cast<std::size_t>(ck.optimizer.step)};
    if (s.adam.m.size() != s.model.params().size()) s.adam = nn::AdamState::zeros_like(s.model.params()), s.adam.step = s.step;
    return s;
  }
};

struct StepLog {
  std::size_t step = 0;
  double lr = 0.0;
  double mask_loss = 0.0;  ///< batch mean of the per-pair sum over iterations
  double reg_loss = 0.0;
  double total = 0.0;
};

class NonFiniteLoss : public std::runtime_error {
public:
  NonFiniteLoss(const std::string& what, SeedRecord rec) : std::runtime_error(what), record(rec) {}
  SeedRecord record;
};

inline std::uint64_t batch_pair_seed(const TrainConfig& cfg, std::size_t step, std::size_t b) { return derive_seed(cfg.seed, {kTrainStream, step, b}); }

/// One optimizer step (number state.step + 1) on a freshly generated batch.
inline StepLog train_step(TrainState& state, const TrainConfig& cfg) {
  const std::size_t step = state.step + 1;
  nn::ParameterStore& params = state.model.params();
  params.zero_grad();
  StepLog log;
  log.step = step;
  log.lr = cfg.lr_at(step);
  const double w = 1.0 / static_cast<double>(cfg.batch_size);
  for (std::size_t b = 0; b < cfg.batch_size; ++b) {
    const RegistrationPair pair = make_dataset_pair(cfg.dataset, batch_pair_seed(cfg, step, b));
    auto fail = [&](const std::string& what) {
      std::ostringstream msg;
      msg << what << " at step " << step << ", batch entry " << b << " (pair_seed " << pair.seed.pair_seed << ", samplings "
          << pair.seed.sampling_x << "/" << pair.seed.sampling_y << ", rejections " << pair.seed.rejections << ")";
      throw NonFiniteLoss(msg.str(), pair.seed);
    };
    Tape tape;
    nn::Binding bind(tape, params);
    IterationTrace trace;
    try {
      trace = run_iterative(state.model, tape, bind, pair.source, pair.reference);
    } catch (const std::domain_error&) {
      fail("non-finite pose");
    }
    const LossBreakdown loss = total_loss(trace, pair, cfg.lambda, cfg.dataset.pair.mask_threshold);
    if (!std::isfinite(loss.total)) fail("non-finite loss");
    tape.backward(loss.root);
    bind.accumulate_into(params, w);
    for (const auto& it : loss.iterations) {
      log.mask_loss += w * it.mask_loss;
      log.reg_loss += w * it.reg_loss;
    }
    log.total += w * loss.total;
  }
  nn::adam_step(params, state.adam, log.lr, cfg.adam);
  state.step = step;
  return log;
}

inline void write_log_header(std::ostream& o) { o << "step,lr,mask_loss,reg_loss,total\n"; }
inline void write_log_row(std::ostream& o, const StepLog& r) {
  o << r.step << ',' << std::setprecision(10) << r.lr << ',' << r.mask_loss << ',' << r.reg_loss << ',' << r.total << '\n';
}

struct TrainResult {
  TrainState state;
  std::vector<StepLog> log;
};

/// Runs optimizer steps until cfg.total_steps, starting fresh or from `resume`.
inline TrainResult train(const TrainConfig& cfg, std::optional<TrainState> resume = std::nullopt,
                         const std::function<void(const StepLog&)>& on_step = {}) {
  cfg.validate();
  TrainResult res{resume ? std::move(*resume) : TrainState::fresh(cfg), {}};
  if (!(res.state.model.config() == cfg.model)) throw std::invalid_argument("train: resumed model config differs from the training config");
  std::ofstream log_file;
  if (!cfg.log_path.empty()) {
    const bool append = resume.has_value() && std::filesystem::exists(cfg.log_path);
    log_file.open(cfg.log_path, append ? std::ios::app : std::ios::trunc);
    if (!log_file) throw std::runtime_error("train: cannot write log " + cfg.log_path);
    if (!append) write_log_header(log_file);
  }
  while (res.state.step < cfg.total_steps) {
    StepLog row = train_step(res.state, cfg);
    res.log.push_back(row);
    if (log_file.is_open()) write_log_row(log_file, row);
    if (on_step) on_step(row);
    if (cfg.checkpoint_every && !cfg.checkpoint_path.empty() && row.step % cfg.checkpoint_every == 0)
      nn::save_checkpoint(cfg.checkpoint_path, res.state.checkpoint());
  }
  if (!cfg.checkpoint_path.empty()) nn::save_checkpoint(cfg.checkpoint_path, res.state.checkpoint());
  return res;
}

/// Exponential moving average of the total loss column (alpha = weight of new samples).
inline std::vector<double> loss_ema(const std::vector<StepLog>& log, double alpha = 0.05) {
  std::vector<double> out;
  double e = 0.0;
  for (std::size_t i = 0; i < log.size(); ++i) {
    e = i == 0 ? log[i].total : (1.0 - alpha) * e + alpha * log[i].total;
    out.push_back(e);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct MaskMetrics {
  double precision = 0.0, recall = 0.0, f1 = 0.0;
};

/// Precision/recall/F1 of prob >= 0.5 against binary labels. Empty positive
/// sets on both sides count as perfect agreement.
inline MaskMetrics mask_metrics(const Eigen::VectorXd& prob, const BinaryMask& label) {
  if (static_cast<std::size_t>(prob.size()) != label.size()) throw std::invalid_argument("mask_metrics: length mismatch");
  double tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < label.size(); ++i) {
    const bool p = prob(static_cast<Index>(i)) >= 0.5;
    tp += p && label[i];
    fp += p && !label[i];
    fn += !p && label[i];
  }
  MaskMetrics m;
  m.precision = tp + fp > 0 ? tp / (tp + fp) : (fn > 0 ? 0.0 : 1.0);
  m.recall = tp + fn > 0 ? tp / (tp + fn) : 1.0;
  m.f1 = tp + fp + fn > 0 ? 2 * tp / (2 * tp + fp + fn) : 1.0;
  return m;
}

struct EvalReport {
  ErrorReport final;
  std::vector<ErrorReport> per_iteration;         ///< index 0: initial pose, i: after iteration i
  std::vector<MaskMetrics> mask_per_iteration;    ///< index i-1: masks of iteration i, averaged over pairs and clouds
  MaskMetrics all_overlap_baseline;               ///< predicting every point as overlapping
  std::vector<RigidTransform> predictions;
  std::size_t zero_quaternions = 0;
};

inline ErrorReport evaluate_predictions(const std::vector<RigidTransform>& preds, const std::vector<RegistrationPair>& pairs) {
  std::vector<RigidTransform> gts;
  gts.reserve(pairs.size());
  for (const auto& p : pairs) gts.push_back(p.gt);
  return anisotropic_errors(preds, gts);
}

inline EvalReport evaluate(const OmnetModel& model, const std::vector<RegistrationPair>& pairs, std::optional<std::size_t> iterations = std::nullopt) {
  if (pairs.empty()) throw std::invalid_argument("evaluate: empty dataset");
  const std::size_t n = iterations.value_or(model.config().iterations);
  std::vector<std::vector<RigidTransform>> per_iter(n + 1);
  std::vector<MaskMetrics> masks(n);
  MaskMetrics base;
  EvalReport rep;
  const double denom = 2.0 * static_cast<double>(pairs.size());
  for (const auto& p : pairs) {
    RunOptions opts;
    opts.iterations = n;
    const IterationTrace tr = infer(model, p.source, p.reference, opts);
    per_iter[0].push_back(RigidTransform::identity());
    for (std::size_t i = 0; i < n; ++i) {
      const auto& rec = tr.iterations[i];
      per_iter[i + 1].push_back(rec.accumulated);
      rep.zero_quaternions += rec.zero_quaternion;
      for (const auto& [prob, label] : {std::pair{&rec.mask_x, &p.mask_x}, std::pair{&rec.mask_y, &p.mask_y}}) {
        const MaskMetrics m = mask_metrics(*prob, *label);
        masks[i].precision += m.precision / denom;
        masks[i].recall += m.recall / denom;
        masks[i].f1 += m.f1 / denom;
      }
    }
    for (const auto* label : {&p.mask_x, &p.mask_y}) {
      const MaskMetrics m = mask_metrics(Eigen::VectorXd::Ones(static_cast<Index>(label->size())), *label);
      base.precision += m.precision / denom;
      base.recall += m.recall / denom;
      base.f1 += m.f1 / denom;
    }
  }
  for (const auto& preds : per_iter) rep.per_iteration.push_back(evaluate_predictions(preds, pairs));
  rep.final = rep.per_iteration.back();
  rep.mask_per_iteration = std::move(masks);
  rep.all_overlap_baseline = base;
  rep.predictions = per_iter.back();
  return rep;
}

}  // namespace overlapreg
