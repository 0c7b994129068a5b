// overlapreg command-line front end.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include <overlapreg/experiments.hpp>
#include <overlapreg/io.hpp>

using namespace overlapreg;
namespace fs = std::filesystem;

namespace {

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << j.dump(2) << '\n';
  if (!f) throw std::runtime_error("write failed for " + path.string());
}

json read_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

std::optional<RigidTransform> read_gt(const std::string& path) {
  if (path.empty()) return std::nullopt;
  return transform_from_json(read_json(path));
}

json probabilities(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

std::string threshold_bits(const Eigen::VectorXd& v) {
  BinaryMask m(static_cast<std::size_t>(v.size()));
  for (Index i = 0; i < v.size(); ++i) m[static_cast<std::size_t>(i)] = v(i) >= 0.5;
  return mask_to_bits(m);
}

json iso_json(const RigidTransform& pred, const RigidTransform& gt) {
  const IsotropicError e = isotropic_errors(pred, gt);
  return {{"iso_rot", e.rot_deg}, {"iso_trans", e.trans}};
}

DatasetSpec dataset_from(const std::string& config_path) {
  if (config_path.empty()) return {};
  const json j = read_json(config_path);
  DatasetSpec d;
  from_json(j.contains("dataset") ? j["dataset"] : j, d);
  return d;
}

OmnetModel load_model(const std::string& ckpt) { return OmnetModel::from_checkpoint(nn::load_checkpoint(ckpt)); }

struct SweepArgs {
  std::string ckpt, out_dir = ".", config;
  std::uint64_t seed = 0;
  std::size_t trials = 20;
};

void add_sweep_args(CLI::App* cmd, SweepArgs& a) {
  cmd->add_option("--ckpt", a.ckpt, "model checkpoint")->required();
  cmd->add_option("--seed", a.seed, "evaluation seed");
  cmd->add_option("--trials", a.trials, "pairs per table row")->check(CLI::PositiveNumber);
  cmd->add_option("--out-dir", a.out_dir, "output directory");
  cmd->add_option("--config", a.config, "JSON with a dataset section (train config or bare dataset spec)");
}

SweepOptions sweep_options(const SweepArgs& a) {
  SweepOptions o;
  o.trials = a.trials;
  o.seed = a.seed;
  o.dataset = dataset_from(a.config);
  return o;
}

void emit_table(const SweepArgs& a, const std::string& stem, const Table& t, const std::string& x, const std::vector<std::string>& ys,
                const std::string& title) {
  fs::create_directories(a.out_dir);
  write_csv(fs::path(a.out_dir) / (stem + ".csv"), t);
  write_svg_plot(fs::path(a.out_dir) / (stem + ".svg"), t, x, ys, title, "mean isotropic rotation error (deg)");
  write_csv(std::cout, t);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Partial-to-partial point cloud registration with learned overlap masks"};
  app.require_subcommand(1);

  // datagen
  auto* gen = app.add_subcommand("datagen", "write a fixed pair set (PLY clouds + JSON-lines manifest)");
  std::size_t gen_count = 10;
  std::uint64_t gen_seed = 0;
  std::string gen_out = "data", gen_config, gen_name = "pairs";
  std::optional<double> gen_overlap;
  gen->add_option("--count", gen_count, "number of pairs")->check(CLI::PositiveNumber);
  gen->add_option("--seed", gen_seed, "set seed");
  gen->add_option("--out-dir", gen_out, "output directory");
  gen->add_option("--name", gen_name, "manifest stem");
  gen->add_option("--config", gen_config, "JSON with a dataset section");
  gen->add_option("--overlap", gen_overlap, "target source overlap ratio in (0, 1]");

  // register
  auto* reg = app.add_subcommand("register", "register two clouds with a trained model");
  std::string reg_ckpt, reg_src, reg_ref, reg_out = "result.json", reg_gt;
  std::optional<std::size_t> reg_iters;
  reg->add_option("--ckpt", reg_ckpt, "model checkpoint")->required();
  reg->add_option("--src", reg_src, "source PLY (X)")->required();
  reg->add_option("--ref", reg_ref, "reference PLY (Y)")->required();
  reg->add_option("--out", reg_out, "result JSON");
  reg->add_option("--gt", reg_gt, "ground-truth transform JSON ({\"q\":[w,x,y,z],\"t\":[x,y,z]})");
  reg->add_option("--iterations", reg_iters, "override the iteration count")->check(CLI::PositiveNumber);

  // icp
  auto* icp = app.add_subcommand("icp", "register two clouds with point-to-point ICP");
  std::string icp_src, icp_ref, icp_out = "result.json", icp_gt;
  IcpConfig icp_cfg;
  std::optional<double> icp_trim, icp_maxd;
  icp->add_option("--src", icp_src, "source PLY")->required();
  icp->add_option("--ref", icp_ref, "reference PLY")->required();
  icp->add_option("--out", icp_out, "result JSON");
  icp->add_option("--gt", icp_gt, "ground-truth transform JSON");
  icp->add_option("--max-iterations", icp_cfg.max_iterations, "alignment steps");
  icp->add_option("--eps", icp_cfg.convergence_eps, "RMS change that counts as converged");
  icp->add_option("--trim", icp_trim, "keep this fraction of closest correspondences");
  icp->add_option("--max-dist", icp_maxd, "reject correspondences farther than this");

  // train
  auto* tr = app.add_subcommand("train", "train a model");
  std::string tr_config, tr_resume, tr_out, tr_log;
  tr->add_option("--config", tr_config, "train config JSON (missing fields take desk defaults)");
  tr->add_option("--resume", tr_resume, "checkpoint to continue from");
  tr->add_option("--out", tr_out, "checkpoint path (overrides config)");
  tr->add_option("--log", tr_log, "CSV metrics log (overrides config)");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a manifest");
  std::string ev_ckpt, ev_manifest, ev_out = "report.json";
  ev->add_option("--ckpt", ev_ckpt, "model checkpoint")->required();
  ev->add_option("--manifest", ev_manifest, "pair manifest (JSON lines)")->required();
  ev->add_option("--out", ev_out, "report JSON");

  // experiments
  SweepArgs so_args, sn_args, si_args;
  auto* so = app.add_subcommand("sweep-overlap", "errors against overlap ratio, model and ICP");
  add_sweep_args(so, so_args);
  std::vector<double> ratios{1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1};
  so->add_option("--ratios", ratios, "overlap ratios")->delimiter(',');
  auto* sn = app.add_subcommand("sweep-noise", "errors against noise sigma, model and ICP");
  add_sweep_args(sn, sn_args);
  std::vector<double> sigmas{0.0, 0.01, 0.02, 0.03, 0.04, 0.05};
  sn->add_option("--sigmas", sigmas, "noise standard deviations")->delimiter(',');
  auto* si = app.add_subcommand("study-iters", "errors after each iteration");
  add_sweep_args(si, si_args);
  std::size_t max_n = 4;
  si->add_option("--max-n", max_n, "iterations to run")->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      const DatasetSpec ds = dataset_from(gen_config);
      std::vector<RegistrationPair> pairs;
      if (gen_overlap) {
        SweepOptions o;
        o.trials = gen_count;
        o.seed = gen_seed;
        o.dataset = ds;
        pairs = make_overlap_set(o, *gen_overlap);
      } else {
        pairs = make_eval_set(ds, gen_count, gen_seed);
      }
      const fs::path manifest = fs::path(gen_out) / (gen_name + ".jsonl");
      write_manifest(manifest, pairs);
      // standalone ground truth for register/icp --gt
      for (std::size_t i = 0; i < pairs.size(); ++i) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%05zu", i);
        write_json(fs::path(gen_out) / (gen_name + "_" + buf + "_gt.json"), transform_to_json(pairs[i].gt));
      }
      std::cout << "wrote " << pairs.size() << " pairs to " << manifest.string() << '\n';
    } else if (*reg) {
      const OmnetModel model = load_model(reg_ckpt);
      const PointCloud x = ply::read(reg_src), y = ply::read(reg_ref);
      const auto gt = read_gt(reg_gt);
      RunOptions ro;
      ro.iterations = reg_iters;
      const IterationTrace t = infer(model, x, y, ro);
      json out{{"transform", transform_to_json(t.final_transform())}};
      for (std::size_t i = 0; i < t.iterations.size(); ++i) {
        const auto& r = t.iterations[i];
        json it{{"iteration", i + 1}, {"transform", transform_to_json(r.accumulated)}, {"zero_quaternion", r.zero_quaternion}};
        if (gt) it.update(iso_json(r.accumulated, *gt));
        out["iterations"].push_back(it);
      }
      const auto& last = t.iterations.back();
      out["mask_x"] = probabilities(last.mask_x);
      out["mask_y"] = probabilities(last.mask_y);
      out["mask_x_bits"] = threshold_bits(last.mask_x);
      out["mask_y_bits"] = threshold_bits(last.mask_y);
      if (gt) out["error"] = iso_json(t.final_transform(), *gt);
      write_json(reg_out, out);
    } else if (*icp) {
      icp_cfg.trim_fraction = icp_trim;
      icp_cfg.max_correspondence_dist = icp_maxd;
      const PointCloud x = ply::read(icp_src), y = ply::read(icp_ref);
      const auto gt = read_gt(icp_gt);
      const IcpResult r = icp_register(x, y, RigidTransform::identity(), icp_cfg);
      json out{{"transform", transform_to_json(r.transform)}, {"residual_history", r.residual_history}, {"iterations", r.iterations},
               {"converged", r.converged},                    {"degenerate", r.degenerate}};
      if (r.degenerate) out["degeneracy"] = r.degeneracy;
      if (gt) out["error"] = iso_json(r.transform, *gt);
      write_json(icp_out, out);
      if (r.degenerate) std::cerr << "warning: " << r.degeneracy << '\n';
    } else if (*tr) {
      TrainConfig cfg = tr_config.empty() ? TrainConfig{} : load_train_config(tr_config);
      if (!tr_out.empty()) cfg.checkpoint_path = tr_out;
      if (!tr_log.empty()) cfg.log_path = tr_log;
      if (cfg.checkpoint_path.empty()) cfg.checkpoint_path = "model.omrg";
      std::optional<TrainState> resume;
      if (!tr_resume.empty()) resume = TrainState::from_checkpoint(nn::load_checkpoint(tr_resume));
      const TrainResult r = train(cfg, std::move(resume), [](const StepLog& row) {
        if (row.step % 100 == 0) std::cout << "step " << row.step << " lr " << row.lr << " loss " << row.total << std::endl;
      });
      std::cout << "saved " << cfg.checkpoint_path << " after " << r.state.step << " steps\n";
    } else if (*ev) {
      const OmnetModel model = load_model(ev_ckpt);
      const auto pairs = read_manifest(ev_manifest);
      const EvalReport r = evaluate(model, pairs);
      json out{{"final", report_to_json(r.final)}, {"zero_quaternions", r.zero_quaternions}};
      for (std::size_t i = 0; i < r.per_iteration.size(); ++i) {
        json e = report_to_json(r.per_iteration[i]);
        e["iteration"] = i;
        out["per_iteration"].push_back(e);
      }
      for (std::size_t i = 0; i < r.mask_per_iteration.size(); ++i) {
        const auto& m = r.mask_per_iteration[i];
        out["masks"].push_back({{"iteration", i + 1}, {"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1}});
      }
      const auto& b = r.all_overlap_baseline;
      out["all_overlap_baseline"] = {{"precision", b.precision}, {"recall", b.recall}, {"f1", b.f1}};
      write_json(ev_out, out);
    } else if (*so) {
      const Table t = overlap_sweep(load_model(so_args.ckpt), ratios, sweep_options(so_args));
      emit_table(so_args, "overlap_sweep", t, "ratio", {"omnet_iso_rot", "icp_iso_rot"}, "Rotation error vs overlap ratio");
    } else if (*sn) {
      const Table t = noise_sweep(load_model(sn_args.ckpt), sigmas, sweep_options(sn_args));
      emit_table(sn_args, "noise_sweep", t, "sigma", {"omnet_iso_rot", "icp_iso_rot"}, "Rotation error vs noise");
    } else if (*si) {
      const SweepOptions o = sweep_options(si_args);
      const IterationStudy s = iteration_study(load_model(si_args.ckpt), max_n, make_eval_set(o.dataset, o.trials, o.seed));
      emit_table(si_args, "iteration_study", s.table, "iteration", {"iso_rot"}, "Rotation error per iteration");
      write_json(fs::path(si_args.out_dir) / "iteration_study_initial.json", report_to_json(s.initial));
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
