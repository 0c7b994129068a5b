#pragma once

// Experiment drivers: overlap-ratio sweep, noise sweep and iteration study,
// with CSV tables and SVG line plots.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "icp.hpp"
#include "train.hpp"

namespace overlapreg {

/// Column-oriented numeric table.
struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;

  std::size_t column(const std::string& name) const {
    auto it = std::find(columns.begin(), columns.end(), name);
    if (it == columns.end()) throw std::out_of_range("Table: no column '" + name + "'");
    return static_cast<std::size_t>(it - columns.begin());
  }
  double at(std::size_t row, const std::string& name) const { return rows.at(row).at(column(name)); }
};

inline void write_csv(std::ostream& o, const Table& t) {
  for (std::size_t c = 0; c < t.columns.size(); ++c) o << (c ? "," : "") << t.columns[c];
  o << '\n' << std::setprecision(10);
  for (const auto& r : t.rows) {
    for (std::size_t c = 0; c < r.size(); ++c) o << (c ? "," : "") << r[c];
    o << '\n';
  }
}

inline void write_csv(const std::filesystem::path& path, const Table& t) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  write_csv(f, t);
}

/// Static SVG line plot of the y columns against column x.
inline void write_svg_plot(const std::filesystem::path& path, const Table& t, const std::string& x, const std::vector<std::string>& ys,
                           const std::string& title, const std::string& y_label) {
  const double w = 640, h = 420, ml = 70, mr = 150, mt = 40, mb = 55;
  const std::size_t xc = t.column(x);
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = 0.0, y1 = -x0;
  for (const auto& r : t.rows) {
    x0 = std::min(x0, r[xc]), x1 = std::max(x1, r[xc]);
    for (const auto& y : ys) y1 = std::max(y1, r[t.column(y)]);
  }
  if (t.rows.empty() || !std::isfinite(x0)) x0 = 0, x1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (!(y1 > y0)) y1 = y0 + 1;
  auto px = [&](double v) { return ml + (v - x0) / (x1 - x0) * (w - ml - mr); };
  auto py = [&](double v) { return h - mb - (v - y0) / (y1 - y0) * (h - mt - mb); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << std::fixed << std::setprecision(2);
  f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  f << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  f << "<text x=\"" << w / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << title << "</text>\n";
  f << "<line x1=\"" << ml << "\" y1=\"" << h - mb << "\" x2=\"" << w - mr << "\" y2=\"" << h - mb << "\" stroke=\"black\"/>\n";
  f << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << h - mb << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double xv = x0 + (x1 - x0) * k / 4.0, yv = y0 + (y1 - y0) * k / 4.0;
    f << "<text x=\"" << px(xv) << "\" y=\"" << h - mb + 18 << "\" text-anchor=\"middle\">" << std::setprecision(3) << xv << "</text>\n";
    f << "<text x=\"" << ml - 8 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << yv << "</text>\n" << std::setprecision(2);
    f << "<line x1=\"" << ml << "\" y1=\"" << py(yv) << "\" x2=\"" << w - mr << "\" y2=\"" << py(yv) << "\" stroke=\"#ddd\"/>\n";
  }
  f << "<text x=\"" << (ml + w - mr) / 2 << "\" y=\"" << h - 15 << "\" text-anchor=\"middle\">" << x << "</text>\n";
  f << "<text transform=\"translate(18," << (mt + h - mb) / 2 << ") rotate(-90)\" text-anchor=\"middle\">" << y_label << "</text>\n";
  for (std::size_t s = 0; s < ys.size(); ++s) {
    const std::size_t yc = t.column(ys[s]);
    const char* col = colors[s % 6];
    f << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"2\" points=\"";
    for (const auto& r : t.rows) f << px(r[xc]) << ',' << py(r[yc]) << ' ';
    f << "\"/>\n";
    for (const auto& r : t.rows) f << "<circle cx=\"" << px(r[xc]) << "\" cy=\"" << py(r[yc]) << "\" r=\"3\" fill=\"" << col << "\"/>\n";
    f << "<rect x=\"" << w - mr + 12 << "\" y=\"" << mt + 18 * s << "\" width=\"12\" height=\"12\" fill=\"" << col << "\"/>\n";
    f << "<text x=\"" << w - mr + 30 << "\" y=\"" << mt + 18 * s + 10 << "\">" << ys[s] << "</text>\n";
  }
  f << "</svg>\n";
}

struct MethodErrors {
  double iso_rot = 0.0, iso_trans = 0.0;
};

inline MethodErrors mean_iso(const std::vector<RigidTransform>& preds, const std::vector<RegistrationPair>& pairs) {
  const ErrorReport r = evaluate_predictions(preds, pairs);
  return {r.iso_rot, r.iso_trans};
}

inline std::vector<RigidTransform> icp_predictions(const std::vector<RegistrationPair>& pairs, const IcpConfig& cfg = {}) {
  std::vector<RigidTransform> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back(icp_register(p.source, p.reference, RigidTransform::identity(), cfg).transform);
  return out;
}

inline std::vector<RigidTransform> model_predictions(const OmnetModel& model, const std::vector<RegistrationPair>& pairs) {
  std::vector<RigidTransform> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back(infer(model, p.source, p.reference).final_transform());
  return out;
}

struct SweepOptions {
  std::size_t trials = 20;
  std::uint64_t seed = 0;
  DatasetSpec dataset;
  IcpConfig icp;
};

/// Pairs at a controlled overlap ratio; shapes that cannot reach the ratio
/// are skipped and replaced by the next seed.
inline std::vector<RegistrationPair> make_overlap_set(const SweepOptions& o, double ratio) {
  std::vector<RegistrationPair> out;
  const std::size_t max_attempts = 20 * o.trials + 20;
  for (std::size_t k = 0; out.size() < o.trials && k < max_attempts; ++k) {
    const std::uint64_t s = derive_seed(o.seed, {0x0F, static_cast<std::uint64_t>(std::llround(ratio * 1000.0)), k});
    try {
      out.push_back(make_pair_at_overlap(shape_for(o.dataset, derive_seed(s, {0x5E})), ratio, o.dataset.n_points, o.dataset.pair, s));
    } catch (const std::invalid_argument&) {
    } catch (const std::runtime_error&) {
    }
  }
  if (out.size() < o.trials) throw std::runtime_error("overlap sweep: could not build " + std::to_string(o.trials) + " pairs at ratio " + std::to_string(ratio));
  return out;
}

inline Table overlap_sweep(const OmnetModel& model, const std::vector<double>& ratios, const SweepOptions& o) {
  if (ratios.empty()) throw std::invalid_argument("overlap_sweep: empty ratio list");
  for (double r : ratios)
    if (!(r > 0.0 && r <= 1.0)) throw std::invalid_argument("overlap_sweep: ratio " + std::to_string(r) + " outside (0, 1]");
  Table t{{"ratio", "achieved_alpha", "omnet_iso_rot", "omnet_iso_trans", "icp_iso_rot", "icp_iso_trans"}, {}};
  for (double r : ratios) {
    const auto pairs = make_overlap_set(o, r);
    double a = 0.0;
    for (const auto& p : pairs) a += p.alpha / static_cast<double>(pairs.size());
    const MethodErrors om = mean_iso(model_predictions(model, pairs), pairs);
    const MethodErrors ic = mean_iso(icp_predictions(pairs, o.icp), pairs);
    t.rows.push_back({r, a, om.iso_rot, om.iso_trans, ic.iso_rot, ic.iso_trans});
  }
  return t;
}

inline Table noise_sweep(const OmnetModel& model, const std::vector<double>& sigmas, const SweepOptions& o) {
  if (sigmas.empty()) throw std::invalid_argument("noise_sweep: empty sigma list");
  for (double s : sigmas)
    if (!(s >= 0.0)) throw std::invalid_argument("noise_sweep: negative sigma " + std::to_string(s));
  Table t{{"sigma", "omnet_iso_rot", "omnet_iso_trans", "icp_iso_rot", "icp_iso_trans"}, {}};
  for (double s : sigmas) {
    DatasetSpec ds = o.dataset;
    ds.pair.noise_sigma = s;
    // clip stays at five sigma of the default protocol unless the noise exceeds it
    ds.pair.noise_clip = std::max(o.dataset.pair.noise_clip, 5.0 * s);
    const auto pairs = make_eval_set(ds, o.trials, o.seed);
    const MethodErrors om = mean_iso(model_predictions(model, pairs), pairs);
    const MethodErrors ic = mean_iso(icp_predictions(pairs, o.icp), pairs);
    t.rows.push_back({s, om.iso_rot, om.iso_trans, ic.iso_rot, ic.iso_trans});
  }
  return t;
}

struct IterationStudy {
  ErrorReport initial;  ///< error of the unmodified input pose
  Table table;          ///< one row per iteration 1..max_n
};

inline IterationStudy iteration_study(const OmnetModel& model, std::size_t max_n, const std::vector<RegistrationPair>& pairs) {
  if (max_n < 1) throw std::invalid_argument("iteration_study: max_n must be >= 1");
  const EvalReport rep = evaluate(model, pairs, max_n);
  IterationStudy s;
  s.initial = rep.per_iteration.front();
  s.table.columns = {"iteration", "iso_rot", "iso_trans", "rmse_rot", "mae_rot", "rmse_trans", "mae_trans", "mask_f1"};
  for (std::size_t i = 1; i <= max_n; ++i) {
    const ErrorReport& e = rep.per_iteration[i];
    s.table.rows.push_back({static_cast<double>(i), e.iso_rot, e.iso_trans, e.rmse_rot, e.mae_rot, e.rmse_trans, e.mae_trans,
                            rep.mask_per_iteration[i - 1].f1});
  }
  return s;
}

}  // namespace overlapreg
