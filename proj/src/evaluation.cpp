#include "oodadv/evaluation.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "binary_io.hpp"
#include "oodadv/error.hpp"

namespace oodadv {

std::string_view to_string(NormKind kind) { return kind == NormKind::kL2 ? "l2" : "linf"; }

NormKind parse_norm_kind(std::string_view text) {
  if (text == "l2" || text == "L2") return NormKind::kL2;
  if (text == "linf" || text == "Linf" || text == "inf") return NormKind::kLinf;
  throw Error(ErrorCode::kConfigError, "unknown norm \"" + std::string(text) + "\"");
}

double auroc(std::span<const double> in_scores, std::span<const double> out_scores) {
  if (in_scores.empty() || out_scores.empty()) throw Error(ErrorCode::kEmptyInput, "auroc needs both populations");
  struct Entry {
    double score;
    bool out;
  };
  std::vector<Entry> all;
  all.reserve(in_scores.size() + out_scores.size());
  for (double s : in_scores) all.push_back({s, false});
  for (double s : out_scores) all.push_back({s, true});
  if (!std::all_of(all.begin(), all.end(), [](const Entry& e) { return std::isfinite(e.score); })) {
    throw Error(ErrorCode::kNonFiniteValue, "auroc input contains non-finite scores");
  }
  std::sort(all.begin(), all.end(), [](const Entry& a, const Entry& b) { return a.score < b.score; });

  // Twice the out-population rank sum; midranks of tie groups are half-integers.
  std::uint64_t rank_sum_x2 = 0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    std::uint64_t outs = 0;
    while (j < all.size() && all[j].score == all[i].score) outs += all[j++].out ? 1 : 0;
    rank_sum_x2 += outs * (i + 1 + j);
    i = j;
  }
  const std::uint64_t n_out = out_scores.size();
  const std::uint64_t n_in = in_scores.size();
  const std::uint64_t u_x2 = rank_sum_x2 - n_out * (n_out + 1);
  return static_cast<double>(u_x2) / static_cast<double>(2 * n_in * n_out);
}

namespace {

double norm_of(const StepRecord& r, NormKind kind) { return kind == NormKind::kL2 ? r.l2 : r.linf; }

}  // namespace

double interpolate_score(const AttackTrajectory& traj, NormKind kind, double budget) {
  if (traj.records.empty()) throw Error(ErrorCode::kEmptyInput, "trajectory has no records");
  if (!(budget >= 0.0)) throw Error(ErrorCode::kInvalidArgument, "budget must be >= 0");
  const auto& rec = traj.records;
  double prev_abscissa = 0.0;
  double running = 0.0;
  for (std::size_t t = 0; t < rec.size(); ++t) {
    running = std::max(running, norm_of(rec[t], kind));
    if (running >= budget) {
      if (t == 0 || running == budget) return rec[t].score;
      const double frac = (budget - prev_abscissa) / (running - prev_abscissa);
      return rec[t - 1].score + frac * (rec[t].score - rec[t - 1].score);
    }
    prev_abscissa = running;
  }
  return rec.back().score;
}

bool norms_monotone(const AttackTrajectory& traj, NormKind kind) {
  for (std::size_t t = 1; t < traj.records.size(); ++t) {
    if (norm_of(traj.records[t], kind) < norm_of(traj.records[t - 1], kind)) return false;
  }
  return true;
}

double reachable_budget(const std::vector<AttackTrajectory>& trajectories, NormKind kind) {
  double best = 0.0;
  for (const auto& traj : trajectories)
    for (const auto& r : traj.records) best = std::max(best, norm_of(r, kind));
  return best;
}

std::vector<double> budget_grid(double max_budget, std::size_t count) {
  if (count < 1) throw Error(ErrorCode::kInvalidArgument, "budget grid needs at least one point");
  if (count == 1 || !(max_budget > 0.0)) return {0.0};
  std::vector<double> grid(count);
  for (std::size_t i = 0; i < count; ++i) {
    grid[i] = max_budget * static_cast<double>(i) / static_cast<double>(count - 1);
  }
  grid.back() = max_budget;
  return grid;
}

RobustnessCurve robustness_curve(std::span<const double> in_scores, const std::vector<AttackTrajectory>& trajectories,
                                 NormKind kind, std::span<const double> budgets) {
  if (trajectories.empty()) throw Error(ErrorCode::kEmptyInput, "no trajectories");
  if (budgets.empty() || budgets.front() != 0.0) throw Error(ErrorCode::kInvalidArgument, "budgets must start at 0");
  for (std::size_t i = 1; i < budgets.size(); ++i) {
    if (!(budgets[i] > budgets[i - 1])) throw Error(ErrorCode::kInvalidArgument, "budgets must increase strictly");
  }
  RobustnessCurve curve;
  curve.norm = kind;
  curve.budgets.assign(budgets.begin(), budgets.end());
  curve.n_in = in_scores.size();
  curve.n_out = trajectories.size();
  for (const auto& traj : trajectories) curve.nonmonotone_trajectories += norms_monotone(traj, kind) ? 0 : 1;

  std::vector<double> out_scores(trajectories.size());
  for (double budget : budgets) {
    for (std::size_t i = 0; i < trajectories.size(); ++i) {
      out_scores[i] = interpolate_score(trajectories[i], kind, budget);
    }
    curve.auroc.push_back(auroc(in_scores, out_scores));
  }
  curve.baseline = curve.auroc.front();
  return curve;
}

DeltaReport delta_report(const RobustnessCurve& curve, double budget, std::string method) {
  const auto& b = curve.budgets;
  if (b.empty() || curve.auroc.size() != b.size()) throw Error(ErrorCode::kEmptyInput, "curve has no samples");
  if (budget < b.front() || budget > b.back()) {
    throw Error(ErrorCode::kInvalidArgument, "budget lies outside the sampled curve");
  }
  const auto it = std::lower_bound(b.begin(), b.end(), budget);
  const std::size_t i = static_cast<std::size_t>(it - b.begin());
  double at = curve.auroc[i];
  if (b[i] != budget) {
    const double frac = (budget - b[i - 1]) / (b[i] - b[i - 1]);
    at = curve.auroc[i - 1] + frac * (curve.auroc[i] - curve.auroc[i - 1]);
  }
  return {std::move(method), curve.baseline, at, at - curve.baseline, curve.norm, budget};
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

std::string curve_csv(const RobustnessCurve& curve) {
  std::string csv = "budget,auroc,n_in,n_out\n";
  char line[128];
  for (std::size_t i = 0; i < curve.budgets.size(); ++i) {
    std::snprintf(line, sizeof line, "%.17g,%.17g,%zu,%zu\n", curve.budgets[i], curve.auroc[i], curve.n_in,
                  curve.n_out);
    csv += line;
  }
  return csv;
}

void write_curve_csv(const std::filesystem::path& path, const RobustnessCurve& curve) {
  binary::write_file(path, curve_csv(curve));
}

RobustnessCurve read_curve_csv(const std::filesystem::path& path, NormKind kind) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIoError, "cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "budget,auroc,n_in,n_out") throw Error(ErrorCode::kMalformedFile, path.string() + ": bad header");
  RobustnessCurve curve;
  curve.norm = kind;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    double budget = 0.0, value = 0.0;
    std::size_t n_in = 0, n_out = 0;
    if (std::sscanf(line.c_str(), "%lf,%lf,%zu,%zu", &budget, &value, &n_in, &n_out) != 4) {
      throw Error(ErrorCode::kMalformedFile, path.string() + ": bad row \"" + line + "\"");
    }
    curve.budgets.push_back(budget);
    curve.auroc.push_back(value);
    curve.n_in = n_in;
    curve.n_out = n_out;
  }
  if (curve.budgets.empty()) throw Error(ErrorCode::kMalformedFile, path.string() + ": no rows");
  curve.baseline = curve.auroc.front();
  return curve;
}

std::string curve_sidecar_json(const RobustnessCurve& curve, std::string_view method, std::string_view ood_set,
                               std::string_view config_hash) {
  nlohmann::json j;
  j["method"] = method;
  j["norm"] = to_string(curve.norm);
  j["ood_set"] = ood_set;
  j["config_hash"] = config_hash;
  j["baseline_auroc"] = curve.baseline;
  j["n_in"] = curve.n_in;
  j["n_out"] = curve.n_out;
  j["nonmonotone_trajectories"] = curve.nonmonotone_trajectories;
  return j.dump(2) + "\n";
}

std::string reports_json(const std::vector<DeltaReport>& reports) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : reports) {
    arr.push_back({{"method", r.method},
                   {"auroc_before", r.auroc_before},
                   {"auroc_at_budget", r.auroc_at_budget},
                   {"delta", r.delta},
                   {"budget", {{"norm", to_string(r.norm)}, {"value", r.budget}}}});
  }
  return arr.dump(2) + "\n";
}

void write_reports_json(const std::filesystem::path& path, const std::vector<DeltaReport>& reports) {
  binary::write_file(path, reports_json(reports));
}

std::vector<DeltaReport> read_reports_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIoError, "cannot open " + path.string());
  std::vector<DeltaReport> out;
  try {
    const auto arr = nlohmann::json::parse(in);
    for (const auto& j : arr) {
      DeltaReport r;
      r.method = j.at("method").get<std::string>();
      r.auroc_before = j.at("auroc_before").get<double>();
      r.auroc_at_budget = j.at("auroc_at_budget").get<double>();
      r.delta = j.at("delta").get<double>();
      r.norm = parse_norm_kind(j.at("budget").at("norm").get<std::string>());
      r.budget = j.at("budget").at("value").get<double>();
      out.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kMalformedFile, path.string() + ": " + e.what());
  }
  return out;
}

std::string render_svg(const std::vector<std::pair<std::string, RobustnessCurve>>& curves, std::string_view title) {
  constexpr double kWidth = 640, kHeight = 420, kLeft = 70, kRight = 170, kTop = 40, kBottom = 60;
  constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#ff7f0e", "#9467bd", "#2ca02c",
                                      "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  const double plot_w = kWidth - kLeft - kRight;
  const double plot_h = kHeight - kTop - kBottom;
  double x_max = 0.0;
  for (const auto& [_, c] : curves)
    if (!c.budgets.empty()) x_max = std::max(x_max, c.budgets.back());
  if (x_max <= 0.0) x_max = 1.0;
  auto px = [&](double budget) { return kLeft + plot_w * budget / x_max; };
  auto py = [&](double value) { return kTop + plot_h * (1.0 - value); };
  const std::string norm = curves.empty() ? "linf" : std::string(to_string(curves.front().second.norm));

  std::ostringstream svg;
  svg.precision(6);
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << kLeft << "\" y=\"24\" font-size=\"14\">" << title << "</text>\n";
  svg << "<line x1=\"" << kLeft << "\" y1=\"" << py(0) << "\" x2=\"" << kLeft + plot_w << "\" y2=\"" << py(0)
      << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << kLeft << "\" y1=\"" << py(0) << "\" x2=\"" << kLeft << "\" y2=\"" << py(1)
      << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = i / 4.0;
    svg << "<text x=\"" << kLeft - 8 << "\" y=\"" << py(v) + 4 << "\" text-anchor=\"end\">" << v << "</text>\n";
    const double b = x_max * v;
    svg << "<text x=\"" << px(b) << "\" y=\"" << py(0) + 18 << "\" text-anchor=\"middle\">" << b << "</text>\n";
  }
  svg << "<text x=\"" << kLeft + plot_w / 2 << "\" y=\"" << kHeight - 16 << "\" text-anchor=\"middle\">perturbation "
      << (norm == "l2" ? "L2" : "L∞") << " norm</text>\n";
  svg << "<text transform=\"translate(18," << kTop + plot_h / 2 << ") rotate(-90)\" text-anchor=\"middle\">AUROC</text>\n";
  for (std::size_t i = 0; i < curves.size(); ++i) {
    const auto& [label, c] = curves[i];
    const char* color = kPalette[i % std::size(kPalette)];
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t k = 0; k < c.budgets.size(); ++k) svg << px(c.budgets[k]) << "," << py(c.auroc[k]) << " ";
    svg << "\"/>\n";
    const double ly = kTop + 16.0 * static_cast<double>(i) + 8;
    svg << "<line x1=\"" << kLeft + plot_w + 12 << "\" y1=\"" << ly << "\" x2=\"" << kLeft + plot_w + 32 << "\" y2=\""
        << ly << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    svg << "<text x=\"" << kLeft + plot_w + 38 << "\" y=\"" << ly + 4 << "\">" << label << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace oodadv
