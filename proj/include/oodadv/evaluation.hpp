#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "oodadv/attacks.hpp"

namespace oodadv {

enum class NormKind { kL2, kLinf };

std::string_view to_string(NormKind kind);
NormKind parse_norm_kind(std::string_view text);

// P(out > in) + ½·P(out = in) over all (in, out) pairs, computed from
// midranks. Scores follow the larger-is-more-OOD convention.
double auroc(std::span<const double> in_scores, std::span<const double> out_scores);

// Piecewise-linear score as a function of perturbation norm. The abscissa is
// the running maximum of the recorded norm; budgets past the last knot return
// the final score.
double interpolate_score(const AttackTrajectory& traj, NormKind kind, double budget);

// False when the recorded norms ever decrease (possible with pixel clamping).
bool norms_monotone(const AttackTrajectory& traj, NormKind kind);

// Largest norm any trajectory reached.
double reachable_budget(const std::vector<AttackTrajectory>& trajectories, NormKind kind);

// `count` evenly spaced budgets from 0 to `max_budget` inclusive.
std::vector<double> budget_grid(double max_budget, std::size_t count);

struct RobustnessCurve {
  NormKind norm = NormKind::kLinf;
  std::vector<double> budgets;
  std::vector<double> auroc;
  double baseline = 0.0;
  std::size_t n_in = 0;
  std::size_t n_out = 0;
  // Trajectories whose norms were non-monotone and went through the
  // running-maximum rule.
  std::size_t nonmonotone_trajectories = 0;
};

RobustnessCurve robustness_curve(std::span<const double> in_scores, const std::vector<AttackTrajectory>& trajectories,
                                 NormKind kind, std::span<const double> budgets);

struct DeltaReport {
  std::string method;
  double auroc_before = 0.0;
  double auroc_at_budget = 0.0;
  double delta = 0.0;
  NormKind norm = NormKind::kLinf;
  double budget = 0.0;
};

// Linear interpolation of the curve at `budget`, which must lie within the
// sampled budgets.
DeltaReport delta_report(const RobustnessCurve& curve, double budget, std::string method = {});

std::string curve_csv(const RobustnessCurve& curve);
void write_curve_csv(const std::filesystem::path& path, const RobustnessCurve& curve);
RobustnessCurve read_curve_csv(const std::filesystem::path& path, NormKind kind);

std::string curve_sidecar_json(const RobustnessCurve& curve, std::string_view method, std::string_view ood_set,
                               std::string_view config_hash);

std::string reports_json(const std::vector<DeltaReport>& reports);
void write_reports_json(const std::filesystem::path& path, const std::vector<DeltaReport>& reports);
std::vector<DeltaReport> read_reports_json(const std::filesystem::path& path);

// Standalone SVG line plot, one labelled polyline per curve.
std::string render_svg(const std::vector<std::pair<std::string, RobustnessCurve>>& curves, std::string_view title);

}  // namespace oodadv
