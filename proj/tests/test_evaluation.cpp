#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include <json.hpp>

#include "oodadv/error.hpp"
#include "oodadv/evaluation.hpp"
#include "oracles.hpp"

using namespace oodadv;
using namespace oodadv::testing;

namespace {

AttackTrajectory make_traj(std::vector<double> linf, std::vector<double> scores) {
  AttackTrajectory t;
  for (std::size_t i = 0; i < linf.size(); ++i) t.records.push_back({i, scores[i], 2.0 * linf[i], linf[i]});
  return t;
}

std::vector<double> random_scores(std::size_t n, std::mt19937_64& rng, bool coarse) {
  std::vector<double> v(n);
  for (double& x : v) {
    x = coarse ? static_cast<double>(std::uniform_int_distribution<int>(0, 6)(rng))
               : std::normal_distribution<double>(0.0, 1.0)(rng);
  }
  return v;
}

}  // namespace

TEST_CASE("auroc hand examples") {
  CHECK(auroc(std::vector<double>{0, 1}, std::vector<double>{2, 3}) == 1.0);
  CHECK(auroc(std::vector<double>{5, 5, 5}, std::vector<double>{5, 5, 5}) == 0.5);
  CHECK(auroc(std::vector<double>{2, 3}, std::vector<double>{0, 1}) == 0.0);
  CHECK(auroc(std::vector<double>{1, 2}, std::vector<double>{2}) == 0.75);
  try {
    auroc(std::vector<double>{}, std::vector<double>{1.0});
    FAIL("expected EmptyInput");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kEmptyInput);
  }
  CHECK_THROWS_AS(auroc(std::vector<double>{std::nan("")}, std::vector<double>{1.0}), Error);
}

TEST_CASE("auroc equals brute-force pair counting") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const bool coarse = trial % 2 == 0;
    const auto in = random_scores(1 + rng() % 60, rng, coarse);
    const auto out = random_scores(1 + rng() % 60, rng, coarse);
    CHECK(auroc(in, out) == brute_force_auroc(in, out));
  }
}

TEST_CASE("auroc symmetry and invariance") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    auto in = random_scores(30, rng, false), out = random_scores(25, rng, false);
    for (double& x : out) x += 0.5;
    const double a = auroc(in, out);
    CHECK(a + auroc(out, in) == doctest::Approx(1.0).epsilon(1e-15));
    auto neg = [](std::vector<double> v) {
      for (double& x : v) x = -x;
      return v;
    };
    CHECK(auroc(neg(in), neg(out)) == doctest::Approx(1.0 - a).epsilon(1e-15));
    auto warp = [](std::vector<double> v) {
      for (double& x : v) x = std::exp(3.0 * x) + x;
      return v;
    };
    CHECK(auroc(warp(in), warp(out)) == a);
    CHECK(a >= 0.0);
    CHECK(a <= 1.0);
  }
}

TEST_CASE("interpolate_score") {
  const auto t = make_traj({0, 2, 4}, {10, 6, 2});
  CHECK(interpolate_score(t, NormKind::kLinf, 3.0) == 4.0);
  CHECK(interpolate_score(t, NormKind::kLinf, 0.0) == 10.0);
  CHECK(interpolate_score(t, NormKind::kLinf, 2.0) == 6.0);
  CHECK(interpolate_score(t, NormKind::kLinf, 4.0) == 2.0);
  CHECK(interpolate_score(t, NormKind::kLinf, 100.0) == 2.0);
  CHECK(interpolate_score(t, NormKind::kL2, 6.0) == 4.0);
  CHECK(interpolate_score(t, NormKind::kLinf, 0.5) == doctest::Approx(9.0).epsilon(1e-15));
  CHECK_THROWS_AS(interpolate_score(t, NormKind::kLinf, -1.0), Error);
  CHECK(norms_monotone(t, NormKind::kLinf));
}

TEST_CASE("non-monotone norms use the running maximum") {
  const auto t = make_traj({0, 2, 1, 4}, {10, 6, 5, 2});
  CHECK_FALSE(norms_monotone(t, NormKind::kLinf));
  CHECK(interpolate_score(t, NormKind::kLinf, 2.0) == 6.0);
  CHECK(interpolate_score(t, NormKind::kLinf, 3.0) == 3.5);
  CHECK(interpolate_score(t, NormKind::kLinf, 1.0) == 8.0);
}

TEST_CASE("interpolation is continuous and exact at knots") {
  std::mt19937_64 rng(3);
  std::vector<double> norms{0.0}, scores{std::normal_distribution<double>(0, 1)(rng)};
  for (int i = 0; i < 15; ++i) {
    norms.push_back(norms.back() + std::uniform_real_distribution<double>(0.01, 1.0)(rng));
    scores.push_back(std::normal_distribution<double>(0, 1)(rng));
  }
  const auto t = make_traj(norms, scores);
  for (std::size_t i = 0; i < norms.size(); ++i) {
    CHECK(interpolate_score(t, NormKind::kLinf, norms[i]) == scores[i]);
    const double left = interpolate_score(t, NormKind::kLinf, std::max(0.0, norms[i] - 1e-9));
    CHECK(std::abs(left - scores[i]) < 1e-6);
  }
}

TEST_CASE("robustness curves") {
  const std::vector<double> in{0.0, 1.0, 2.0, 3.0};
  SUBCASE("constant trajectories give a flat curve") {
    std::vector<AttackTrajectory> trajs{make_traj({0, 0, 0}, {2.5, 2.5, 2.5}), make_traj({0, 0, 0}, {5, 5, 5})};
    const std::vector<double> budgets{0.0, 0.1, 0.2};
    const auto c = robustness_curve(in, trajs, NormKind::kLinf, budgets);
    for (double a : c.auroc) CHECK(a == c.baseline);
    CHECK(c.baseline == auroc(in, std::vector<double>{2.5, 5.0}));
    CHECK(c.n_in == 4);
    CHECK(c.n_out == 2);
  }
  SUBCASE("single budget") {
    std::vector<AttackTrajectory> trajs{make_traj({0, 1}, {4, 0})};
    const std::vector<double> budgets{0.0};
    const auto c = robustness_curve(in, trajs, NormKind::kLinf, budgets);
    REQUIRE(c.auroc.size() == 1);
    CHECK(c.auroc[0] == 1.0);
  }
  SUBCASE("attacked scores move into the in-range") {
    std::vector<AttackTrajectory> trajs{make_traj({0, 1, 1, 2}, {4, 2.5, 2.5, 0.5})};
    const std::vector<double> budgets{0.0, 1.0, 2.0};
    const auto c = robustness_curve(in, trajs, NormKind::kLinf, budgets);
    CHECK(c.auroc == std::vector<double>{1.0, 0.75, 0.25});
    CHECK(c.nonmonotone_trajectories == 0);
    CHECK(reachable_budget(trajs, NormKind::kLinf) == 2.0);
    CHECK(reachable_budget(trajs, NormKind::kL2) == 4.0);
  }
  SUBCASE("bad budgets") {
    std::vector<AttackTrajectory> trajs{make_traj({0, 1}, {4, 0})};
    CHECK_THROWS_AS(robustness_curve(in, trajs, NormKind::kLinf, std::vector<double>{0.1, 0.2}), Error);
    CHECK_THROWS_AS(robustness_curve(in, trajs, NormKind::kLinf, std::vector<double>{0.0, 0.2, 0.2}), Error);
    CHECK_THROWS_AS(robustness_curve(in, {}, NormKind::kLinf, std::vector<double>{0.0}), Error);
  }
}

TEST_CASE("budget grid") {
  const auto g = budget_grid(1.0, 5);
  CHECK(g == std::vector<double>{0.0, 0.25, 0.5, 0.75, 1.0});
  CHECK(budget_grid(0.0, 5) == std::vector<double>{0.0});
}

TEST_CASE("delta reports") {
  RobustnessCurve c;
  c.budgets = {0.0, 1.0 / 255.0};
  c.auroc = {0.98, 0.41};
  c.baseline = 0.98;
  CHECK(delta_report(c, 0.0).delta == 0.0);
  const auto r = delta_report(c, 1.0 / 255.0, "md");
  CHECK(r.delta == doctest::Approx(-0.57).epsilon(1e-12));
  CHECK(r.method == "md");
  CHECK(r.auroc_at_budget == 0.41);

  // Table values at full precision: 97.98% → 41.33%.
  c.auroc = {0.9798, 0.4133};
  c.baseline = 0.9798;
  CHECK(std::abs(delta_report(c, 1.0 / 255.0).delta - (-0.5665)) < 1e-12);

  c.budgets = {0.0, 1.0, 3.0};
  c.auroc = {0.9, 0.7, 0.3};
  c.baseline = 0.9;
  CHECK(delta_report(c, 2.0).auroc_at_budget == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(delta_report(c, 0.25).auroc_at_budget == doctest::Approx(0.85).epsilon(1e-15));
  CHECK_THROWS_AS(delta_report(c, 4.0), Error);
}

TEST_CASE("curve files and reports round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "oodadv_tests";
  RobustnessCurve c;
  c.budgets = {0.0, 0.1, 0.30000000000000004};
  c.auroc = {0.9, 0.712345678901234, 0.25};
  c.baseline = 0.9;
  c.n_in = 260;
  c.n_out = 128;
  write_curve_csv(dir / "curve.csv", c);
  const auto back = read_curve_csv(dir / "curve.csv", NormKind::kLinf);
  CHECK(back.budgets == c.budgets);
  CHECK(back.auroc == c.auroc);
  CHECK(back.n_in == 260);

  const auto side = nlohmann::json::parse(curve_sidecar_json(c, "rmd", "near", "abc123"));
  CHECK(side["method"] == "rmd");
  CHECK(side["norm"] == "linf");
  CHECK(side["config_hash"] == "abc123");

  std::vector<DeltaReport> reps{delta_report(c, 0.1, "md"), delta_report(c, 0.2, "rmd")};
  write_reports_json(dir / "reports.json", reps);
  const auto r2 = read_reports_json(dir / "reports.json");
  REQUIRE(r2.size() == 2);
  CHECK(r2[1].method == "rmd");
  CHECK(r2[1].delta == reps[1].delta);
  CHECK(r2[0].budget == 0.1);

  const std::string svg = render_svg({{"md", c}}, "curves");
  CHECK(svg.find("<svg") != std::string::npos);
  CHECK(svg.find("polyline") != std::string::npos);
}
