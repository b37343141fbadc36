#include "oodadv/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <thread>

#include "binary_io.hpp"
#include "oodadv/error.hpp"

namespace oodadv {

std::string_view to_string(AttackMethod method) {
  return method == AttackMethod::kFgsm ? "fgsm" : "raw-gradient";
}

std::string_view to_string(Direction direction) {
  return direction == Direction::kIncreaseScore ? "increase" : "decrease";
}

AttackMethod parse_attack_method(std::string_view text) {
  if (text == "fgsm") return AttackMethod::kFgsm;
  if (text == "raw-gradient" || text == "raw") return AttackMethod::kRawGradient;
  throw Error(ErrorCode::kConfigError, "unknown attack method \"" + std::string(text) + "\"");
}

Direction parse_direction(std::string_view text) {
  if (text == "increase") return Direction::kIncreaseScore;
  if (text == "decrease") return Direction::kDecreaseScore;
  throw Error(ErrorCode::kConfigError, "unknown attack direction \"" + std::string(text) + "\"");
}

void AttackConfig::validate() const {
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw Error(ErrorCode::kConfigError, "epsilon must be > 0");
  if (steps < 1) throw Error(ErrorCode::kConfigError, "steps must be >= 1");
}

Image attack_step(const Image& img, const ImageGradient& grad, const AttackConfig& cfg) {
  if (img.shape() != grad.shape()) throw Error(ErrorCode::kShapeMismatch, "gradient shape differs from image");
  if (!all_finite(grad.pixels())) throw Error(ErrorCode::kNonFiniteGradient, "attack gradient is not finite");
  const double signed_eps = cfg.direction == Direction::kIncreaseScore ? cfg.epsilon : -cfg.epsilon;
  Image out = img;
  auto px = out.pixels();
  const auto g = grad.pixels();
  for (std::size_t i = 0; i < px.size(); ++i) {
    double dir = g[i];
    if (cfg.method == AttackMethod::kFgsm) dir = (g[i] > 0.0) - (g[i] < 0.0);
    px[i] += signed_eps * dir;
    if (cfg.clamp_pixels) px[i] = std::clamp(px[i], 0.0, 1.0);
  }
  return out;
}

namespace {

using Evaluate = std::function<std::pair<double, ImageGradient>(const Image&)>;
using ScoreOnly = std::function<double(const Image&)>;

StepRecord measure(std::size_t step, double score, const Image& current, const Image& original) {
  StepRecord r{step, score, 0.0, 0.0};
  const auto a = current.pixels();
  const auto b = original.pixels();
  double sq = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    sq += d * d;
    r.linf = std::max(r.linf, std::abs(d));
  }
  r.l2 = std::sqrt(sq);
  return r;
}

AttackTrajectory attack_loop(const Evaluate& evaluate, const ScoreOnly& score_only, const Image& img,
                             const AttackConfig& cfg) {
  cfg.validate();
  AttackTrajectory traj;
  traj.records.reserve(cfg.steps + 1);
  Image current = img;
  try {
    auto [score, grad] = evaluate(current);
    for (std::size_t t = 0;; ++t) {
      if (!std::isfinite(score)) {
        throw Error(ErrorCode::kNonFiniteScore, "score at step " + std::to_string(t) + " is not finite");
      }
      traj.records.push_back(measure(t, score, current, img));
      if (t == cfg.steps) break;
      current = attack_step(current, grad, cfg);
      if (t + 1 == cfg.steps) {
        score = score_only(current);
      } else {
        std::tie(score, grad) = evaluate(current);
      }
    }
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kNonFiniteScore && e.code() != ErrorCode::kNonFiniteGradient) throw;
    traj.aborted = true;
    traj.abort_reason = e.what();
  }
  traj.final_image = std::move(current);
  return traj;
}

}  // namespace

AttackTrajectory run_attack(const ImageScorer& scorer, const Image& img, const AttackConfig& cfg) {
  return attack_loop([&scorer](const Image& x) { return scorer.score_and_gradient(x); },
                     [&scorer](const Image& x) { return scorer.score(x); }, img, cfg);
}

AttackTrajectory run_attack_lowres(const ImageScorer& scorer, const Image& img, std::size_t target_h,
                                   std::size_t target_w, const AttackConfig& cfg) {
  const std::size_t in_h = img.height();
  const std::size_t in_w = img.width();
  auto evaluate = [&](const Image& x) {
    auto [score, grad_hi] = scorer.score_and_gradient(resize_bilinear(x, target_h, target_w));
    return std::pair<double, ImageGradient>{score, resize_adjoint(grad_hi, in_h, in_w)};
  };
  auto score_only = [&](const Image& x) { return scorer.score(resize_bilinear(x, target_h, target_w)); };
  return attack_loop(evaluate, score_only, img, cfg);
}

std::vector<AttackTrajectory> attack_batch(const ImageScorer& scorer, const std::vector<Image>& images,
                                           const AttackConfig& cfg, std::size_t threads) {
  std::vector<AttackTrajectory> out(images.size());
  const ImageShape& target = scorer.input_shape();
  auto work = [&](std::size_t i) {
    if (cfg.low_res) {
      out[i] = run_attack_lowres(scorer, images[i], target.height, target.width, cfg);
    } else {
      out[i] = run_attack(scorer, images[i], cfg);
    }
  };
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(images.size(), 1));
  if (threads == 1) {
    for (std::size_t i = 0; i < images.size(); ++i) work(i);
    return out;
  }
  std::vector<std::exception_ptr> errors(threads);
  {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        try {
          for (std::size_t i = t; i < images.size(); i += threads) work(i);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

std::string trajectory_csv(const std::vector<AttackTrajectory>& trajectories) {
  std::string csv = "image_id,step,score,l2_norm,linf_norm\n";
  char line[160];
  for (std::size_t id = 0; id < trajectories.size(); ++id) {
    for (const auto& r : trajectories[id].records) {
      std::snprintf(line, sizeof line, "%zu,%zu,%.17g,%.17g,%.17g\n", id, r.step, r.score, r.l2, r.linf);
      csv += line;
    }
  }
  return csv;
}

void write_trajectory_csv(const std::filesystem::path& path, const std::vector<AttackTrajectory>& trajectories) {
  binary::write_file(path, trajectory_csv(trajectories));
}

}  // namespace oodadv
