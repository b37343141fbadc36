#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "oodadv/data.hpp"
#include "oodadv/detectors.hpp"

namespace oodadv {

enum class AttackMethod { kFgsm, kRawGradient };
enum class Direction { kIncreaseScore, kDecreaseScore };

std::string_view to_string(AttackMethod method);
std::string_view to_string(Direction direction);
AttackMethod parse_attack_method(std::string_view text);
Direction parse_direction(std::string_view text);

struct AttackConfig {
  AttackMethod method = AttackMethod::kFgsm;
  double epsilon = 3e-4;
  std::size_t steps = 30;
  Direction direction = Direction::kDecreaseScore;
  bool clamp_pixels = true;
  // Attack the low-resolution source image through the resize adjoint.
  bool low_res = false;

  void validate() const;
};

struct StepRecord {
  std::size_t step = 0;
  double score = 0.0;
  double l2 = 0.0;    // ‖x_t − x_0‖₂
  double linf = 0.0;  // ‖x_t − x_0‖∞
};

struct AttackTrajectory {
  std::vector<StepRecord> records;  // steps + 1 entries unless aborted
  Image final_image;
  bool aborted = false;
  std::string abort_reason;
};

// One ascent/descent step: FGSM moves every pixel by ±ε·sign(g) with
// sign(0) = 0; RawGradient moves by ±ε·g. Optionally clamps to [0,1].
Image attack_step(const Image& img, const ImageGradient& grad, const AttackConfig& cfg);

AttackTrajectory run_attack(const ImageScorer& scorer, const Image& img, const AttackConfig& cfg);

// Attacks `img` (low resolution) against score(resize(img, target)). Norms are
// measured on the low-resolution perturbation.
AttackTrajectory run_attack_lowres(const ImageScorer& scorer, const Image& img, std::size_t target_h,
                                   std::size_t target_w, const AttackConfig& cfg);

// Attacks every image; in low-res mode each image is resized to the scorer's
// input shape. Images are independent, so the batch is split across threads.
std::vector<AttackTrajectory> attack_batch(const ImageScorer& scorer, const std::vector<Image>& images,
                                           const AttackConfig& cfg, std::size_t threads = 1);

// CSV with header image_id,step,score,l2_norm,linf_norm.
void write_trajectory_csv(const std::filesystem::path& path, const std::vector<AttackTrajectory>& trajectories);
std::string trajectory_csv(const std::vector<AttackTrajectory>& trajectories);

}  // namespace oodadv
