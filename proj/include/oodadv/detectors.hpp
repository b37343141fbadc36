#pragma once

// OOD scores. Convention throughout: larger value = more out-of-distribution.
//
//   MD    min_k (z−μ_k)ᵀ Σ⁻¹ (z−μ_k)
//   RMD   min_k MD_k(z) − MD_0(z), MD_0 against the label-free background fit
//   MSP   −max_i p_i
//   CLIP  max_j cos(z, out_j) − max_i cos(z, in_i)
//
// MD, RMD and MSP are the negations of the usual in-distribution confidences;
// AUROC flips to 1 − AUROC under negation, so nothing else changes.

#include <filesystem>
#include <memory>
#include <string_view>
#include <utility>
#include <vector>

#include "oodadv/data.hpp"
#include "oodadv/model.hpp"
#include "oodadv/numerics.hpp"

namespace oodadv {

enum class ScoreMethod { kMd, kRmd, kMsp, kClip, kEnsemble };

std::string_view to_string(ScoreMethod method);

struct OodScore {
  double value = 0.0;
  ScoreMethod method = ScoreMethod::kMd;
};

class GaussianDetector {
 public:
  GaussianDetector(std::vector<Vector> class_means, SpdFactor covariance, Vector background_mean,
                   SpdFactor background_covariance);

  std::size_t num_classes() const noexcept { return means_.size(); }
  std::size_t dim() const noexcept { return background_mean_.size(); }

  const std::vector<Vector>& class_means() const noexcept { return means_; }
  const SpdFactor& covariance() const noexcept { return covariance_; }
  const Vector& background_mean() const noexcept { return background_mean_; }
  const SpdFactor& background_covariance() const noexcept { return background_covariance_; }

  // MD_k(z) for every class.
  Vector class_distances(std::span<const double> z) const;
  double background_distance(std::span<const double> z) const;

 private:
  void check_dim(std::size_t n) const;

  std::vector<Vector> means_;
  SpdFactor covariance_;
  Vector background_mean_;
  SpdFactor background_covariance_;
};

// Class means, pooled within-class covariance (scatter / N), and background
// mean/covariance; both covariances regularized before factorization.
GaussianDetector fit_gaussians(const EmbeddingDataset& embeddings);

OodScore md_score(const GaussianDetector& det, std::span<const double> z);
OodScore rmd_score(const GaussianDetector& det, std::span<const double> z);

// ∂score/∂z for MD or RMD along the argmin branch (ties → lowest class).
Vector score_embedding_gradient(const GaussianDetector& det, ScoreMethod method, std::span<const double> z);

OodScore msp_score(const EmbeddingModel& model, const Image& img);
OodScore clip_score(const EmbeddingModel& model, const WordBank& bank, const Image& img);

// Score heads on (embedding, probabilities), composable with input_gradient.
HeadGradient gaussian_head(const GaussianDetector& det, ScoreMethod method, const Vector& z);
HeadGradient msp_head(const Vector& probs);
HeadGradient clip_head(const WordBank& bank, const Vector& z);

// An image-level OOD score with its pixel gradient.
class ImageScorer {
 public:
  virtual ~ImageScorer() = default;

  virtual ScoreMethod method() const = 0;
  virtual const ImageShape& input_shape() const = 0;
  virtual double score(const Image& img) const = 0;
  virtual std::pair<double, ImageGradient> score_and_gradient(const Image& img) const = 0;
};

using ScorerPtr = std::shared_ptr<const ImageScorer>;

class GaussianScorer final : public ImageScorer {
 public:
  GaussianScorer(std::shared_ptr<const EmbeddingModel> model, std::shared_ptr<const GaussianDetector> detector,
                 ScoreMethod method);

  ScoreMethod method() const override { return method_; }
  const ImageShape& input_shape() const override { return model_->input_shape(); }
  double score(const Image& img) const override;
  std::pair<double, ImageGradient> score_and_gradient(const Image& img) const override;

  const GaussianDetector& detector() const noexcept { return *detector_; }

 private:
  std::shared_ptr<const EmbeddingModel> model_;
  std::shared_ptr<const GaussianDetector> detector_;
  ScoreMethod method_;
};

class MspScorer final : public ImageScorer {
 public:
  explicit MspScorer(std::shared_ptr<const EmbeddingModel> model);

  ScoreMethod method() const override { return ScoreMethod::kMsp; }
  const ImageShape& input_shape() const override { return model_->input_shape(); }
  double score(const Image& img) const override;
  std::pair<double, ImageGradient> score_and_gradient(const Image& img) const override;

 private:
  std::shared_ptr<const EmbeddingModel> model_;
};

class ClipScorer final : public ImageScorer {
 public:
  ClipScorer(std::shared_ptr<const EmbeddingModel> model, std::shared_ptr<const WordBank> bank);

  ScoreMethod method() const override { return ScoreMethod::kClip; }
  const ImageShape& input_shape() const override { return model_->input_shape(); }
  double score(const Image& img) const override;
  std::pair<double, ImageGradient> score_and_gradient(const Image& img) const override;

 private:
  std::shared_ptr<const EmbeddingModel> model_;
  std::shared_ptr<const WordBank> bank_;
};

// Unweighted mean of member scores, each in its own units.
class DetectorEnsemble final : public ImageScorer {
 public:
  explicit DetectorEnsemble(std::vector<ScorerPtr> members);

  ScoreMethod method() const override { return ScoreMethod::kEnsemble; }
  const ImageShape& input_shape() const override { return members_.front()->input_shape(); }
  double score(const Image& img) const override;
  std::pair<double, ImageGradient> score_and_gradient(const Image& img) const override;

  std::size_t size() const noexcept { return members_.size(); }
  // True when members use different score methods (units differ).
  bool mixed_units() const noexcept { return mixed_units_; }

 private:
  std::vector<ScorerPtr> members_;
  bool mixed_units_ = false;
};

OodScore ensemble_score(const DetectorEnsemble& ens, const Image& img);

// Embeds every image and fits the Gaussians.
GaussianDetector fit_detector(const EmbeddingModel& model, const LabeledDataset& data);

// "OODD" checkpoint: version u32, K u32, D u32, K·D class means, D background
// mean, D·D covariance factor, D·D background factor; float32 little-endian.
void save_detector(const std::filesystem::path& path, const GaussianDetector& det);
GaussianDetector load_detector(const std::filesystem::path& path);

}  // namespace oodadv
