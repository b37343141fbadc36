#include "oodadv/detectors.hpp"

#include <algorithm>
#include <iostream>
#include <string>

#include "binary_io.hpp"
#include "oodadv/error.hpp"

namespace oodadv {

std::string_view to_string(ScoreMethod method) {
  switch (method) {
    case ScoreMethod::kMd: return "MD";
    case ScoreMethod::kRmd: return "RMD";
    case ScoreMethod::kMsp: return "MSP";
    case ScoreMethod::kClip: return "CLIP";
    case ScoreMethod::kEnsemble: return "ENSEMBLE";
  }
  return "?";
}

GaussianDetector::GaussianDetector(std::vector<Vector> class_means, SpdFactor covariance, Vector background_mean,
                                   SpdFactor background_covariance)
    : means_(std::move(class_means)),
      covariance_(std::move(covariance)),
      background_mean_(std::move(background_mean)),
      background_covariance_(std::move(background_covariance)) {
  if (means_.empty()) throw Error(ErrorCode::kInvalidArgument, "detector needs at least one class");
  const std::size_t d = background_mean_.size();
  if (d == 0) throw Error(ErrorCode::kDimensionZero, "detector dimension is zero");
  for (const auto& m : means_) {
    if (m.size() != d) throw Error(ErrorCode::kDimensionMismatch, "class mean dimension");
  }
  if (covariance_.dim() != d || background_covariance_.dim() != d) {
    throw Error(ErrorCode::kDimensionMismatch, "covariance factor dimension");
  }
}

void GaussianDetector::check_dim(std::size_t n) const {
  if (n != dim()) {
    throw Error(ErrorCode::kDimensionMismatch,
                "query has dimension " + std::to_string(n) + ", detector " + std::to_string(dim()));
  }
}

Vector GaussianDetector::class_distances(std::span<const double> z) const {
  check_dim(z.size());
  Vector out(means_.size());
  for (std::size_t k = 0; k < means_.size(); ++k) out[k] = quadratic_form(covariance_, subtract(z, means_[k]));
  return out;
}

double GaussianDetector::background_distance(std::span<const double> z) const {
  check_dim(z.size());
  return quadratic_form(background_covariance_, subtract(z, background_mean_));
}

GaussianDetector fit_gaussians(const EmbeddingDataset& embeddings) {
  if (!embeddings.labels) throw Error(ErrorCode::kInvalidArgument, "fitting needs labelled embeddings");
  const auto& labels = *embeddings.labels;
  const std::size_t n = embeddings.size();
  const std::size_t d = embeddings.dim;
  if (d == 0) throw Error(ErrorCode::kDimensionZero, "embedding dimension is zero");
  if (labels.size() != n) throw Error(ErrorCode::kInvalidArgument, "label count differs from embedding count");
  if (n == 0) throw Error(ErrorCode::kClassUnderpopulated, "no embeddings");

  const std::size_t k_count = *std::max_element(labels.begin(), labels.end()) + 1;
  if (k_count < 2) throw Error(ErrorCode::kClassUnderpopulated, "need at least two classes");
  std::vector<Vector> means(k_count, Vector(d, 0.0));
  std::vector<std::size_t> counts(k_count, 0);
  Vector mean0(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (embeddings.embeddings[i].size() != d) throw Error(ErrorCode::kDimensionMismatch, "ragged embeddings");
    axpy(1.0, embeddings.embeddings[i], means[labels[i]]);
    axpy(1.0, embeddings.embeddings[i], mean0);
    ++counts[labels[i]];
  }
  for (std::size_t k = 0; k < k_count; ++k) {
    if (counts[k] < 2) {
      throw Error(ErrorCode::kClassUnderpopulated,
                  "class " + std::to_string(k) + " has " + std::to_string(counts[k]) + " examples");
    }
    for (double& v : means[k]) v /= static_cast<double>(counts[k]);
  }
  for (double& v : mean0) v /= static_cast<double>(n);

  Matrix scatter(d, d), scatter0(d, d);
  Vector diff(d), diff0(d);
  for (std::size_t i = 0; i < n; ++i) {
    const Vector& z = embeddings.embeddings[i];
    const Vector& mu = means[labels[i]];
    for (std::size_t a = 0; a < d; ++a) {
      diff[a] = z[a] - mu[a];
      diff0[a] = z[a] - mean0[a];
    }
    for (std::size_t a = 0; a < d; ++a) {
      auto row = scatter.row(a);
      auto row0 = scatter0.row(a);
      for (std::size_t b = 0; b <= a; ++b) {
        row[b] += diff[a] * diff[b];
        row0[b] += diff0[a] * diff0[b];
      }
    }
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t a = 0; a < d; ++a) {
    for (std::size_t b = 0; b <= a; ++b) {
      scatter(a, b) *= inv_n;
      scatter(b, a) = scatter(a, b);
      scatter0(a, b) *= inv_n;
      scatter0(b, a) = scatter0(a, b);
    }
  }
  return GaussianDetector(std::move(means), cholesky(regularize(scatter)), std::move(mean0),
                          cholesky(regularize(scatter0)));
}

namespace {

std::size_t argmin(const Vector& v) {
  return static_cast<std::size_t>(std::min_element(v.begin(), v.end()) - v.begin());
}

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

void require_gaussian_method(ScoreMethod method) {
  if (method != ScoreMethod::kMd && method != ScoreMethod::kRmd) {
    throw Error(ErrorCode::kInvalidArgument, "Gaussian detectors score MD or RMD only");
  }
}

}  // namespace

OodScore md_score(const GaussianDetector& det, std::span<const double> z) {
  const Vector d = det.class_distances(z);
  return {*std::min_element(d.begin(), d.end()), ScoreMethod::kMd};
}

OodScore rmd_score(const GaussianDetector& det, std::span<const double> z) {
  const Vector d = det.class_distances(z);
  return {*std::min_element(d.begin(), d.end()) - det.background_distance(z), ScoreMethod::kRmd};
}

Vector score_embedding_gradient(const GaussianDetector& det, ScoreMethod method, std::span<const double> z) {
  require_gaussian_method(method);
  // MD_0 does not depend on k, so the RMD argmin is the MD argmin.
  const std::size_t k = argmin(det.class_distances(z));
  Vector grad = spd_solve(det.covariance(), subtract(z, det.class_means()[k]));
  for (double& g : grad) g *= 2.0;
  if (method == ScoreMethod::kRmd) {
    const Vector bg = spd_solve(det.background_covariance(), subtract(z, det.background_mean()));
    axpy(-2.0, bg, grad);
  }
  return grad;
}

HeadGradient gaussian_head(const GaussianDetector& det, ScoreMethod method, const Vector& z) {
  require_gaussian_method(method);
  const double value = method == ScoreMethod::kMd ? md_score(det, z).value : rmd_score(det, z).value;
  return {value, score_embedding_gradient(det, method, z), {}};
}

HeadGradient msp_head(const Vector& probs) {
  const std::size_t top = argmax(probs);
  Vector d_probs(probs.size(), 0.0);
  d_probs[top] = -1.0;
  return {-probs[top], {}, std::move(d_probs)};
}

HeadGradient clip_head(const WordBank& bank, const Vector& z) {
  const auto [in_logits, out_logits] = cosine_logits(bank, z);
  const std::size_t i = argmax(in_logits);
  const std::size_t j = argmax(out_logits);
  const double z_norm = norm2(z);
  // ∂cos(w, z)/∂z = w / (‖w‖‖z‖) − cos · z / ‖z‖²
  auto add_cos_grad = [&](const Matrix& words, std::size_t row, double cosine, double sign, Vector& out) {
    const double w_norm = norm2(words.row(row));
    if (w_norm == 0.0) return;
    axpy(sign / (w_norm * z_norm), words.row(row), out);
    axpy(-sign * cosine / (z_norm * z_norm), z, out);
  };
  Vector grad(z.size(), 0.0);
  add_cos_grad(bank.out_words, j, out_logits[j], 1.0, grad);
  add_cos_grad(bank.in_words, i, in_logits[i], -1.0, grad);
  return {out_logits[j] - in_logits[i], std::move(grad), {}};
}

OodScore msp_score(const EmbeddingModel& model, const Image& img) {
  return {msp_head(predict_probs(model, img)).value, ScoreMethod::kMsp};
}

OodScore clip_score(const EmbeddingModel& model, const WordBank& bank, const Image& img) {
  const auto [in_logits, out_logits] = clip_style_logits(model, bank, img);
  const double in_max = *std::max_element(in_logits.begin(), in_logits.end());
  const double out_max = *std::max_element(out_logits.begin(), out_logits.end());
  return {out_max - in_max, ScoreMethod::kClip};
}

// ---------------------------------------------------------------------------
// Image-level scorers
// ---------------------------------------------------------------------------

GaussianScorer::GaussianScorer(std::shared_ptr<const EmbeddingModel> model,
                               std::shared_ptr<const GaussianDetector> detector, ScoreMethod method)
    : model_(std::move(model)), detector_(std::move(detector)), method_(method) {
  require_gaussian_method(method_);
  if (model_->embedding_dim() != detector_->dim()) {
    throw Error(ErrorCode::kDimensionMismatch, "detector dimension differs from model embedding");
  }
}

double GaussianScorer::score(const Image& img) const {
  const Vector z = embed(*model_, img);
  return method_ == ScoreMethod::kMd ? md_score(*detector_, z).value : rmd_score(*detector_, z).value;
}

std::pair<double, ImageGradient> GaussianScorer::score_and_gradient(const Image& img) const {
  return value_and_input_gradient(*model_, img, [this](const Vector& z, const Vector&) {
    return gaussian_head(*detector_, method_, z);
  });
}

MspScorer::MspScorer(std::shared_ptr<const EmbeddingModel> model) : model_(std::move(model)) {}

double MspScorer::score(const Image& img) const { return msp_score(*model_, img).value; }

std::pair<double, ImageGradient> MspScorer::score_and_gradient(const Image& img) const {
  return value_and_input_gradient(*model_, img, [](const Vector&, const Vector& p) { return msp_head(p); });
}

ClipScorer::ClipScorer(std::shared_ptr<const EmbeddingModel> model, std::shared_ptr<const WordBank> bank)
    : model_(std::move(model)), bank_(std::move(bank)) {
  if (bank_->dim() != model_->embedding_dim() || bank_->out_words.cols() != model_->embedding_dim()) {
    throw Error(ErrorCode::kDimensionMismatch, "word bank dimension differs from model embedding");
  }
}

double ClipScorer::score(const Image& img) const { return clip_score(*model_, *bank_, img).value; }

std::pair<double, ImageGradient> ClipScorer::score_and_gradient(const Image& img) const {
  return value_and_input_gradient(*model_, img, [this](const Vector& z, const Vector&) {
    return clip_head(*bank_, z);
  });
}

DetectorEnsemble::DetectorEnsemble(std::vector<ScorerPtr> members) : members_(std::move(members)) {
  if (members_.empty()) throw Error(ErrorCode::kEmptyEnsemble, "ensemble has no members");
  for (const auto& m : members_) {
    if (!m) throw Error(ErrorCode::kEmptyEnsemble, "ensemble member is null");
    if (m->input_shape() != members_.front()->input_shape()) {
      throw Error(ErrorCode::kShapeMismatch, "ensemble members take different input shapes");
    }
    if (m->method() != members_.front()->method()) mixed_units_ = true;
  }
  if (mixed_units_) {
    std::cerr << "warning: ensemble mixes score methods; member scores are averaged in different units\n";
  }
}

double DetectorEnsemble::score(const Image& img) const {
  double total = 0.0;
  for (const auto& m : members_) total += m->score(img);
  return total / static_cast<double>(members_.size());
}

std::pair<double, ImageGradient> DetectorEnsemble::score_and_gradient(const Image& img) const {
  auto [total, grad] = members_.front()->score_and_gradient(img);
  for (std::size_t i = 1; i < members_.size(); ++i) {
    auto [v, g] = members_[i]->score_and_gradient(img);
    total += v;
    axpy(1.0, g.pixels(), grad.pixels());
  }
  const double inv = 1.0 / static_cast<double>(members_.size());
  for (double& g : grad.pixels()) g *= inv;
  return {total * inv, std::move(grad)};
}

OodScore ensemble_score(const DetectorEnsemble& ens, const Image& img) {
  return {ens.score(img), ScoreMethod::kEnsemble};
}

GaussianDetector fit_detector(const EmbeddingModel& model, const LabeledDataset& data) {
  data.validate();
  EmbeddingDataset ds;
  ds.dim = model.embedding_dim();
  ds.labels = data.labels;
  ds.embeddings.reserve(data.size());
  for (const auto& img : data.images) ds.embeddings.push_back(embed(model, img));
  return fit_gaussians(ds);
}

// ---------------------------------------------------------------------------
// Checkpoint
// ---------------------------------------------------------------------------

namespace {
constexpr std::uint32_t kDetectorVersion = 1;

void write_factor(binary::Writer& w, const SpdFactor& f) {
  for (double v : f.lower().data()) w.f32(v);
}

SpdFactor read_factor(binary::Reader& r, std::size_t d) {
  std::vector<double> values(d * d);
  for (double& v : values) v = r.f32();
  return SpdFactor::from_lower(Matrix(d, d, std::move(values)));
}
}  // namespace

void save_detector(const std::filesystem::path& path, const GaussianDetector& det) {
  binary::Writer w;
  w.bytes("OODD");
  w.u32(kDetectorVersion);
  w.u32(static_cast<std::uint32_t>(det.num_classes()));
  w.u32(static_cast<std::uint32_t>(det.dim()));
  for (const auto& m : det.class_means())
    for (double v : m) w.f32(v);
  for (double v : det.background_mean()) w.f32(v);
  write_factor(w, det.covariance());
  write_factor(w, det.background_covariance());
  w.save(path);
}

GaussianDetector load_detector(const std::filesystem::path& path) {
  auto r = binary::Reader::open(path);
  r.expect_magic("OODD");
  r.u32();
  const std::size_t k = r.u32();
  const std::size_t d = r.u32();
  if (d == 0) throw Error(ErrorCode::kDimensionZero, path.string() + " declares D = 0");
  if (r.remaining() / 4 < k * d + d + 2 * d * d) throw Error(ErrorCode::kTruncatedFile, path.string());
  std::vector<Vector> means(k, Vector(d));
  for (auto& m : means)
    for (double& v : m) v = r.f32();
  Vector mean0(d);
  for (double& v : mean0) v = r.f32();
  SpdFactor cov = read_factor(r, d);
  SpdFactor cov0 = read_factor(r, d);
  return GaussianDetector(std::move(means), std::move(cov), std::move(mean0), std::move(cov0));
}

}  // namespace oodadv
