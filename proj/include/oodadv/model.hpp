#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <utility>
#include <vector>

#include "oodadv/data.hpp"
#include "oodadv/numerics.hpp"

namespace oodadv {

struct DenseLayer {
  Matrix weights;  // out × in
  Vector bias;

  bool operator==(const DenseLayer&) const = default;
};

// Activations of one forward pass, kept for the backward pass.
struct ForwardTrace {
  std::vector<Vector> activations;  // [0] is the flattened input, back() the embedding
  Vector logits;
  Vector probs;

  const Vector& embedding() const { return activations.back(); }
};

// MLP classifier: flatten → tanh hidden layers (the last one is the embedding)
// → linear head → softmax.
class EmbeddingModel {
 public:
  EmbeddingModel() = default;
  EmbeddingModel(ImageShape input_shape, std::vector<DenseLayer> hidden, DenseLayer head);

  // Weights ~ N(0, 1/fan_in), zero biases.
  static EmbeddingModel initialize(ImageShape input_shape, const std::vector<std::size_t>& hidden_widths,
                                   std::size_t num_classes, std::uint64_t seed);

  const ImageShape& input_shape() const noexcept { return input_shape_; }
  std::size_t embedding_dim() const noexcept { return head_.weights.cols(); }
  std::size_t num_classes() const noexcept { return head_.weights.rows(); }

  const std::vector<DenseLayer>& hidden() const noexcept { return hidden_; }
  const DenseLayer& head() const noexcept { return head_; }
  std::vector<DenseLayer>& mutable_hidden() noexcept { return hidden_; }
  DenseLayer& mutable_head() noexcept { return head_; }

  ForwardTrace forward(std::span<const double> flat_input) const;
  ForwardTrace forward(const Image& img) const;

  // Gradient with respect to the flattened input, given upstream gradients on
  // the embedding and on the probabilities.
  Vector backward(const ForwardTrace& trace, std::span<const double> d_embedding,
                  std::span<const double> d_probs) const;

  bool operator==(const EmbeddingModel&) const = default;

 private:
  void check_input(std::size_t size) const;

  ImageShape input_shape_;
  std::vector<DenseLayer> hidden_;
  DenseLayer head_;
};

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double learning_rate = 0.05;
  std::uint64_t seed = 1;
  double weight_decay = 1e-4;
  std::vector<std::size_t> hidden_widths{256, 128, 64};
};

struct EpochStats {
  std::size_t epoch = 0;
  double loss = 0.0;
  double accuracy = 0.0;
};

struct TrainResult {
  EmbeddingModel model;
  std::vector<EpochStats> log;
  double final_accuracy = 0.0;  // training accuracy of the returned model
};

// Per-pixel mean and standard deviation of a training set. Training runs in
// standardized coordinates; the affine map is folded into the first layer of
// the returned model, so callers always feed raw [0,1] pixels.
struct InputStandardization {
  Vector mean;
  Vector stddev;
};

inline constexpr double kMinPixelStddev = 1e-3;

InputStandardization compute_standardization(const LabeledDataset& dataset);

// Returns a model that maps raw x to what `model` produces on (x − mean)/stddev.
EmbeddingModel fold_standardization(const EmbeddingModel& model, const InputStandardization& stats);

// With cfg.epochs == 0 the result is fold_standardization of the seeded
// initialization.
TrainResult train(const LabeledDataset& dataset, const TrainConfig& cfg);

double accuracy(const EmbeddingModel& model, const LabeledDataset& dataset);

Vector embed(const EmbeddingModel& model, const Image& img);
Vector predict_probs(const EmbeddingModel& model, const Image& img);

// A scalar computed from (embedding, probabilities) together with its partial
// derivatives. Either gradient may be left empty when it is identically zero.
struct HeadGradient {
  double value = 0.0;
  Vector d_embedding;
  Vector d_probs;
};

using Downstream = std::function<HeadGradient(const Vector& embedding, const Vector& probs)>;

// Returns (downstream value, ∂downstream/∂pixels).
std::pair<double, ImageGradient> value_and_input_gradient(const EmbeddingModel& model, const Image& img,
                                                          const Downstream& downstream);
ImageGradient input_gradient(const EmbeddingModel& model, const Image& img, const Downstream& downstream);

struct WordBank {
  Matrix in_words;   // W_in × D
  Matrix out_words;  // W_out × D

  std::size_t dim() const noexcept { return in_words.cols(); }
};

// Word vectors are the class means of the model's embeddings.
WordBank build_word_bank(const EmbeddingModel& model, const LabeledDataset& in_data,
                         const LabeledDataset& out_data);

// (in-logits, out-logits): cosine similarity of the embedding to each word.
std::pair<Vector, Vector> clip_style_logits(const EmbeddingModel& model, const WordBank& bank, const Image& img);
std::pair<Vector, Vector> cosine_logits(const WordBank& bank, std::span<const double> embedding);

// "OODM" checkpoint: version u32, input H/W/C u32, layer count u32, then per
// layer rows u32, cols u32, float32 weights, float32 biases. The last layer is
// the classifier head.
void save_model(const std::filesystem::path& path, const EmbeddingModel& model);
EmbeddingModel load_model(const std::filesystem::path& path);

}  // namespace oodadv
