#include "oodadv/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "binary_io.hpp"
#include "oodadv/error.hpp"
#include "rng.hpp"

namespace oodadv {

EmbeddingModel::EmbeddingModel(ImageShape input_shape, std::vector<DenseLayer> hidden, DenseLayer head)
    : input_shape_(input_shape), hidden_(std::move(hidden)), head_(std::move(head)) {
  if (hidden_.empty()) throw Error(ErrorCode::kInvalidArgument, "model needs at least one hidden layer");
  std::size_t fan_in = input_shape_.size();
  auto check = [&fan_in](const DenseLayer& layer, const char* what) {
    if (layer.weights.cols() != fan_in || layer.bias.size() != layer.weights.rows() || layer.weights.rows() == 0) {
      throw Error(ErrorCode::kShapeMismatch, std::string(what) + " does not chain with its input");
    }
    if (!all_finite(layer.weights.data()) || !all_finite(layer.bias)) {
      throw Error(ErrorCode::kNonFiniteValue, std::string(what) + " has non-finite parameters");
    }
    fan_in = layer.weights.rows();
  };
  for (const auto& layer : hidden_) check(layer, "hidden layer");
  check(head_, "classifier head");
}

EmbeddingModel EmbeddingModel::initialize(ImageShape input_shape, const std::vector<std::size_t>& hidden_widths,
                                          std::size_t num_classes, std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, 100));
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto make = [&](std::size_t out, std::size_t in) {
    DenseLayer layer{Matrix(out, in), Vector(out, 0.0)};
    const double scale = 1.0 / std::sqrt(static_cast<double>(in));
    for (double& w : layer.weights.data()) w = scale * gauss(rng);
    return layer;
  };
  std::vector<DenseLayer> hidden;
  std::size_t fan_in = input_shape.size();
  for (std::size_t width : hidden_widths) {
    hidden.push_back(make(width, fan_in));
    fan_in = width;
  }
  DenseLayer head = make(num_classes, fan_in);
  return EmbeddingModel(input_shape, std::move(hidden), std::move(head));
}

void EmbeddingModel::check_input(std::size_t size) const {
  if (size != input_shape_.size()) {
    throw Error(ErrorCode::kShapeMismatch, "input has " + std::to_string(size) + " values, model expects " +
                                               std::to_string(input_shape_.size()));
  }
}

ForwardTrace EmbeddingModel::forward(std::span<const double> flat_input) const {
  check_input(flat_input.size());
  ForwardTrace t;
  t.activations.reserve(hidden_.size() + 1);
  t.activations.emplace_back(flat_input.begin(), flat_input.end());
  for (const auto& layer : hidden_) {
    Vector a = matvec(layer.weights, t.activations.back());
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += layer.bias[i];
    tanh_inplace(a);
    t.activations.push_back(std::move(a));
  }
  t.logits = matvec(head_.weights, t.activations.back());
  for (std::size_t i = 0; i < t.logits.size(); ++i) t.logits[i] += head_.bias[i];
  t.probs = softmax(t.logits);
  return t;
}

ForwardTrace EmbeddingModel::forward(const Image& img) const {
  if (img.shape() != input_shape_) throw Error(ErrorCode::kShapeMismatch, "image shape differs from model input");
  return forward(img.pixels());
}

Vector EmbeddingModel::backward(const ForwardTrace& trace, std::span<const double> d_embedding,
                                std::span<const double> d_probs) const {
  Vector grad(embedding_dim(), 0.0);
  if (!d_embedding.empty()) {
    if (d_embedding.size() != grad.size()) throw Error(ErrorCode::kDimensionMismatch, "embedding gradient");
    std::copy(d_embedding.begin(), d_embedding.end(), grad.begin());
  }
  if (!d_probs.empty()) {
    if (d_probs.size() != num_classes()) throw Error(ErrorCode::kDimensionMismatch, "probability gradient");
    const Vector d_logits = softmax_backward(d_probs, trace.probs);
    axpy(1.0, matvec_transposed(head_.weights, d_logits), grad);
  }
  for (std::size_t l = hidden_.size(); l-- > 0;) {
    const Vector d_pre = tanh_backward(grad, trace.activations[l + 1]);
    grad = matvec_transposed(hidden_[l].weights, d_pre);
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

struct LayerGrad {
  Matrix weights;
  Vector bias;
};

std::vector<LayerGrad> zero_grads(const EmbeddingModel& model) {
  std::vector<LayerGrad> g;
  for (const auto& layer : model.hidden()) {
    g.push_back({Matrix(layer.weights.rows(), layer.weights.cols()), Vector(layer.bias.size(), 0.0)});
  }
  g.push_back({Matrix(model.head().weights.rows(), model.head().weights.cols()),
               Vector(model.head().bias.size(), 0.0)});
  return g;
}

void accumulate_outer(LayerGrad& g, std::span<const double> delta, std::span<const double> input) {
  for (std::size_t r = 0; r < delta.size(); ++r) {
    const double d = delta[r];
    g.bias[r] += d;
    if (d == 0.0) continue;
    auto row = g.weights.row(r);
    for (std::size_t c = 0; c < input.size(); ++c) row[c] += d * input[c];
  }
}

// Accumulates parameter gradients of the cross-entropy loss for one example.
// Returns the example's loss.
double accumulate_example(const EmbeddingModel& model, std::span<const double> input, std::uint32_t label,
                          std::vector<LayerGrad>& grads, bool& correct) {
  const ForwardTrace t = model.forward(input);
  const auto top = std::max_element(t.probs.begin(), t.probs.end()) - t.probs.begin();
  correct = static_cast<std::uint32_t>(top) == label;
  const double loss = -std::log(std::max(t.probs[label], 1e-300));

  Vector delta = t.probs;
  delta[label] -= 1.0;
  accumulate_outer(grads.back(), delta, t.activations.back());
  Vector upstream = matvec_transposed(model.head().weights, delta);
  for (std::size_t l = model.hidden().size(); l-- > 0;) {
    delta = tanh_backward(upstream, t.activations[l + 1]);
    accumulate_outer(grads[l], delta, t.activations[l]);
    if (l > 0) upstream = matvec_transposed(model.hidden()[l].weights, delta);
  }
  return loss;
}

void apply_step(DenseLayer& layer, const LayerGrad& g, double lr, double batch, double weight_decay) {
  auto w = layer.weights.data();
  const auto gw = g.weights.data();
  for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * (gw[i] / batch + weight_decay * w[i]);
  for (std::size_t i = 0; i < layer.bias.size(); ++i) layer.bias[i] -= lr * g.bias[i] / batch;
}

}  // namespace

InputStandardization compute_standardization(const LabeledDataset& dataset) {
  if (dataset.empty()) throw Error(ErrorCode::kInvalidArgument, "standardization needs data");
  const std::size_t p = dataset.images.front().size();
  InputStandardization stats{Vector(p, 0.0), Vector(p, 0.0)};
  for (const auto& img : dataset.images) axpy(1.0, img.pixels(), stats.mean);
  const double n = static_cast<double>(dataset.size());
  for (double& m : stats.mean) m /= n;
  for (const auto& img : dataset.images) {
    const auto px = img.pixels();
    for (std::size_t i = 0; i < p; ++i) stats.stddev[i] += (px[i] - stats.mean[i]) * (px[i] - stats.mean[i]);
  }
  for (double& s : stats.stddev) s = std::max(std::sqrt(s / n), kMinPixelStddev);
  return stats;
}

EmbeddingModel fold_standardization(const EmbeddingModel& model, const InputStandardization& stats) {
  DenseLayer first = model.hidden().front();
  if (stats.mean.size() != first.weights.cols() || stats.stddev.size() != first.weights.cols()) {
    throw Error(ErrorCode::kShapeMismatch, "standardization size differs from model input");
  }
  for (std::size_t r = 0; r < first.weights.rows(); ++r) {
    auto row = first.weights.row(r);
    double shift = 0.0;
    for (std::size_t c = 0; c < row.size(); ++c) {
      row[c] /= stats.stddev[c];
      shift += row[c] * stats.mean[c];
    }
    first.bias[r] -= shift;
  }
  std::vector<DenseLayer> hidden = model.hidden();
  hidden.front() = std::move(first);
  return EmbeddingModel(model.input_shape(), std::move(hidden), model.head());
}

TrainResult train(const LabeledDataset& dataset, const TrainConfig& cfg) {
  if (dataset.empty()) throw Error(ErrorCode::kInvalidArgument, "training set is empty");
  dataset.validate();
  if (cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) || cfg.weight_decay < 0.0) {
    throw Error(ErrorCode::kInvalidArgument, "batch size and learning rate must be positive");
  }

  TrainResult result;
  result.model = EmbeddingModel::initialize(dataset.images.front().shape(), cfg.hidden_widths,
                                            dataset.num_classes, cfg.seed);
  EmbeddingModel& model = result.model;

  const InputStandardization stats = compute_standardization(dataset);
  std::vector<Vector> inputs;
  inputs.reserve(dataset.size());
  for (const auto& img : dataset.images) {
    Vector x(img.pixels().begin(), img.pixels().end());
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = (x[i] - stats.mean[i]) / stats.stddev[i];
    inputs.push_back(std::move(x));
  }

  std::mt19937_64 rng(derive_seed(cfg.seed, 200));
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t hits = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      auto grads = zero_grads(model);
      for (std::size_t i = start; i < stop; ++i) {
        bool correct = false;
        const std::size_t idx = order[i];
        loss_sum += accumulate_example(model, inputs[idx], dataset.labels[idx], grads, correct);
        hits += correct ? 1 : 0;
      }
      if (!std::isfinite(loss_sum)) {
        throw Error(ErrorCode::kDiverged, "loss became non-finite in epoch " + std::to_string(epoch));
      }
      const double batch = static_cast<double>(stop - start);
      for (std::size_t l = 0; l < model.hidden().size(); ++l) {
        apply_step(model.mutable_hidden()[l], grads[l], cfg.learning_rate, batch, cfg.weight_decay);
      }
      apply_step(model.mutable_head(), grads.back(), cfg.learning_rate, batch, cfg.weight_decay);
    }
    const double n = static_cast<double>(dataset.size());
    result.log.push_back({epoch, loss_sum / n, static_cast<double>(hits) / n});
  }
  result.model = fold_standardization(model, stats);
  result.final_accuracy = accuracy(result.model, dataset);
  return result;
}

double accuracy(const EmbeddingModel& model, const LabeledDataset& dataset) {
  if (dataset.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const Vector p = model.forward(dataset.images[i]).probs;
    const auto top = std::max_element(p.begin(), p.end()) - p.begin();
    hits += static_cast<std::uint32_t>(top) == dataset.labels[i] ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(dataset.size());
}

Vector embed(const EmbeddingModel& model, const Image& img) { return model.forward(img).embedding(); }

Vector predict_probs(const EmbeddingModel& model, const Image& img) { return model.forward(img).probs; }

std::pair<double, ImageGradient> value_and_input_gradient(const EmbeddingModel& model, const Image& img,
                                                          const Downstream& downstream) {
  const ForwardTrace trace = model.forward(img);
  const HeadGradient head = downstream(trace.embedding(), trace.probs);
  Vector grad = model.backward(trace, head.d_embedding, head.d_probs);
  if (!all_finite(grad)) throw Error(ErrorCode::kNonFiniteGradient, "input gradient is not finite");
  return {head.value, ImageGradient(img.shape(), std::move(grad))};
}

ImageGradient input_gradient(const EmbeddingModel& model, const Image& img, const Downstream& downstream) {
  return value_and_input_gradient(model, img, downstream).second;
}

// ---------------------------------------------------------------------------
// CLIP-style word bank
// ---------------------------------------------------------------------------

namespace {

Matrix class_means(const EmbeddingModel& model, const LabeledDataset& data) {
  data.validate();
  const std::size_t dim = model.embedding_dim();
  Matrix means(data.num_classes, dim);
  std::vector<std::size_t> counts(data.num_classes, 0);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Vector z = embed(model, data.images[i]);
    axpy(1.0, z, means.row(data.labels[i]));
    ++counts[data.labels[i]];
  }
  for (std::size_t k = 0; k < data.num_classes; ++k) {
    if (counts[k] == 0) {
      throw Error(ErrorCode::kClassUnderpopulated, "word bank class " + std::to_string(k) + " has no examples");
    }
    for (double& v : means.row(k)) v /= static_cast<double>(counts[k]);
  }
  return means;
}

Vector cosine_row_logits(const Matrix& words, std::span<const double> z, double z_norm) {
  Vector out(words.rows());
  for (std::size_t i = 0; i < words.rows(); ++i) {
    const double w_norm = norm2(words.row(i));
    out[i] = w_norm == 0.0 ? 0.0 : dot(words.row(i), z) / (w_norm * z_norm);
  }
  return out;
}

}  // namespace

WordBank build_word_bank(const EmbeddingModel& model, const LabeledDataset& in_data,
                         const LabeledDataset& out_data) {
  return {class_means(model, in_data), class_means(model, out_data)};
}

std::pair<Vector, Vector> cosine_logits(const WordBank& bank, std::span<const double> embedding) {
  if (bank.in_words.cols() != embedding.size() || bank.out_words.cols() != embedding.size()) {
    throw Error(ErrorCode::kDimensionMismatch, "word bank dimension differs from embedding");
  }
  if (bank.in_words.rows() == 0 || bank.out_words.rows() == 0) {
    throw Error(ErrorCode::kInvalidArgument, "word bank needs at least one in-word and one out-word");
  }
  const double z_norm = norm2(embedding);
  if (z_norm < 1e-12) throw Error(ErrorCode::kZeroNormEmbedding, "embedding norm below 1e-12");
  return {cosine_row_logits(bank.in_words, embedding, z_norm), cosine_row_logits(bank.out_words, embedding, z_norm)};
}

std::pair<Vector, Vector> clip_style_logits(const EmbeddingModel& model, const WordBank& bank, const Image& img) {
  return cosine_logits(bank, embed(model, img));
}

// ---------------------------------------------------------------------------
// Checkpoint
// ---------------------------------------------------------------------------

namespace {
constexpr std::uint32_t kModelVersion = 1;

void write_layer(binary::Writer& w, const DenseLayer& layer) {
  w.u32(static_cast<std::uint32_t>(layer.weights.rows()));
  w.u32(static_cast<std::uint32_t>(layer.weights.cols()));
  for (double v : layer.weights.data()) w.f32(v);
  for (double v : layer.bias) w.f32(v);
}

DenseLayer read_layer(binary::Reader& r) {
  const std::size_t rows = r.u32();
  const std::size_t cols = r.u32();
  if (r.remaining() / 4 < rows * cols + rows) throw Error(ErrorCode::kTruncatedFile, "model layer payload");
  std::vector<double> w(rows * cols);
  for (double& v : w) v = r.f32();
  Vector b(rows);
  for (double& v : b) v = r.f32();
  return {Matrix(rows, cols, std::move(w)), std::move(b)};
}
}  // namespace

void save_model(const std::filesystem::path& path, const EmbeddingModel& model) {
  binary::Writer w;
  w.bytes("OODM");
  w.u32(kModelVersion);
  w.u32(static_cast<std::uint32_t>(model.input_shape().height));
  w.u32(static_cast<std::uint32_t>(model.input_shape().width));
  w.u32(static_cast<std::uint32_t>(model.input_shape().channels));
  w.u32(static_cast<std::uint32_t>(model.hidden().size() + 1));
  for (const auto& layer : model.hidden()) write_layer(w, layer);
  write_layer(w, model.head());
  w.save(path);
}

EmbeddingModel load_model(const std::filesystem::path& path) {
  auto r = binary::Reader::open(path);
  r.expect_magic("OODM");
  r.u32();
  ImageShape shape;
  shape.height = r.u32();
  shape.width = r.u32();
  shape.channels = r.u32();
  const std::uint32_t layers = r.u32();
  if (layers < 2) throw Error(ErrorCode::kMalformedFile, path.string() + " needs a hidden layer and a head");
  std::vector<DenseLayer> hidden;
  for (std::uint32_t i = 0; i + 1 < layers; ++i) hidden.push_back(read_layer(r));
  DenseLayer head = read_layer(r);
  return EmbeddingModel(shape, std::move(hidden), std::move(head));
}

}  // namespace oodadv
