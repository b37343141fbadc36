#include "oodadv/data.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "binary_io.hpp"
#include "oodadv/error.hpp"
#include "rng.hpp"

namespace oodadv {

Image::Image(ImageShape shape, double fill) : shape_(shape), pixels_(shape.size(), fill) {}

Image::Image(ImageShape shape, std::vector<double> pixels) : shape_(shape), pixels_(std::move(pixels)) {
  if (pixels_.size() != shape_.size()) {
    throw Error(ErrorCode::kShapeMismatch, "pixel count " + std::to_string(pixels_.size()) +
                                               " does not match shape size " + std::to_string(shape_.size()));
  }
}

bool Image::in_unit_range() const {
  return std::all_of(pixels_.begin(), pixels_.end(), [](double p) { return p >= 0.0 && p <= 1.0; });
}

void LabeledDataset::validate() const {
  if (images.size() != labels.size()) {
    throw Error(ErrorCode::kInvalidArgument, "image and label counts differ");
  }
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (labels[i] >= num_classes) {
      throw Error(ErrorCode::kInvalidArgument, "label " + std::to_string(labels[i]) + " out of range");
    }
    if (images[i].shape() != images.front().shape()) {
      throw Error(ErrorCode::kShapeMismatch, "image " + std::to_string(i) + " has a different shape");
    }
  }
}

std::string_view to_string(OodMode mode) { return mode == OodMode::kNear ? "near" : "far"; }

OodMode parse_ood_mode(std::string_view text) {
  if (text == "near") return OodMode::kNear;
  if (text == "far") return OodMode::kFar;
  throw Error(ErrorCode::kConfigError, "unknown ood mode \"" + std::string(text) + "\"");
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

namespace {

// Stream tags keep each random component independent of the others, so e.g.
// switching the OOD mode never perturbs the in-distribution draws.
enum Stream : std::uint64_t {
  kInMeans = 1,
  kDecoder = 2,
  kInSamples = 3,
  kOodMeans = 4,
  kFarDecoder = 5,
  kOodSamples = 6,
  kNuisanceDecoder = 7,
};

constexpr double kDecoderBiasScale = 0.5;

struct Decoder {
  Matrix weights;  // pixels × latent
  Vector bias;
  double scale = 1.0;
  double noise = 0.0;

  Image render(const Vector& latent, const Decoder& nuisance, ImageShape shape,
               std::mt19937_64& rng) const {
    std::normal_distribution<double> gauss(0.0, 1.0);
    const Vector pre = matvec(weights, latent);
    Vector shared(pre.size(), 0.0);
    if (nuisance.weights.cols() > 0) {
      Vector n(nuisance.weights.cols());
      for (double& v : n) v = gauss(rng);
      shared = matvec(nuisance.weights, n);
    }
    std::vector<double> px(pre.size());
    for (std::size_t p = 0; p < pre.size(); ++p) {
      const double a = scale * pre[p] + nuisance.scale * shared[p] + bias[p] + noise * gauss(rng);
      px[p] = 1.0 / (1.0 + std::exp(-a));
    }
    return Image(shape, std::move(px));
  }
};

Decoder make_decoder(const SyntheticSpec& spec, Stream stream) {
  std::mt19937_64 rng(derive_seed(spec.seed, stream));
  std::normal_distribution<double> gauss(0.0, 1.0);
  const std::size_t pixels = spec.shape.size();
  Decoder d;
  d.weights = Matrix(pixels, spec.latent_dim);
  for (double& w : d.weights.data()) w = gauss(rng);
  d.bias.resize(pixels);
  for (double& b : d.bias) b = kDecoderBiasScale * gauss(rng);
  // Keeps pre-activations O(gain) independent of latent size and separation.
  d.noise = spec.pixel_noise;
  d.scale = spec.contrast / std::sqrt(static_cast<double>(spec.latent_dim) *
                                     (1.0 + spec.separation * spec.separation));
  return d;
}

std::vector<Vector> draw_means(const SyntheticSpec& spec, Stream stream) {
  std::mt19937_64 rng(derive_seed(spec.seed, stream));
  std::normal_distribution<double> gauss(0.0, spec.separation);
  std::vector<Vector> means(spec.num_classes, Vector(spec.latent_dim));
  for (auto& m : means)
    for (double& v : m) v = gauss(rng);
  return means;
}

LabeledDataset render_set(const SyntheticSpec& spec, const std::vector<Vector>& means,
                          const Decoder& decoder, const Decoder& nuisance, Stream stream,
                          std::size_t n_per_class) {
  std::mt19937_64 rng(derive_seed(spec.seed, stream));
  std::normal_distribution<double> gauss(0.0, 1.0);
  LabeledDataset out;
  out.num_classes = spec.num_classes;
  out.images.reserve(n_per_class * spec.num_classes);
  Vector latent(spec.latent_dim);
  for (std::size_t i = 0; i < n_per_class; ++i) {
    for (std::uint32_t k = 0; k < spec.num_classes; ++k) {
      for (std::size_t l = 0; l < latent.size(); ++l) latent[l] = means[k][l] + gauss(rng);
      out.images.push_back(decoder.render(latent, nuisance, spec.shape, rng));
      out.labels.push_back(k);
    }
  }
  return out;
}

}  // namespace

std::pair<LabeledDataset, LabeledDataset> generate_synthetic(const SyntheticSpec& spec,
                                                             std::size_t n_per_class) {
  if (n_per_class < 1) throw Error(ErrorCode::kInvalidArgument, "n_per_class must be >= 1");
  if (spec.num_classes < 2) throw Error(ErrorCode::kInvalidArgument, "need at least 2 classes");
  if (!(spec.contrast > 0.0) || spec.pixel_noise < 0.0 || spec.nuisance_gain < 0.0) {
    throw Error(ErrorCode::kInvalidArgument, "contrast must be positive and noise terms non-negative");
  }
  if (!(spec.separation > 0.0)) throw Error(ErrorCode::kInvalidArgument, "separation must be positive");
  if (spec.shape.size() == 0 || spec.latent_dim == 0) {
    throw Error(ErrorCode::kDimensionZero, "image shape and latent dim must be non-zero");
  }

  Decoder nuisance;
  if (spec.nuisance_dim > 0) {
    std::mt19937_64 rng(derive_seed(spec.seed, kNuisanceDecoder));
    std::normal_distribution<double> gauss(0.0, 1.0);
    nuisance.weights = Matrix(spec.shape.size(), spec.nuisance_dim);
    for (double& w : nuisance.weights.data()) w = gauss(rng);
    nuisance.scale = spec.nuisance_gain / std::sqrt(static_cast<double>(spec.nuisance_dim));
  }
  const Decoder decoder = make_decoder(spec, kDecoder);
  const Decoder far = spec.ood_mode == OodMode::kFar ? make_decoder(spec, kFarDecoder) : decoder;
  LabeledDataset in =
      render_set(spec, draw_means(spec, kInMeans), decoder, nuisance, kInSamples, n_per_class);
  LabeledDataset out =
      render_set(spec, draw_means(spec, kOodMeans), far, nuisance, kOodSamples, n_per_class);
  return {std::move(in), std::move(out)};
}

std::pair<LabeledDataset, LabeledDataset> split_per_class(const LabeledDataset& data,
                                                          std::size_t first_per_class) {
  LabeledDataset head, tail;
  head.num_classes = tail.num_classes = data.num_classes;
  std::vector<std::size_t> seen(data.num_classes, 0);
  for (std::size_t i = 0; i < data.size(); ++i) {
    LabeledDataset& dst = seen[data.labels[i]]++ < first_per_class ? head : tail;
    dst.images.push_back(data.images[i]);
    dst.labels.push_back(data.labels[i]);
  }
  return {std::move(head), std::move(tail)};
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

LabeledDataset load_cifar_binary(const std::filesystem::path& path, std::optional<std::size_t> limit) {
  const auto bytes = binary::read_file(path);
  if (bytes.size() % kCifarRecordBytes != 0) {
    throw Error(ErrorCode::kMalformedFile, path.string() + " length " + std::to_string(bytes.size()) +
                                               " is not a multiple of " + std::to_string(kCifarRecordBytes));
  }
  std::size_t records = bytes.size() / kCifarRecordBytes;
  if (limit) records = std::min(records, *limit);

  constexpr std::size_t plane = 32 * 32;
  LabeledDataset out;
  out.images.reserve(records);
  std::uint32_t max_label = 0;
  for (std::size_t r = 0; r < records; ++r) {
    const std::uint8_t* rec = bytes.data() + r * kCifarRecordBytes;
    const std::uint32_t label = rec[0];
    max_label = std::max(max_label, label);
    Image img(kCifarShape);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < plane; ++p) img.at(p / 32, p % 32, c) = rec[1 + c * plane + p] / 255.0;
    out.images.push_back(std::move(img));
    out.labels.push_back(label);
  }
  out.num_classes = records == 0 ? 0 : max_label + 1;
  return out;
}

void save_cifar_binary(const std::filesystem::path& path, const LabeledDataset& data) {
  data.validate();
  std::string buf;
  buf.reserve(data.size() * kCifarRecordBytes);
  constexpr std::size_t plane = 32 * 32;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Image& img = data.images[i];
    if (img.shape() != kCifarShape) throw Error(ErrorCode::kShapeMismatch, "CIFAR records are 32x32x3");
    if (data.labels[i] > 255) throw Error(ErrorCode::kInvalidArgument, "CIFAR labels fit in one byte");
    buf.push_back(static_cast<char>(data.labels[i]));
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t p = 0; p < plane; ++p) {
        const double v = std::clamp(img.at(p / 32, p % 32, c), 0.0, 1.0);
        buf.push_back(static_cast<char>(static_cast<std::uint8_t>(std::lround(v * 255.0))));
      }
    }
  }
  binary::write_file(path, buf);
}

namespace {
constexpr std::uint32_t kEmbeddingVersion = 1;
constexpr std::uint32_t kImageDatasetVersion = 1;
}  // namespace

EmbeddingDataset load_embeddings(const std::filesystem::path& path) {
  auto in = binary::Reader::open(path);
  in.expect_magic("OODE");
  in.u32();  // version; only 1 exists
  const std::uint64_t n = in.u64();
  const std::uint32_t d = in.u32();
  const bool has_labels = in.u8() != 0;
  if (d == 0) throw Error(ErrorCode::kDimensionZero, path.string() + " declares D = 0");

  EmbeddingDataset out;
  out.dim = d;
  if (in.remaining() / (4ull * d) < n) {
    throw Error(ErrorCode::kTruncatedFile, path.string() + " payload shorter than N*D floats");
  }
  out.embeddings.resize(n, Vector(d));
  for (auto& row : out.embeddings)
    for (double& v : row) v = in.f32();
  if (has_labels) {
    std::vector<std::uint32_t> labels(n);
    for (auto& l : labels) l = in.u32();
    out.labels = std::move(labels);
  }
  return out;
}

void save_embeddings(const std::filesystem::path& path, const EmbeddingDataset& data) {
  if (data.dim == 0) throw Error(ErrorCode::kDimensionZero, "embedding dim must be positive");
  if (data.labels && data.labels->size() != data.size()) {
    throw Error(ErrorCode::kInvalidArgument, "label count does not match embedding count");
  }
  binary::Writer w;
  w.bytes("OODE");
  w.u32(kEmbeddingVersion);
  w.u64(data.size());
  w.u32(static_cast<std::uint32_t>(data.dim));
  w.u8(data.labels ? 1 : 0);
  for (const auto& row : data.embeddings) {
    if (row.size() != data.dim) throw Error(ErrorCode::kDimensionMismatch, "ragged embedding rows");
    for (double v : row) w.f32(v);
  }
  if (data.labels)
    for (auto l : *data.labels) w.u32(l);
  w.save(path);
}

LabeledDataset load_image_dataset(const std::filesystem::path& path) {
  auto in = binary::Reader::open(path);
  in.expect_magic("OODI");
  in.u32();
  const std::uint64_t n = in.u64();
  ImageShape shape;
  shape.height = in.u32();
  shape.width = in.u32();
  shape.channels = in.u32();
  LabeledDataset out;
  out.num_classes = in.u32();
  if (shape.size() == 0) throw Error(ErrorCode::kDimensionZero, path.string() + " has an empty image shape");
  out.labels.resize(n);
  for (auto& l : out.labels) l = in.u32();
  if (in.remaining() / (4 * shape.size()) < n) {
    throw Error(ErrorCode::kTruncatedFile, path.string() + " pixel payload is short");
  }
  out.images.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    std::vector<double> px(shape.size());
    for (double& p : px) p = in.f32();
    out.images.emplace_back(shape, std::move(px));
  }
  out.validate();
  return out;
}

void save_image_dataset(const std::filesystem::path& path, const LabeledDataset& data) {
  data.validate();
  const ImageShape shape = data.empty() ? ImageShape{} : data.images.front().shape();
  binary::Writer w;
  w.bytes("OODI");
  w.u32(kImageDatasetVersion);
  w.u64(data.size());
  w.u32(static_cast<std::uint32_t>(shape.height));
  w.u32(static_cast<std::uint32_t>(shape.width));
  w.u32(static_cast<std::uint32_t>(shape.channels));
  w.u32(data.num_classes);
  for (auto l : data.labels) w.u32(l);
  for (const auto& img : data.images)
    for (double p : img.pixels()) w.f32(p);
  w.save(path);
}

// ---------------------------------------------------------------------------
// Resize
// ---------------------------------------------------------------------------

namespace {

struct Tap {
  std::size_t lower = 0;
  std::size_t upper = 0;
  double lerp = 0.0;
};

std::vector<Tap> axis_taps(std::size_t in_size, std::size_t out_size) {
  const double scale = static_cast<double>(in_size) / static_cast<double>(out_size);
  const double last = static_cast<double>(in_size - 1);
  std::vector<Tap> taps(out_size);
  for (std::size_t i = 0; i < out_size; ++i) {
    const double src = std::clamp((static_cast<double>(i) + 0.5) * scale - 0.5, 0.0, last);
    Tap& t = taps[i];
    t.lower = static_cast<std::size_t>(std::floor(src));
    t.upper = std::min(t.lower + 1, in_size - 1);
    t.lerp = src - static_cast<double>(t.lower);
  }
  return taps;
}

void check_resize_target(std::size_t h, std::size_t w) {
  if (h < 1 || w < 1) throw Error(ErrorCode::kInvalidArgument, "resize target must be at least 1x1");
}

}  // namespace

Image resize_bilinear_unclamped(const Image& img, std::size_t out_h, std::size_t out_w) {
  check_resize_target(out_h, out_w);
  const auto ys = axis_taps(img.height(), out_h);
  const auto xs = axis_taps(img.width(), out_w);
  const std::size_t channels = img.channels();
  Image out({out_h, out_w, channels});
  for (std::size_t y = 0; y < out_h; ++y) {
    const Tap& ty = ys[y];
    for (std::size_t x = 0; x < out_w; ++x) {
      const Tap& tx = xs[x];
      for (std::size_t c = 0; c < channels; ++c) {
        const double top = img.at(ty.lower, tx.lower, c) +
                           (img.at(ty.lower, tx.upper, c) - img.at(ty.lower, tx.lower, c)) * tx.lerp;
        const double bottom = img.at(ty.upper, tx.lower, c) +
                              (img.at(ty.upper, tx.upper, c) - img.at(ty.upper, tx.lower, c)) * tx.lerp;
        out.at(y, x, c) = top + (bottom - top) * ty.lerp;
      }
    }
  }
  return out;
}

Image resize_bilinear(const Image& img, std::size_t out_h, std::size_t out_w) {
  Image out = resize_bilinear_unclamped(img, out_h, out_w);
  for (double& p : out.pixels()) p = std::clamp(p, 0.0, 1.0);
  return out;
}

ImageGradient resize_adjoint(const ImageGradient& grad_out, std::size_t in_h, std::size_t in_w) {
  check_resize_target(in_h, in_w);
  const auto ys = axis_taps(in_h, grad_out.height());
  const auto xs = axis_taps(in_w, grad_out.width());
  const std::size_t channels = grad_out.channels();
  ImageGradient grad_in({in_h, in_w, channels});
  for (std::size_t y = 0; y < grad_out.height(); ++y) {
    const Tap& ty = ys[y];
    for (std::size_t x = 0; x < grad_out.width(); ++x) {
      const Tap& tx = xs[x];
      const double w00 = (1.0 - ty.lerp) * (1.0 - tx.lerp);
      const double w01 = (1.0 - ty.lerp) * tx.lerp;
      const double w10 = ty.lerp * (1.0 - tx.lerp);
      const double w11 = ty.lerp * tx.lerp;
      for (std::size_t c = 0; c < channels; ++c) {
        const double g = grad_out.at(y, x, c);
        grad_in.at(ty.lower, tx.lower, c) += w00 * g;
        grad_in.at(ty.lower, tx.upper, c) += w01 * g;
        grad_in.at(ty.upper, tx.lower, c) += w10 * g;
        grad_in.at(ty.upper, tx.upper, c) += w11 * g;
      }
    }
  }
  return grad_in;
}

LabeledDataset resize_dataset(const LabeledDataset& data, std::size_t out_h, std::size_t out_w) {
  LabeledDataset out;
  out.num_classes = data.num_classes;
  out.labels = data.labels;
  out.images.reserve(data.size());
  for (const auto& img : data.images) out.images.push_back(resize_bilinear(img, out_h, out_w));
  return out;
}

}  // namespace oodadv
