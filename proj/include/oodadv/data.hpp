#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "oodadv/numerics.hpp"

namespace oodadv {

struct ImageShape {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;

  std::size_t size() const noexcept { return height * width * channels; }
  bool operator==(const ImageShape&) const = default;
};

// H×W×C tensor, channel-fastest (index (y·W + x)·C + c). Loaded and generated
// images keep every pixel in [0,1]; the same type carries image-shaped
// gradients, which are unbounded.
class Image {
 public:
  Image() = default;
  explicit Image(ImageShape shape, double fill = 0.0);
  Image(ImageShape shape, std::vector<double> pixels);

  const ImageShape& shape() const noexcept { return shape_; }
  std::size_t height() const noexcept { return shape_.height; }
  std::size_t width() const noexcept { return shape_.width; }
  std::size_t channels() const noexcept { return shape_.channels; }
  std::size_t size() const noexcept { return pixels_.size(); }

  double& at(std::size_t y, std::size_t x, std::size_t c) {
    return pixels_[(y * shape_.width + x) * shape_.channels + c];
  }
  double at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels_[(y * shape_.width + x) * shape_.channels + c];
  }

  std::span<double> pixels() noexcept { return pixels_; }
  std::span<const double> pixels() const noexcept { return pixels_; }

  bool in_unit_range() const;

  bool operator==(const Image&) const = default;

 private:
  ImageShape shape_;
  std::vector<double> pixels_;
};

using ImageGradient = Image;

struct LabeledDataset {
  std::vector<Image> images;
  std::vector<std::uint32_t> labels;
  std::uint32_t num_classes = 0;

  std::size_t size() const noexcept { return images.size(); }
  bool empty() const noexcept { return images.empty(); }
  // Throws ShapeMismatch / InvalidArgument if the invariants do not hold.
  void validate() const;

  bool operator==(const LabeledDataset&) const = default;
};

struct EmbeddingDataset {
  std::vector<Vector> embeddings;
  std::optional<std::vector<std::uint32_t>> labels;
  std::size_t dim = 0;

  std::size_t size() const noexcept { return embeddings.size(); }
  bool operator==(const EmbeddingDataset&) const = default;
};

enum class OodMode { kNear, kFar };

std::string_view to_string(OodMode mode);
OodMode parse_ood_mode(std::string_view text);

struct SyntheticSpec {
  std::uint32_t num_classes = 10;
  ImageShape shape{32, 32, 3};
  std::size_t latent_dim = 8;
  double separation = 3.0;
  // Decoder gain before the sigmoid and pre-sigmoid pixel noise.
  double contrast = 0.3;
  double pixel_noise = 0.05;
  // Class-independent latent factors shared by every image, rendered through
  // their own decoder at the given pre-sigmoid gain.
  std::size_t nuisance_dim = 16;
  double nuisance_gain = 2.0;
  OodMode ood_mode = OodMode::kNear;
  std::uint64_t seed = 0;
};

// Returns (in-distribution, out-of-distribution), each with n_per_class
// images per class, interleaved by class. The in-distribution half depends
// only on the seed and geometry, never on ood_mode.
std::pair<LabeledDataset, LabeledDataset> generate_synthetic(const SyntheticSpec& spec,
                                                             std::size_t n_per_class);

// Splits a dataset into the first `first_per_class` examples of every class
// and the remainder, preserving order.
std::pair<LabeledDataset, LabeledDataset> split_per_class(const LabeledDataset& data,
                                                          std::size_t first_per_class);

// CIFAR binary layout: per record one label byte then 1024 R, 1024 G, 1024 B
// bytes, row-major.
inline constexpr std::size_t kCifarRecordBytes = 3073;
inline constexpr ImageShape kCifarShape{32, 32, 3};

LabeledDataset load_cifar_binary(const std::filesystem::path& path,
                                 std::optional<std::size_t> limit = std::nullopt);
// Pixels are quantized to round(255·p).
void save_cifar_binary(const std::filesystem::path& path, const LabeledDataset& data);

// "OODE" embedding file: version u32, N u64, D u32, label flag u8, N·D float32,
// then N u32 labels when flagged. Little-endian throughout.
EmbeddingDataset load_embeddings(const std::filesystem::path& path);
void save_embeddings(const std::filesystem::path& path, const EmbeddingDataset& data);

// "OODI" image dataset file used by the CLI for arbitrary shapes: version u32,
// N u64, H u32, W u32, C u32, K u32, N u32 labels, N·H·W·C float32 pixels.
LabeledDataset load_image_dataset(const std::filesystem::path& path);
void save_image_dataset(const std::filesystem::path& path, const LabeledDataset& data);

// Bilinear resize with half-pixel centers: output pixel i samples source
// coordinate (i + 0.5)·(in/out) − 0.5 clamped to [0, in − 1]. Output clamped
// to [0,1].
Image resize_bilinear(const Image& img, std::size_t out_h, std::size_t out_w);
// Same interpolation without the output clamp; linear in img.
Image resize_bilinear_unclamped(const Image& img, std::size_t out_h, std::size_t out_w);
// Transpose of resize_bilinear_unclamped.
ImageGradient resize_adjoint(const ImageGradient& grad_out, std::size_t in_h, std::size_t in_w);

LabeledDataset resize_dataset(const LabeledDataset& data, std::size_t out_h, std::size_t out_w);

}  // namespace oodadv
