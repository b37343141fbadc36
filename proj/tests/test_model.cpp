#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "oodadv/error.hpp"
#include "oodadv/model.hpp"
#include "oracles.hpp"

using namespace oodadv;

namespace {

LabeledDataset two_blobs(std::size_t n_per_class, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 0.05);
  LabeledDataset ds;
  ds.num_classes = 2;
  for (std::size_t i = 0; i < n_per_class; ++i) {
    for (std::uint32_t k = 0; k < 2; ++k) {
      Image img({4, 4, 1});
      for (std::size_t p = 0; p < img.size(); ++p) {
        const double centre = (p % 2 == k) ? 0.7 : 0.3;
        img.pixels()[p] = std::clamp(centre + noise(rng), 0.0, 1.0);
      }
      ds.images.push_back(std::move(img));
      ds.labels.push_back(k);
    }
  }
  return ds;
}

// Forward pass written with plain loops, independent of the library's matvec.
Vector reference_probs(const EmbeddingModel& m, const Vector& x) {
  Vector a = x;
  for (const auto& layer : m.hidden()) {
    Vector next(layer.weights.rows());
    for (std::size_t r = 0; r < next.size(); ++r) {
      double s = layer.bias[r];
      for (std::size_t c = 0; c < a.size(); ++c) s += layer.weights(r, c) * a[c];
      next[r] = std::tanh(s);
    }
    a = next;
  }
  Vector logits(m.num_classes());
  double top = -1e300;
  for (std::size_t r = 0; r < logits.size(); ++r) {
    double s = m.head().bias[r];
    for (std::size_t c = 0; c < a.size(); ++c) s += m.head().weights(r, c) * a[c];
    logits[r] = s;
    top = std::max(top, s);
  }
  double z = 0.0;
  for (double& l : logits) z += (l = std::exp(l - top));
  for (double& l : logits) l /= z;
  return logits;
}

Image random_image(ImageShape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img(shape);
  for (double& p : img.pixels()) p = u(rng);
  return img;
}

}  // namespace

TEST_CASE("training separates a linearly separable set") {
  TrainConfig cfg;
  cfg.epochs = 20;
  cfg.hidden_widths = {16, 8};
  const auto ds = two_blobs(40, 3);
  const TrainResult res = train(ds, cfg);
  CHECK(res.final_accuracy >= 0.99);
  CHECK(accuracy(res.model, ds) >= 0.99);
  CHECK(res.log.size() == 20);
}

TEST_CASE("zero epochs returns the folded initialization") {
  TrainConfig cfg;
  cfg.epochs = 0;
  cfg.hidden_widths = {8, 4};
  cfg.seed = 11;
  const auto ds = two_blobs(5, 1);
  const TrainResult res = train(ds, cfg);
  const auto init = EmbeddingModel::initialize(ds.images[0].shape(), cfg.hidden_widths, 2, cfg.seed);
  CHECK(res.model == fold_standardization(init, compute_standardization(ds)));
  CHECK(res.log.empty());
}

TEST_CASE("training is deterministic for a fixed seed") {
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.hidden_widths = {8, 4};
  const auto ds = two_blobs(10, 2);
  CHECK(train(ds, cfg).model == train(ds, cfg).model);
  TrainConfig other = cfg;
  other.seed = 2;
  CHECK_FALSE(train(ds, other).model == train(ds, cfg).model);
}

TEST_CASE("training rejects bad configurations") {
  const auto ds = two_blobs(2, 2);
  TrainConfig cfg;
  cfg.batch_size = 0;
  CHECK_THROWS_AS(train(ds, cfg), Error);
  CHECK_THROWS_AS(train(LabeledDataset{}, TrainConfig{}), Error);
}

TEST_CASE("folding standardization matches standardizing the input") {
  std::mt19937_64 rng(5);
  const auto model = EmbeddingModel::initialize({2, 2, 1}, {3}, 2, 4);
  InputStandardization stats{{0.1, 0.5, 0.4, 0.9}, {0.2, 1.0, 0.05, 0.3}};
  const auto folded = fold_standardization(model, stats);
  const Image img = random_image({2, 2, 1}, rng);
  Vector z(4);
  for (std::size_t i = 0; i < 4; ++i) z[i] = (img.pixels()[i] - stats.mean[i]) / stats.stddev[i];
  const auto a = folded.forward(img).probs, b = model.forward(z).probs;
  for (std::size_t k = 0; k < 2; ++k) CHECK(a[k] == doctest::Approx(b[k]).epsilon(1e-12));
}

TEST_CASE("embedding shapes and trivial forwards") {
  const ImageShape shape{2, 1, 1};
  SUBCASE("zero weights give a zero embedding") {
    DenseLayer hidden{Matrix(3, 2), Vector(3, 0.0)};
    DenseLayer head{Matrix(2, 3), Vector(2, 0.0)};
    const EmbeddingModel m(shape, {hidden}, head);
    const Vector z = embed(m, Image(shape));
    CHECK(z == Vector(3, 0.0));
    const Vector p = predict_probs(m, Image(shape));
    CHECK(p[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(p[1] == doctest::Approx(0.5).epsilon(1e-15));
  }
  SUBCASE("identity layer applies tanh elementwise") {
    DenseLayer hidden{Matrix::identity(2), Vector(2, 0.0)};
    DenseLayer head{Matrix(3, 2), Vector(3, 0.0)};
    const EmbeddingModel m(shape, {hidden}, head);
    const Vector z = embed(m, Image(shape, {0.3, 0.7}));
    CHECK(z[0] == doctest::Approx(std::tanh(0.3)).epsilon(1e-15));
    CHECK(z[1] == doctest::Approx(std::tanh(0.7)).epsilon(1e-15));
    const Vector p = predict_probs(m, Image(shape, {0.3, 0.7}));
    for (double v : p) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  }
  SUBCASE("shape mismatch") {
    const auto m = EmbeddingModel::initialize(shape, {4}, 2, 0);
    try {
      embed(m, Image({3, 1, 1}));
      FAIL("expected ShapeMismatch");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kShapeMismatch);
    }
  }
  SUBCASE("non-chaining layers are rejected") {
    DenseLayer hidden{Matrix(3, 2), Vector(3, 0.0)};
    DenseLayer head{Matrix(2, 4), Vector(2, 0.0)};
    CHECK_THROWS_AS(EmbeddingModel(shape, {hidden}, head), Error);
  }
}

TEST_CASE("forward matches a scalar reference and probabilities sum to one") {
  std::mt19937_64 rng(9);
  const auto m = EmbeddingModel::initialize({3, 3, 2}, {7, 5}, 4, 12);
  for (int trial = 0; trial < 20; ++trial) {
    const Image img = random_image({3, 3, 2}, rng);
    const Vector p = predict_probs(m, img);
    const Vector ref = reference_probs(m, Vector(img.pixels().begin(), img.pixels().end()));
    double sum = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
      CHECK(std::abs(p[k] - ref[k]) < 1e-12);
      CHECK(p[k] > 0.0);
      sum += p[k];
    }
    CHECK(std::abs(sum - 1.0) < 1e-12);
    CHECK(embed(m, img).size() == 5);
    CHECK(m.forward(img).probs == p);
  }
}

TEST_CASE("input gradients") {
  std::mt19937_64 rng(13);
  SUBCASE("constant downstream gives zero gradient") {
    const auto m = EmbeddingModel::initialize({2, 2, 1}, {5, 3}, 3, 1);
    const auto g = input_gradient(m, random_image({2, 2, 1}, rng),
                                  [](const Vector&, const Vector&) { return HeadGradient{4.0, {}, {}}; });
    for (double v : g.pixels()) CHECK(v == 0.0);
  }
  SUBCASE("single linear coordinate gives the weight row") {
    // tanh'(0) = 1, so at the zero pre-activation the gradient is the raw row.
    Matrix w(2, 4);
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t c = 0; c < 4; ++c) w(r, c) = 0.1 * (r + 1) * (c + 1) - 0.3;
    Vector bias(2);
    const Image img({2, 2, 1}, {0.2, 0.4, 0.1, 0.3});
    for (std::size_t r = 0; r < 2; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 4; ++c) s += w(r, c) * img.pixels()[c];
      bias[r] = -s;
    }
    const EmbeddingModel m({2, 2, 1}, {DenseLayer{w, bias}}, DenseLayer{Matrix(2, 2), Vector(2, 0.0)});
    const auto g = input_gradient(m, img, [](const Vector&, const Vector&) {
      return HeadGradient{0.0, {0.0, 1.0}, {}};
    });
    for (std::size_t c = 0; c < 4; ++c) CHECK(g.pixels()[c] == doctest::Approx(w(1, c)).epsilon(1e-15));
  }
  SUBCASE("embedding and probability heads agree with finite differences") {
    const auto m = EmbeddingModel::initialize({3, 2, 2}, {9, 6}, 4, 21);
    const Vector u{0.3, -1.0, 0.7, 0.2, 0.5, -0.4};
    const Vector v{1.0, -2.0, 0.5, 3.0};
    Downstream head = [&](const Vector& z, const Vector& p) {
      HeadGradient h;
      h.value = dot(u, z) * dot(u, z) + dot(v, p);
      h.d_embedding = u;
      for (double& e : h.d_embedding) e *= 2.0 * dot(u, z);
      h.d_probs = v;
      return h;
    };
    for (int trial = 0; trial < 5; ++trial) {
      const Image img = random_image({3, 2, 2}, rng);
      DifferentiableFunction fn{
          [&](std::span<const double> x) {
            const auto t = m.forward(x);
            return head(t.embedding(), t.probs).value;
          },
          [&](std::span<const double> x) {
            const auto g = input_gradient(m, Image({3, 2, 2}, Vector(x.begin(), x.end())), head);
            return Vector(g.pixels().begin(), g.pixels().end());
          }};
      CHECK(input_gradient_check(fn, Vector(img.pixels().begin(), img.pixels().end()), 1e-4) < 1e-6);
    }
  }
  SUBCASE("non-finite gradient is reported") {
    const auto m = EmbeddingModel::initialize({1, 2, 1}, {3}, 2, 1);
    try {
      input_gradient(m, Image({1, 2, 1}, 0.5), [](const Vector&, const Vector&) {
        return HeadGradient{0.0, Vector(3, std::nan("")), {}};
      });
      FAIL("expected NonFiniteGradient");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kNonFiniteGradient);
    }
  }
}

TEST_CASE("cosine logits") {
  WordBank bank;
  bank.in_words = Matrix(2, 3);
  bank.out_words = Matrix(1, 3);
  const Vector z{1.0, 2.0, -2.0};
  for (std::size_t c = 0; c < 3; ++c) bank.in_words(0, c) = z[c];
  bank.in_words(1, 0) = 2.0;
  bank.in_words(1, 1) = -1.0;  // orthogonal to z
  bank.out_words(0, 0) = 0.5;
  bank.out_words(0, 1) = 0.25;
  bank.out_words(0, 2) = 4.0;
  const auto [in, out] = cosine_logits(bank, z);
  CHECK(in[0] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(std::abs(in[1]) < 1e-15);
  const double ref = (0.5 + 0.5 - 8.0) / (3.0 * std::sqrt(0.25 + 0.0625 + 16.0));
  CHECK(std::abs(out[0] - ref) < 1e-12);
  try {
    cosine_logits(bank, Vector(3, 0.0));
    FAIL("expected ZeroNormEmbedding");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kZeroNormEmbedding);
  }
}

TEST_CASE("word bank uses class means of embeddings") {
  const auto ds = two_blobs(4, 8);
  const auto m = EmbeddingModel::initialize({4, 4, 1}, {6, 5}, 2, 3);
  const WordBank bank = build_word_bank(m, ds, ds);
  REQUIRE(bank.in_words.rows() == 2);
  Vector mean0(5, 0.0);
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (ds.labels[i] == 0) axpy(0.25, embed(m, ds.images[i]), mean0);
  for (std::size_t c = 0; c < 5; ++c) CHECK(bank.in_words(0, c) == doctest::Approx(mean0[c]).epsilon(1e-12));
}

TEST_CASE("model checkpoints round trip at float32 precision") {
  const auto m = EmbeddingModel::initialize({3, 3, 1}, {5, 4}, 3, 17);
  const auto path = std::filesystem::temp_directory_path() / "oodadv_tests" / "model.oodm";
  save_model(path, m);
  const auto back = load_model(path);
  CHECK(back.input_shape() == m.input_shape());
  REQUIRE(back.hidden().size() == 2);
  for (std::size_t l = 0; l < 2; ++l) {
    const auto& a = m.hidden()[l].weights.data();
    const auto& b = back.hidden()[l].weights.data();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(b[i] == static_cast<double>(static_cast<float>(a[i])));
  }
  save_model(path, back);
  CHECK(load_model(path) == back);
  const std::string junk = "XXXX";
  {
    std::ofstream out(path, std::ios::binary);
    out << junk;
  }
  CHECK_THROWS_AS(load_model(path), Error);
}
