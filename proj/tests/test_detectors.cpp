#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "oodadv/detectors.hpp"
#include "oodadv/error.hpp"
#include "oracles.hpp"

using namespace oodadv;
using namespace oodadv::testing;

namespace {

EmbeddingDataset random_embeddings(std::size_t k, std::size_t per_class, std::size_t dim, std::mt19937_64& rng) {
  EmbeddingDataset ds;
  ds.dim = dim;
  ds.labels = std::vector<std::uint32_t>{};
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<Vector> centres;
  for (std::size_t c = 0; c < k; ++c) centres.push_back(random_vector(dim, rng, 3.0));
  for (std::size_t i = 0; i < per_class; ++i) {
    for (std::uint32_t c = 0; c < k; ++c) {
      Vector z = centres[c];
      for (std::size_t d = 0; d < dim; ++d) z[d] += g(rng) * (1.0 + 0.3 * d);
      ds.embeddings.push_back(z);
      ds.labels->push_back(c);
    }
  }
  return ds;
}

Matrix naive_scatter(const EmbeddingDataset& ds, bool pooled) {
  const std::size_t dim = ds.dim, n = ds.size();
  std::size_t k = 0;
  for (auto l : *ds.labels) k = std::max<std::size_t>(k, l + 1);
  std::vector<Vector> means(pooled ? k : 1, Vector(dim, 0.0));
  std::vector<double> counts(means.size(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = pooled ? (*ds.labels)[i] : 0;
    counts[c] += 1.0;
    for (std::size_t d = 0; d < dim; ++d) means[c][d] += ds.embeddings[i][d];
  }
  for (std::size_t c = 0; c < means.size(); ++c)
    for (double& v : means[c]) v /= counts[c];
  Matrix s(dim, dim);
  for (std::size_t i = 0; i < n; ++i) {
    const Vector& mu = means[pooled ? (*ds.labels)[i] : 0];
    for (std::size_t a = 0; a < dim; ++a)
      for (std::size_t b = 0; b < dim; ++b)
        s(a, b) += (ds.embeddings[i][a] - mu[a]) * (ds.embeddings[i][b] - mu[b]) / static_cast<double>(n);
  }
  double trace = 0.0;
  for (std::size_t a = 0; a < dim; ++a) trace += s(a, a);
  const double lambda = std::max(1e-6 * trace / static_cast<double>(dim), 1e-12);
  for (std::size_t a = 0; a < dim; ++a) s(a, a) += lambda;
  return s;
}

GaussianDetector identity_detector(std::vector<Vector> means) {
  const std::size_t d = means.front().size();
  Vector mu0(d, 0.0);
  for (const auto& m : means) axpy(1.0 / means.size(), m, mu0);
  return GaussianDetector(std::move(means), cholesky(Matrix::identity(d)), mu0, cholesky(Matrix::identity(d)));
}

struct ConstantScorer final : ImageScorer {
  explicit ConstantScorer(double v) : value(v) {}
  ScoreMethod method() const override { return ScoreMethod::kMd; }
  const ImageShape& input_shape() const override { return shape; }
  double score(const Image&) const override { return value; }
  std::pair<double, ImageGradient> score_and_gradient(const Image&) const override {
    return {value, Image(shape, value)};
  }
  double value;
  ImageShape shape{1, 2, 1};
};

// Reference minimum over classes of the naive quadratic forms.
std::pair<double, double> naive_scores(const GaussianDetector& det, const Vector& z) {
  const Matrix inv = naive_inverse(det.covariance().reconstruct());
  const Matrix inv0 = naive_inverse(det.background_covariance().reconstruct());
  double md = 1e300;
  for (const auto& mu : det.class_means()) md = std::min(md, naive_quadratic(inv, subtract(z, mu)));
  const double md0 = naive_quadratic(inv0, subtract(z, det.background_mean()));
  return {md, md - md0};
}

}  // namespace

TEST_CASE("fit on a symmetric two-point construction") {
  EmbeddingDataset ds;
  ds.dim = 2;
  ds.embeddings = {{-1.0, 0.0}, {-1.0, 0.0}, {1.0, 0.0}, {1.0, 0.0}};
  ds.labels = std::vector<std::uint32_t>{0, 0, 1, 1};
  const GaussianDetector det = fit_gaussians(ds);
  CHECK(det.class_means()[0] == Vector{-1.0, 0.0});
  CHECK(det.class_means()[1] == Vector{1.0, 0.0});
  CHECK(det.background_mean() == Vector{0.0, 0.0});
  CHECK(md_score(det, Vector{-1.0, 0.0}).value == 0.0);
}

TEST_CASE("fit matches the naive scatter formula") {
  std::mt19937_64 rng(1);
  const auto ds = random_embeddings(3, 7, 5, rng);
  const GaussianDetector det = fit_gaussians(ds);
  CHECK(relative_frobenius(det.covariance().reconstruct(), naive_scatter(ds, true)) < 1e-10);
  CHECK(relative_frobenius(det.background_covariance().reconstruct(), naive_scatter(ds, false)) < 1e-10);

  EmbeddingDataset twice = ds;
  twice.embeddings.insert(twice.embeddings.end(), ds.embeddings.begin(), ds.embeddings.end());
  twice.labels->insert(twice.labels->end(), ds.labels->begin(), ds.labels->end());
  const GaussianDetector det2 = fit_gaussians(twice);
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t d = 0; d < 5; ++d)
      CHECK(det2.class_means()[k][d] == doctest::Approx(det.class_means()[k][d]).epsilon(1e-14));
  CHECK(relative_frobenius(det2.covariance().reconstruct(), det.covariance().reconstruct()) < 1e-13);
  CHECK(relative_frobenius(det2.background_covariance().reconstruct(), det.background_covariance().reconstruct()) <
        1e-13);
}

TEST_CASE("fit rejects underpopulated classes and missing labels") {
  EmbeddingDataset ds;
  ds.dim = 2;
  ds.embeddings = {{0.0, 1.0}, {1.0, 0.0}, {2.0, 2.0}};
  ds.labels = std::vector<std::uint32_t>{0, 0, 1};
  try {
    fit_gaussians(ds);
    FAIL("expected ClassUnderpopulated");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kClassUnderpopulated);
  }
  ds.labels.reset();
  CHECK_THROWS_AS(fit_gaussians(ds), Error);
}

TEST_CASE("MD hand examples") {
  const auto det = identity_detector({{-1.0, 0.0}, {1.0, 0.0}});
  CHECK(md_score(det, Vector{0.0, 0.0}).value == 1.0);
  CHECK(md_score(det, Vector{1.0, 0.0}).value == 0.0);
  CHECK(md_score(det, Vector{1.0, 0.0}).method == ScoreMethod::kMd);
  CHECK_THROWS_AS(md_score(det, Vector{1.0}), Error);
  const Vector g = score_embedding_gradient(det, ScoreMethod::kMd, Vector{0.5, 2.0});
  CHECK(g == Vector{-1.0, 4.0});
  // Midpoint tie resolves to class 0.
  const Vector tie = score_embedding_gradient(det, ScoreMethod::kMd, Vector{0.0, 0.0});
  CHECK(tie == Vector{2.0, 0.0});
}

TEST_CASE("RMD with a degenerate single-class fixture is zero") {
  std::mt19937_64 rng(2);
  const Matrix cov = random_spd(4, rng);
  const Vector mu = random_vector(4, rng);
  const GaussianDetector det({mu}, cholesky(cov), mu, cholesky(cov));
  for (int i = 0; i < 10; ++i) CHECK(std::abs(rmd_score(det, random_vector(4, rng, 5.0)).value) < 1e-10);
}

TEST_CASE("MD and RMD match naive inverse oracles") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const auto ds = random_embeddings(4, 6, 6, rng);
    const GaussianDetector det = fit_gaussians(ds);
    const Vector z = random_vector(6, rng, 4.0);
    const auto [md, rmd] = naive_scores(det, z);
    const double got_md = md_score(det, z).value, got_rmd = rmd_score(det, z).value;
    CHECK(std::abs(got_md - md) <= 1e-8 * std::max(1.0, std::abs(md)));
    CHECK(std::abs(got_rmd - rmd) <= 1e-8 * std::max(1.0, std::abs(rmd)));
    CHECK(std::abs(got_rmd - (got_md - det.background_distance(z))) < 1e-10 * std::max(1.0, std::abs(got_md)));
    CHECK(got_md >= 0.0);
    for (const auto& mu : det.class_means()) {
      CHECK(md_score(det, mu).value == 0.0);
      for (double v : score_embedding_gradient(det, ScoreMethod::kMd, mu)) CHECK(v == 0.0);
    }
  }
}

TEST_CASE("scores are translation equivariant") {
  std::mt19937_64 rng(4);
  const auto ds = random_embeddings(3, 8, 4, rng);
  const Vector shift = random_vector(4, rng, 10.0);
  EmbeddingDataset moved = ds;
  for (auto& z : moved.embeddings) axpy(1.0, shift, z);
  const GaussianDetector a = fit_gaussians(ds), b = fit_gaussians(moved);
  for (int i = 0; i < 10; ++i) {
    const Vector z = random_vector(4, rng, 3.0);
    Vector zs = z;
    axpy(1.0, shift, zs);
    CHECK(md_score(b, zs).value == doctest::Approx(md_score(a, z).value).epsilon(1e-8));
    CHECK(rmd_score(b, zs).value == doctest::Approx(rmd_score(a, z).value).epsilon(1e-8));
  }
}

TEST_CASE("embedding gradients match finite differences") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const auto ds = random_embeddings(3, 5, 5, rng);
    const GaussianDetector det = fit_gaussians(ds);
    const Vector z = random_vector(5, rng, 3.0);
    for (ScoreMethod m : {ScoreMethod::kMd, ScoreMethod::kRmd}) {
      auto value = [&](std::span<const double> x) {
        return m == ScoreMethod::kMd ? md_score(det, x).value : rmd_score(det, x).value;
      };
      const Vector g = score_embedding_gradient(det, m, z);
      const double h = 1e-5;
      for (std::size_t i = 0; i < 5; ++i) {
        Vector up = z, down = z;
        up[i] += h;
        down[i] -= h;
        const double fd = (value(up) - value(down)) / (2 * h);
        CHECK(std::abs(fd - g[i]) <= 1e-6 * std::max(1.0, std::abs(fd)));
      }
    }
  }
}

TEST_CASE("MSP and CLIP scores") {
  std::mt19937_64 rng(6);
  SUBCASE("uniform probabilities") {
    const EmbeddingModel m({1, 2, 1}, {DenseLayer{Matrix(3, 2), Vector(3, 0.0)}},
                           DenseLayer{Matrix(4, 3), Vector(4, 0.0)});
    CHECK(msp_score(m, Image({1, 2, 1}, 0.5)).value == doctest::Approx(-0.25).epsilon(1e-15));
    const auto h = msp_head(Vector{0.1, 0.6, 0.3});
    CHECK(h.value == -0.6);
    CHECK(h.d_probs == Vector{0.0, -1.0, 0.0});
  }
  SUBCASE("confident probabilities") {
    const EmbeddingModel m({1, 1, 1}, {DenseLayer{Matrix(1, 1, 1.0), Vector{0.0}}},
                           DenseLayer{Matrix(2, 1, std::vector<double>{1000.0, -1000.0}), Vector(2, 0.0)});
    CHECK(msp_score(m, Image({1, 1, 1}, 1.0)).value == doctest::Approx(-1.0).epsilon(1e-15));
  }
  SUBCASE("MSP equals negated max probability") {
    const auto m = EmbeddingModel::initialize({2, 2, 1}, {6, 4}, 5, 3);
    for (int i = 0; i < 5; ++i) {
      Image img({2, 2, 1});
      for (double& p : img.pixels()) p = std::uniform_real_distribution<double>(0, 1)(rng);
      const Vector p = predict_probs(m, img);
      CHECK(std::abs(msp_score(m, img).value + *std::max_element(p.begin(), p.end())) < 1e-12);
    }
  }
  SUBCASE("CLIP hand examples") {
    WordBank bank;
    bank.in_words = Matrix(1, 2, std::vector<double>{1.0, 0.0});
    bank.out_words = Matrix(1, 2, std::vector<double>{0.0, 3.0});
    CHECK(clip_head(bank, Vector{2.0, 0.0}).value == doctest::Approx(-1.0).epsilon(1e-15));
    bank.out_words = bank.in_words;
    CHECK(clip_head(bank, Vector{0.3, -0.2}).value == 0.0);
  }
  SUBCASE("CLIP composes logits and max") {
    const auto m = EmbeddingModel::initialize({2, 2, 1}, {6, 4}, 3, 5);
    auto bank = std::make_shared<WordBank>();
    bank->in_words = Matrix(3, 4);
    bank->out_words = Matrix(2, 4);
    for (double& v : bank->in_words.data()) v = std::normal_distribution<double>(0, 1)(rng);
    for (double& v : bank->out_words.data()) v = std::normal_distribution<double>(0, 1)(rng);
    for (int i = 0; i < 5; ++i) {
      Image img({2, 2, 1});
      for (double& p : img.pixels()) p = std::uniform_real_distribution<double>(0, 1)(rng);
      const auto [in, out] = clip_style_logits(m, *bank, img);
      const double ref = *std::max_element(out.begin(), out.end()) - *std::max_element(in.begin(), in.end());
      CHECK(std::abs(clip_score(m, *bank, img).value - ref) < 1e-12);
    }
  }
  SUBCASE("CLIP embedding gradient matches finite differences") {
    WordBank bank;
    bank.in_words = Matrix(2, 3, std::vector<double>{1.0, 0.5, -0.2, -0.3, 1.0, 0.8});
    bank.out_words = Matrix(2, 3, std::vector<double>{0.2, -1.0, 0.4, 0.9, 0.1, 1.0});
    const Vector z{0.4, -0.7, 1.1};
    const auto h0 = clip_head(bank, z);
    for (std::size_t i = 0; i < 3; ++i) {
      Vector up = z, down = z;
      up[i] += 1e-5;
      down[i] -= 1e-5;
      const double fd = (clip_head(bank, up).value - clip_head(bank, down).value) / 2e-5;
      CHECK(std::abs(fd - h0.d_embedding[i]) < 1e-8);
    }
  }
}

TEST_CASE("ensembles average member scores") {
  const Image img({1, 2, 1}, 0.5);
  auto two = std::make_shared<ConstantScorer>(2.0);
  auto four = std::make_shared<ConstantScorer>(4.0);
  CHECK(DetectorEnsemble({two}).score(img) == 2.0);
  CHECK(DetectorEnsemble({two, two}).score(img) == 2.0);
  const DetectorEnsemble pair({two, four});
  CHECK(pair.score(img) == 3.0);
  CHECK(ensemble_score(pair, img).value == 3.0);
  CHECK(ensemble_score(pair, img).method == ScoreMethod::kEnsemble);
  CHECK(pair.score_and_gradient(img).second == Image({1, 2, 1}, 3.0));
  try {
    DetectorEnsemble empty({});
    FAIL("expected EmptyEnsemble");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kEmptyEnsemble);
  }
}

TEST_CASE("identical trained members give the member score bitwise") {
  std::mt19937_64 rng(7);
  SyntheticSpec spec;
  spec.shape = {4, 4, 3};
  spec.seed = 3;
  const auto [in, out] = generate_synthetic(spec, 4);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.hidden_widths = {12, 8};
  auto model = std::make_shared<const EmbeddingModel>(train(in, cfg).model);
  auto det = std::make_shared<const GaussianDetector>(fit_detector(*model, in));
  auto member = std::make_shared<GaussianScorer>(model, det, ScoreMethod::kRmd);
  const DetectorEnsemble ens({member, member});
  for (const auto& img : out.images) {
    CHECK(ens.score(img) == member->score(img));
    CHECK(ens.score_and_gradient(img).second == member->score_and_gradient(img).second);
  }
}

TEST_CASE("image-level MD gradient on a trained model matches finite differences") {
  SyntheticSpec spec;
  spec.shape = {4, 4, 3};
  spec.seed = 8;
  const auto [in, out] = generate_synthetic(spec, 6);
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.hidden_widths = {16, 8};
  auto model = std::make_shared<const EmbeddingModel>(train(in, cfg).model);
  auto det = std::make_shared<const GaussianDetector>(fit_detector(*model, in));
  for (ScoreMethod m : {ScoreMethod::kMd, ScoreMethod::kRmd}) {
    const GaussianScorer scorer(model, det, m);
    for (std::size_t i = 0; i < 10; ++i) {
      const Image& img = out.images[i];
      DifferentiableFunction fn{
          [&](std::span<const double> x) { return scorer.score(Image(img.shape(), Vector(x.begin(), x.end()))); },
          [&](std::span<const double> x) {
            const auto g = scorer.score_and_gradient(Image(img.shape(), Vector(x.begin(), x.end()))).second;
            return Vector(g.pixels().begin(), g.pixels().end());
          }};
      CHECK(input_gradient_check(fn, Vector(img.pixels().begin(), img.pixels().end()), 1e-4) < 1e-3);
    }
  }
}

TEST_CASE("detector checkpoints round trip") {
  std::mt19937_64 rng(9);
  const GaussianDetector det = fit_gaussians(random_embeddings(3, 5, 4, rng));
  const auto path = std::filesystem::temp_directory_path() / "oodadv_tests" / "det.oodd";
  save_detector(path, det);
  const GaussianDetector back = load_detector(path);
  REQUIRE(back.num_classes() == 3);
  REQUIRE(back.dim() == 4);
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t d = 0; d < 4; ++d)
      CHECK(back.class_means()[k][d] == static_cast<double>(static_cast<float>(det.class_means()[k][d])));
  CHECK(relative_frobenius(back.covariance().reconstruct(), det.covariance().reconstruct()) < 1e-6);
  save_detector(path, back);
  const GaussianDetector again = load_detector(path);
  CHECK(again.class_means() == back.class_means());
  CHECK(again.covariance().lower() == back.covariance().lower());
}
