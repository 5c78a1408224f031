#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "qvae/data.hpp"
#include "qvae/vae.hpp"
#include "gradient_check.hpp"
#include "test_util.hpp"

using namespace qvae;
using namespace qvae::testing;

namespace {

// The mean-feature predictor: x_hat = column means for every row.
double mean_predictor_bce(const Matrix& x) {
  std::vector<double> mean(x.cols(), 0.0);
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) mean[c] += x(r, c);
  for (auto& m : mean) m = std::clamp(m / x.rows(), 1e-7, 1 - 1e-7);
  double total = 0;
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c)
      total -= x(r, c) * std::log(mean[c]) + (1 - x(r, c)) * std::log(1 - mean[c]);
  return total / x.rows();
}

}  // namespace

TEST(Encode, ZeroWeightsGiveZeroMuAndLogvar) {
  Rng rng(1);
  VaeModel m = make_vae({10, {32}, 8}, rng);
  m.mu_head.weights = Matrix(32, 8);
  m.logvar_head.weights = Matrix(32, 8);
  std::mt19937_64 gen(1);
  const auto e = encode(m, random_matrix(gen, 4, 10, 0, 1));
  EXPECT_EQ(e.mu, Matrix(4, 8));
  EXPECT_EQ(e.logvar, Matrix(4, 8));
}

TEST(Encode, LatentWidthIsEight) {
  Rng rng(2);
  const VaeModel m = make_vae({115, {32}, 8}, rng);
  std::mt19937_64 gen(2);
  const auto e = encode(m, random_matrix(gen, 3, 115, 0, 1));
  EXPECT_EQ(e.mu.cols(), 8u);
  EXPECT_EQ(e.logvar.cols(), 8u);
  EXPECT_EQ(project(m, random_matrix(gen, 3, 115, 0, 1)).cols(), 8u);
}

TEST(Encode, HandSetLinearEncoder) {
  VaeModel m;
  m.input_dim = 2;
  m.latent_dim = 1;
  m.mu_head = {Matrix::from_rows({{2}, {-1}}), {0.5f}, Activation::linear};
  m.logvar_head = {Matrix::from_rows({{0.5f}, {0.5f}}), {-1}, Activation::linear};
  m.decoder.push_back({Matrix(1, 2), {0, 0}, Activation::sigmoid});
  const auto e = encode(m, Matrix::from_rows({{1, 3}}));
  EXPECT_FLOAT_EQ(e.mu(0, 0), 2 * 1 - 3 + 0.5f);       // -0.5
  EXPECT_FLOAT_EQ(e.logvar(0, 0), 0.5f + 1.5f - 1.0f);  // 1.0
}

TEST(Encode, LogvarIsClamped) {
  VaeModel m;
  m.input_dim = 1;
  m.latent_dim = 2;
  m.mu_head = {Matrix(1, 2), {0, 0}, Activation::linear};
  m.logvar_head = {Matrix::from_rows({{100, -100}}), {0, 0}, Activation::linear};
  m.decoder.push_back({Matrix(2, 1), {0}, Activation::sigmoid});
  const auto e = encode(m, Matrix::from_rows({{1}}));
  EXPECT_EQ(e.logvar(0, 0), kLogvarMax);
  EXPECT_EQ(e.logvar(0, 1), kLogvarMin);
}

TEST(Encode, WrongWidthThrows) {
  Rng rng(3);
  const VaeModel m = make_vae({10, {4}, 8}, rng);
  EXPECT_THROW(encode(m, Matrix(1, 9)), std::invalid_argument);
}

TEST(Reparameterize, ZeroNoiseReturnsMu) {
  const Matrix mu = Matrix::from_rows({{1, -2}}), lv = Matrix::from_rows({{3, -4}});
  EXPECT_EQ(reparameterize(mu, lv, Matrix(1, 2)), mu);
}

TEST(Reparameterize, UnitSigmaAddsNoise) {
  const Matrix mu = Matrix::from_rows({{1, -2}}), e = Matrix::from_rows({{0.25f, 0.5f}});
  EXPECT_EQ(reparameterize(mu, Matrix(1, 2), e), Matrix::from_rows({{1.25f, -1.5f}}));
}

TEST(Reparameterize, HandEvaluation) {
  const Matrix z = reparameterize(Matrix::from_rows({{1}}), Matrix::from_rows({{std::log(4.0f)}}),
                                  Matrix::from_rows({{0.5f}}));
  EXPECT_NEAR(z(0, 0), 2.0f, 1e-6f);
}

TEST(Kl, PriorMatchGivesZero) { EXPECT_EQ(kl_divergence(Matrix(3, 8), Matrix(3, 8)), 0.0f); }

TEST(Kl, UnitMeanContributesHalfPerCoordinate) {
  Matrix mu(2, 8);
  mu(0, 0) = 1;
  mu(0, 1) = 1;
  mu(1, 0) = 1;
  // Row 0: 2 coordinates, row 1: 1 coordinate, batch mean (1.0 + 0.5) / 2.
  EXPECT_FLOAT_EQ(kl_divergence(mu, Matrix(2, 8)), 0.75f);
}

TEST(Kl, NonNegativeForRandomBatches) {
  std::mt19937_64 gen(4);
  for (int i = 0; i < 100; ++i)
    EXPECT_GE(kl_divergence(random_matrix(gen, 5, 8, -3, 3), random_matrix(gen, 5, 8, -5, 5)), 0.0f);
}

// Monte-Carlo oracle: E_q[log q(z) - log p(z)] with std::mt19937_64 draws.
TEST(Kl, MatchesMonteCarloEstimate) {
  std::mt19937_64 gen(5);
  std::normal_distribution<double> n01(0.0, 1.0);
  for (int batch = 0; batch < 3; ++batch) {
    const MatrixD mu = random_matrix<double>(gen, 2, 8, -1.5, 1.5);
    const MatrixD lv = random_matrix<double>(gen, 2, 8, -2, 1);
    const double closed = kl_divergence(mu, lv);
    constexpr int kSamples = 100000;
    double sum = 0, sq = 0;
    for (int s = 0; s < kSamples; ++s) {
      double kl = 0;
      for (std::size_t i = 0; i < mu.size(); ++i) {
        const double e = n01(gen), sd = std::exp(0.5 * lv[i]), z = mu[i] + sd * e;
        kl += (-0.5 * e * e - std::log(sd)) - (-0.5 * z * z);
      }
      kl /= mu.rows();
      sum += kl;
      sq += kl * kl;
    }
    const double mean = sum / kSamples, se = std::sqrt((sq / kSamples - mean * mean) / kSamples);
    EXPECT_LE(std::abs(mean - closed), 3 * se) << "batch " << batch;
  }
}

TEST(Elbo, TermsFollowDefinitions) {
  const Matrix x = Matrix::from_rows({{1, 0}, {0.5f, 0.5f}});
  const Matrix xh = Matrix::from_rows({{0.9f, 0.2f}, {0.5f, 0.5f}});
  const auto t = elbo_loss(x, xh, Matrix(2, 8), Matrix(2, 8));
  const double r0 = -std::log(0.9) - std::log(0.8), r1 = 2 * std::log(2.0);
  EXPECT_NEAR(t.recon, (r0 + r1) / 2, 1e-5);
  EXPECT_EQ(t.kl, 0.0f);
  EXPECT_FLOAT_EQ(t.total, t.recon + t.kl);
}

TEST(Elbo, ReconstructionIsClamped) {
  const auto t = elbo_loss(Matrix::from_rows({{1}}), Matrix::from_rows({{0}}), Matrix(1, 8), Matrix(1, 8));
  EXPECT_NEAR(t.recon, -std::log(1e-7), 1e-3);
}

TEST(Elbo, NonFiniteInputAborts) {
  EXPECT_THROW(elbo_loss(Matrix::from_rows({{std::nanf("")}}), Matrix::from_rows({{0.5f}}), Matrix(1, 8),
                         Matrix(1, 8)),
               std::domain_error);
}

// Central finite differences of the full ELBO (fixed eps) in 64-bit.
TEST(VaeGradient, MatchesFiniteDifferences) {
  std::mt19937_64 gen(6);
  for (int trial = 0; trial < 5; ++trial) {
    VaeModelD m = random_vaed(gen, 6, 5, 3);
    const MatrixD x = random_matrix<double>(gen, 4, 6, 0.05, 0.95);
    MatrixD eps(4, 3);
    std::normal_distribution<double> n01;
    for (auto& v : eps.data()) v = n01(gen);
    const double worst = vae_gradient_error(m, x, eps);
    EXPECT_LE(worst, 1e-3) << "trial " << trial;
  }
}

TEST(Project, EqualsEncodeMuAndIsDeterministic) {
  Rng rng(7);
  const VaeModel m = make_vae({20, {32}, 8}, rng);
  std::mt19937_64 gen(7);
  const Matrix x = random_matrix(gen, 10, 20, 0, 1);
  EXPECT_EQ(project(m, x), encode(m, x).mu);
  EXPECT_EQ(project(m, x), project(m, x));
}

TEST(TrainVae, BeatsMeanPredictorOnSyntheticClusters) {
  const auto ds = gen_synthetic(2000, 115, 2, 0.15, 8);
  const Matrix x = apply_normalizer(ds, fit_normalizer(ds)).features;
  VaeTrainConfig cfg;
  cfg.arch = {115, {32}, 8};
  cfg.train.epochs = 20;
  cfg.train.seed = 9;
  const auto r = train_vae(x, cfg);
  const Matrix xh = [&] {
    // Deterministic reconstruction through mu.
    const auto f = vae_forward(r.model, x, Matrix(x.rows(), 8));
    return f.x_hat;
  }();
  const auto terms = elbo_loss(x, xh, Matrix(x.rows(), 8), Matrix(x.rows(), 8));
  EXPECT_LT(terms.recon, mean_predictor_bce(x));
  for (double l : r.loss_history) EXPECT_TRUE(std::isfinite(l));
}

TEST(TrainVae, FixedSeedGivesIdenticalWeights) {
  std::mt19937_64 gen(10);
  const Matrix x = random_matrix(gen, 64, 12, 0, 1);
  VaeTrainConfig cfg;
  cfg.arch = {12, {8}, 8};
  cfg.train.epochs = 2;
  cfg.train.seed = 11;
  EXPECT_EQ(train_vae(x, cfg).model, train_vae(x, cfg).model);
}

TEST(VaeModel, ValidateChecksHeadsAndDecoder) {
  Rng rng(12);
  VaeModel m = make_vae({10, {6}, 8}, rng);
  m.validate();
  EXPECT_EQ(m.decoder.back().activation, Activation::sigmoid);
  EXPECT_EQ(m.decoder.back().out_dim(), 10u);
  m.logvar_head.weights = Matrix(6, 7);
  m.logvar_head.bias.resize(7);
  EXPECT_THROW(m.validate(), std::invalid_argument);
}
