#include <gtest/gtest.h>

#include <numbers>
#include <random>

#include "fgpvae/posterior.hpp"
#include "support/oracles.hpp"

using namespace fgpvae;
using std::numbers::pi;

namespace {

Eigen::VectorXd vec(std::initializer_list<double> v) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

PosteriorNoise random_noise(std::mt19937_64& rng, Eigen::Index q, int local, int global) {
  std::normal_distribution<double> normal;
  auto n = PosteriorNoise::zeros(q, local, global);
  for (Eigen::Index i = 0; i < n.local.size(); ++i) n.local.data()[i] = normal(rng);
  for (Eigen::Index i = 0; i < n.global.size(); ++i) n.global[i] = normal(rng);
  return n;
}

}  // namespace

TEST(GlobalConjugate, SingleUnitObservation) {
  const auto g = global_conjugate(vec({0.0}), vec({1.0}));
  EXPECT_NEAR(g.var, 0.5, 1e-15);
  EXPECT_NEAR(g.mean, 0.0, 1e-15);
  EXPECT_NEAR(g.log_z, -0.5 * std::log(4 * pi), 1e-12);
}

TEST(GlobalConjugate, UninformativeLimit) {
  const auto g = global_conjugate(vec({3.0, -2.0, 5.0}), vec({1e6, 1e6, 1e6}));
  EXPECT_NEAR(g.var, 1.0, 1e-5);
  EXPECT_NEAR(g.mean, 0.0, 1e-5);
}

TEST(GlobalConjugate, HandEvaluation) {
  const auto g = global_conjugate(vec({1.0, 3.0}), vec({1.0, 1.0}));
  EXPECT_NEAR(g.var, 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(g.mean, 4.0 / 3.0, 1e-15);
}

TEST(GlobalConjugate, PrecisionAdditivityAndMarginal) {
  std::mt19937_64 rng(30);
  std::uniform_int_distribution<int> size(1, 16);
  for (int t = 0; t < 100; ++t) {
    auto in = oracle::random_instance(rng, size(rng), 1, 1);
    const Eigen::VectorXd mu = in.enc.means.col(0), s = in.enc.stds.col(0);
    const auto g = global_conjugate(mu, s);
    EXPECT_NEAR(1.0 / g.var - s.array().square().inverse().sum(), 1.0, 1e-12);
    EXPECT_GT(g.var, 0.0);
    EXPECT_LE(g.var, 1.0);
    EXPECT_NEAR(g.log_z, oracle::global_log_z(mu, s), 1e-10);
    EXPECT_NEAR(g.log_z, oracle::global_log_z_dense(mu, s), 1e-8);
  }
}

TEST(ComposePosterior, AllLocalChannels) {
  std::mt19937_64 rng(31);
  auto in = oracle::random_instance(rng, 5, 3, 3);
  const auto sp = compose_posterior(in.enc, in.aux, in.cfg, {});
  EXPECT_TRUE(sp.global.empty());
  double sum = 0.0;
  for (const auto& p : sp.local) sum += p.log_marginal;
  EXPECT_EQ(sp.log_z_total, sum);
}

TEST(ComposePosterior, ScalarCase) {
  EncoderOutput enc{Eigen::MatrixXd::Zero(1, 2), Eigen::MatrixXd::Ones(1, 2)};
  const std::vector<AuxPoint> aux{{0, 1.0}};
  const auto sp = compose_posterior(enc, aux, LatentConfig{2, 1}, {});
  EXPECT_NEAR(sp.log_z_total, -std::log(4 * pi), 1e-7);
  EXPECT_NEAR(sp.local[0].mean[0], 0.0, 1e-15);
  EXPECT_NEAR(sp.local[0].cov.entries(0, 0), 0.5, 1e-8);
  EXPECT_NEAR(sp.global[0].var, 0.5, 1e-15);
}

TEST(ComposePosterior, DenseJointOracle) {
  // Every channel's encoder means, stacked, are jointly Gaussian with a
  // block-diagonal covariance: K + D_l for local channels, 11ᵀ + D_l for global.
  std::mt19937_64 rng(32);
  for (int t = 0; t < 20; ++t) {
    auto in = oracle::random_instance(rng, 4, 3, 2);
    const auto sp = compose_posterior(in.enc, in.aux, in.cfg, {1.0, 1.0});
    const Eigen::Index q = 4;
    Eigen::MatrixXd joint = Eigen::MatrixXd::Zero(3 * q, 3 * q);
    Eigen::VectorXd stacked(3 * q);
    Eigen::MatrixXd k = oracle::kernel_matrix(in.angles, 1, 1);
    k.diagonal().array() += kDefaultJitter;
    for (int l = 0; l < 3; ++l) {
      Eigen::MatrixXd block = l < 2 ? k : Eigen::MatrixXd::Ones(q, q);
      block.diagonal() += in.enc.stds.col(l).cwiseAbs2();
      joint.block(l * q, l * q, q, q) = block;
      stacked.segment(l * q, q) = in.enc.means.col(l);
    }
    EXPECT_NEAR(sp.log_z_total, oracle::mvn_logpdf(stacked, Eigen::VectorXd::Zero(3 * q), joint), 1e-8);
  }
}

TEST(ComposePosterior, ShapeErrors) {
  std::mt19937_64 rng(33);
  auto in = oracle::random_instance(rng, 3, 4, 2);
  EXPECT_THROW(compose_posterior(in.enc, in.aux, LatentConfig{5, 2}, {}), ShapeError);
  in.aux.pop_back();
  EXPECT_THROW(compose_posterior(in.enc, in.aux, in.cfg, {}), ShapeError);
  EXPECT_THROW((LatentConfig{4, 0}.validate()), ConfigError);
  EXPECT_THROW((LatentConfig{4, 5}.validate()), ConfigError);
}

TEST(SamplePosterior, ZeroNoiseGivesMeans) {
  std::mt19937_64 rng(34);
  auto in = oracle::random_instance(rng, 6, 4, 2);
  const auto sp = compose_posterior(in.enc, in.aux, in.cfg, {});
  const auto z = sample_posterior(sp, PosteriorNoise::zeros(6, 2, 2));
  for (int l = 0; l < 2; ++l) EXPECT_EQ(z.col(l), sp.local[static_cast<std::size_t>(l)].mean);
  for (int g = 0; g < 2; ++g) {
    EXPECT_TRUE((z.col(2 + g).array() == sp.global[static_cast<std::size_t>(g)].mean).all());
  }
}

TEST(SamplePosterior, GlobalColumnsConstant) {
  std::mt19937_64 rng(35);
  for (int t = 0; t < 50; ++t) {
    auto in = oracle::random_instance(rng, 7, 5, 2);
    const auto sp = compose_posterior(in.enc, in.aux, in.cfg, {});
    const auto z = sample_posterior(sp, random_noise(rng, 7, 2, 3));
    for (Eigen::Index l = 2; l < 5; ++l) EXPECT_TRUE((z.col(l).array() == z(0, l)).all());
  }
}

TEST(SamplePosterior, MonteCarloMoments) {
  std::mt19937_64 rng(36);
  auto in = oracle::random_instance(rng, 2, 2, 1);
  const auto sp = compose_posterior(in.enc, in.aux, in.cfg, {});
  constexpr int n = 100000;
  Eigen::Vector2d sum = Eigen::Vector2d::Zero();
  Eigen::Matrix2d outer = Eigen::Matrix2d::Zero();
  double gsum = 0.0, gsq = 0.0;
  for (int t = 0; t < n; ++t) {
    const auto z = sample_posterior(sp, random_noise(rng, 2, 1, 1));
    const Eigen::Vector2d v = z.col(0);
    sum += v;
    outer += v * v.transpose();
    gsum += z(0, 1);
    gsq += z(0, 1) * z(0, 1);
  }
  const Eigen::Vector2d mean = sum / n;
  const Eigen::Matrix2d cov = outer / n - mean * mean.transpose();
  const auto& post = sp.local[0];
  for (int i = 0; i < 2; ++i) {
    const double se = std::sqrt(post.cov.entries(i, i) / n);
    EXPECT_NEAR(mean[i], post.mean[i], 3 * se);
    for (int j = 0; j < 2; ++j) {
      const double cij = post.cov.entries(i, j);
      const double se_cov = std::sqrt((post.cov.entries(i, i) * post.cov.entries(j, j) + cij * cij) / n);
      EXPECT_NEAR(cov(i, j), cij, 3 * se_cov);
    }
  }
  const double gm = gsum / n, gv = gsq / n - gm * gm;
  EXPECT_NEAR(gm, sp.global[0].mean, 3 * std::sqrt(sp.global[0].var / n));
  EXPECT_NEAR(gv, sp.global[0].var, 3 * sp.global[0].var * std::sqrt(2.0 / n));
}

TEST(SamplePosterior, RejectsWrongNoiseShape) {
  std::mt19937_64 rng(37);
  auto in = oracle::random_instance(rng, 3, 3, 1);
  const auto sp = compose_posterior(in.enc, in.aux, in.cfg, {});
  EXPECT_THROW(sample_posterior(sp, PosteriorNoise::zeros(3, 2, 1)), ShapeError);
}

TEST(LogQtilde, AtMeansWithUnitStds) {
  EncoderOutput enc{Eigen::MatrixXd::Random(3, 4), Eigen::MatrixXd::Ones(3, 4)};
  EXPECT_NEAR(log_qtilde(enc, enc.means), -6.0 * std::log(2 * pi), 1e-12);
}

TEST(LogQtilde, OneSigmaAway) {
  EncoderOutput enc{Eigen::MatrixXd::Constant(1, 1, 0.3), Eigen::MatrixXd::Constant(1, 1, 0.7)};
  const Eigen::MatrixXd z = Eigen::MatrixXd::Constant(1, 1, 1.0);
  EXPECT_NEAR(log_qtilde(enc, z), -0.5 * std::log(2 * pi * 0.49) - 0.5, 1e-12);
}

TEST(LogQtilde, MatchesUnivariateSum) {
  std::mt19937_64 rng(38);
  std::normal_distribution<double> normal;
  auto in = oracle::random_instance(rng, 5, 4, 2);
  Eigen::MatrixXd z(5, 4);
  for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = normal(rng);
  double ref = 0.0;
  for (int i = 0; i < 5; ++i) {
    for (int l = 0; l < 4; ++l) {
      ref += oracle::normal_logpdf(z(i, l), in.enc.means(i, l), in.enc.stds(i, l) * in.enc.stds(i, l));
    }
  }
  EXPECT_NEAR(log_qtilde(in.enc, z), ref, 1e-12);
}

TEST(PointwiseIdentity, RandomInstance) {
  std::mt19937_64 rng(39);
  auto in = oracle::random_instance(rng, 3, 2, 1);
  const auto sp = compose_posterior(in.enc, in.aux, in.cfg, {});
  const auto z = sample_posterior(sp, random_noise(rng, 3, 1, 1));
  const auto check = pointwise_identity_check(sp, in.enc, z);
  EXPECT_NEAR(check.lhs, check.rhs, 1e-8);
}

TEST(PointwiseIdentity, AtPosteriorMean) {
  std::mt19937_64 rng(40);
  auto in = oracle::random_instance(rng, 3, 2, 1);
  const auto sp = compose_posterior(in.enc, in.aux, in.cfg, {});
  const auto z = sample_posterior(sp, PosteriorNoise::zeros(3, 1, 1));
  const auto check = pointwise_identity_check(sp, in.enc, z);
  EXPECT_NEAR(check.lhs, check.rhs, 1e-8);
}

TEST(PointwiseIdentity, Sweep) {
  std::mt19937_64 rng(41);
  std::uniform_int_distribution<int> size(1, 8), latent(2, 4);
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    const int l = latent(rng);
    const int j = std::uniform_int_distribution<int>(1, l - 1)(rng);
    const int q = size(rng);
    auto in = oracle::random_instance(rng, q, l, j);
    const auto sp = compose_posterior(in.enc, in.aux, in.cfg, {});
    const auto z = sample_posterior(sp, random_noise(rng, q, j, l - j));
    const auto check = pointwise_identity_check(sp, in.enc, z);
    worst = std::max(worst, std::abs(check.lhs - check.rhs));
  }
  EXPECT_LE(worst, 1e-7);
}

TEST(PointwiseIdentity, IdentityPrior) {
  std::mt19937_64 rng(42);
  auto in = oracle::random_instance(rng, 4, 3, 3);
  const auto sp = compose_posterior(in.enc, identity_cov(4), 3);
  const auto z = sample_posterior(sp, random_noise(rng, 4, 3, 0));
  const auto check = pointwise_identity_check(sp, in.enc, z);
  EXPECT_NEAR(check.lhs, check.rhs, 1e-9);
}

TEST(PointwiseIdentity, RejectsNonSharedGlobal) {
  std::mt19937_64 rng(43);
  auto in = oracle::random_instance(rng, 3, 2, 1);
  const auto sp = compose_posterior(in.enc, in.aux, in.cfg, {});
  Eigen::MatrixXd z = Eigen::MatrixXd::Zero(3, 2);
  z(1, 1) = 0.5;
  EXPECT_THROW(pointwise_identity_check(sp, in.enc, z), std::invalid_argument);
}

namespace {

// F(μ, s) = gᵀ z(μ, s, ε) + c · log Z(μ, s) for one channel.
struct ChannelObjective {
  std::vector<AuxPoint> aux;
  Eigen::VectorXd noise, grad_z;
  double coeff;
  bool global;

  double operator()(const Eigen::VectorXd& mu, const Eigen::VectorXd& s) const {
    EncoderOutput enc{mu, s};
    const auto sp = compose_posterior(enc, build_local_cov(aux, {}), global ? 0 : 1);
    PosteriorNoise n = PosteriorNoise::zeros(mu.size(), global ? 0 : 1, global ? 1 : 0);
    if (global) {
      n.global[0] = noise[0];
    } else {
      n.local.col(0) = noise;
    }
    return grad_z.dot(sample_posterior(sp, n).col(0)) + coeff * sp.log_z_total;
  }
};

void check_channel_gradient(bool global, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  const int q = 5;
  auto in = oracle::random_instance(rng, q, 1, 1);
  ChannelObjective f{in.aux, Eigen::VectorXd(q), Eigen::VectorXd(q), 0.7, global};
  for (int i = 0; i < q; ++i) {
    f.noise[i] = normal(rng);
    f.grad_z[i] = normal(rng);
  }
  Eigen::VectorXd mu = in.enc.means.col(0), s = in.enc.stds.col(0);

  EncoderOutput enc{mu, s};
  const auto sp = compose_posterior(enc, build_local_cov(in.aux, {}), global ? 0 : 1);
  ChannelGrad g;
  if (global) {
    g = backprop_global_channel(sp.global[0], mu, s, f.noise[0], f.grad_z.sum(), f.coeff);
  } else {
    g = backprop_local_channel(sp.prior, sp.conditioning[0], f.noise, f.grad_z, f.coeff);
  }
  for (int i = 0; i < q; ++i) {
    const double dm = oracle::central_difference([&] { return f(mu, s); }, mu[i], 1e-6);
    const double ds = oracle::central_difference([&] { return f(mu, s); }, s[i], 1e-6);
    EXPECT_LE(oracle::relative_error(g.mean[i], dm), 1e-6) << "mean " << i;
    EXPECT_LE(oracle::relative_error(g.std[i], ds), 1e-6) << "std " << i;
  }
}

}  // namespace

TEST(ChannelGradients, LocalMatchesFiniteDifferences) {
  for (std::uint64_t seed = 50; seed < 55; ++seed) check_channel_gradient(false, seed);
}

TEST(ChannelGradients, GlobalMatchesFiniteDifferences) {
  for (std::uint64_t seed = 60; seed < 65; ++seed) check_channel_gradient(true, seed);
}
