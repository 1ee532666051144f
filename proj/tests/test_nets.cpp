#include <gtest/gtest.h>

#include <numbers>
#include <random>

#include "fgpvae/nets.hpp"
#include "support/oracles.hpp"

using namespace fgpvae;

namespace {

NetParams randomized(NetParams p, std::uint64_t seed, double scale = 0.5) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-scale, scale);
  for (double& v : p.values) v = u(rng);
  return p;
}

Eigen::VectorXd random_vec(std::mt19937_64& rng, int n) {
  std::normal_distribution<double> normal;
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v[i] = normal(rng);
  return v;
}

}  // namespace

TEST(Encoder, ZeroImageWithZeroFinalLayer) {
  const Encoder enc(NetShape{28, 28, 16});
  std::mt19937_64 rng(1);
  const NetParams p = enc.init(rng);
  const auto out = enc.encode(p, Image(28, 28));
  EXPECT_TRUE((out.means.array() == 0.0).all());
  const double expected = kStdFloor + std::log(2.0);
  EXPECT_NEAR(positive_std(0.0), expected, 1e-15);
  EXPECT_TRUE((out.stds.array() == positive_std(0.0)).all());
}

TEST(Encoder, OutputShapeAndPositivity) {
  const Encoder enc(NetShape{28, 28, 16});
  const NetParams p = randomized(enc.layout(), 2, 2.0);
  for (double phase : {0.0, 1.0, 2.5}) {
    const auto out = enc.encode(p, oracle::blob_image(28, 28, phase));
    EXPECT_EQ(out.means.size(), 16);
    EXPECT_EQ(out.stds.size(), 16);
    EXPECT_TRUE((out.stds.array() >= kStdFloor).all());
  }
}

TEST(Encoder, RejectsWrongImageSize) {
  const Encoder enc(NetShape{28, 28, 16});
  EXPECT_THROW(enc.encode(enc.layout(), Image(27, 28)), ShapeError);
  EXPECT_THROW(Encoder(NetShape{30, 28, 16}), ShapeError);
}

TEST(Encoder, ParameterGradientsMatchFiniteDifferences) {
  const NetShape shape{8, 8, 3};
  const Encoder enc(shape);
  NetParams p = randomized(enc.layout(), 3);
  const Image img = oracle::blob_image(8, 8, 0.4);
  std::mt19937_64 rng(4);
  const Eigen::VectorXd wm = random_vec(rng, 3), ws = random_vec(rng, 3);
  auto loss = [&] {
    const auto out = enc.encode(p, img);
    return wm.dot(out.means) + ws.dot(out.stds);
  };
  Activations cache;
  const auto out = enc.encode(p, img, &cache);
  std::vector<double> grad(p.size(), 0.0);
  enc.backward(p, cache, out, wm, ws, grad);
  double worst = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double fd = oracle::central_difference(loss, p.values[i], 1e-5);
    worst = std::max(worst, oracle::relative_error(grad[i], fd, 1e-4));
  }
  EXPECT_LE(worst, 1e-4);
}

TEST(Decoder, ShapeRangeAndDeterminism) {
  const Decoder dec(NetShape{28, 28, 16});
  std::mt19937_64 rng(5);
  const NetParams p = dec.init(rng);
  const Eigen::VectorXd z = 3.0 * random_vec(rng, 16);
  const Image a = dec.decode(p, z), b = dec.decode(p, z);
  EXPECT_EQ(a.height, 28);
  EXPECT_EQ(a.width, 28);
  EXPECT_EQ(a, b);
  for (double v : a.pixels) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(Decoder, RejectsNonFiniteLatent) {
  const Decoder dec(NetShape{8, 8, 2});
  Eigen::VectorXd z(2);
  z << 0.0, std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(dec.decode(dec.layout(), z), NonFiniteError);
  EXPECT_THROW(dec.decode(dec.layout(), Eigen::VectorXd::Zero(3)), ShapeError);
}

TEST(Decoder, GradientsMatchFiniteDifferences) {
  const NetShape shape{8, 8, 3};
  const Decoder dec(shape);
  NetParams p = randomized(dec.layout(), 6);
  std::mt19937_64 rng(7);
  Eigen::VectorXd z = random_vec(rng, 3);
  std::vector<double> w(64);
  for (double& v : w) v = std::normal_distribution<double>()(rng);
  auto loss = [&] {
    const Image img = dec.decode(p, z);
    double s = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * img.pixels[i];
    return s;
  };
  Activations cache;
  dec.decode(p, z, &cache);
  std::vector<double> grad(p.size(), 0.0);
  const Eigen::VectorXd gz = dec.backward(p, cache, w, grad);
  double worst = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    worst = std::max(worst, oracle::relative_error(grad[i], oracle::central_difference(loss, p.values[i], 1e-5), 1e-4));
  }
  for (int i = 0; i < 3; ++i) {
    worst = std::max(worst, oracle::relative_error(gz[i], oracle::central_difference(loss, z[i], 1e-5), 1e-4));
  }
  EXPECT_LE(worst, 1e-4);
}

TEST(GaussianLoglik, AtMean) {
  const Image y = oracle::blob_image(28, 28, 0.0);
  EXPECT_NEAR(gaussian_loglik(y, y, 1.0), -392.0 * std::log(2 * std::numbers::pi), 1e-9);
}

TEST(GaussianLoglik, OneSigmaShift) {
  const Image y = oracle::blob_image(28, 28, 0.0);
  Image mu = y;
  mu.pixels[100] += 0.1;
  EXPECT_NEAR(gaussian_loglik(y, mu, 0.1), gaussian_loglik(y, y, 0.1) - 0.5, 1e-9);
}

TEST(GaussianLoglik, MatchesPerPixelOracleAndGradient) {
  const Image y = oracle::blob_image(8, 8, 0.3), mu = oracle::blob_image(8, 8, 1.1);
  double ref = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) ref += oracle::normal_logpdf(y.pixels[i], mu.pixels[i], 0.04);
  EXPECT_NEAR(gaussian_loglik(y, mu, 0.2), ref, 1e-10);
  const auto g = gaussian_loglik_grad(y, mu, 0.2);
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(g[i], (y.pixels[i] - mu.pixels[i]) / 0.04, 1e-12);
  EXPECT_THROW(gaussian_loglik(y, mu, 0.0), std::invalid_argument);
}

TEST(Architecture, MatchesDeclaredLayers) {
  const NetShape shape{28, 28, 16};
  const Encoder enc(shape);
  const Decoder dec(shape);
  const auto& el = enc.stack().layers();
  ASSERT_EQ(el.size(), 4u);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(el[static_cast<std::size_t>(i)].kind, LayerKind::Conv);
    EXPECT_EQ(el[static_cast<std::size_t>(i)].out_channels, 8);
    EXPECT_EQ(el[static_cast<std::size_t>(i)].activation, Activation::Elu);
  }
  EXPECT_EQ(el[0].stride, 1);
  EXPECT_EQ(el[1].stride, 2);
  EXPECT_EQ(el[2].stride, 2);
  EXPECT_EQ(el[2].out_h, 7);
  EXPECT_EQ(el[2].out_w, 7);
  EXPECT_EQ(el[3].kind, LayerKind::Dense);
  EXPECT_EQ(el[3].in_channels, 8 * 7 * 7);
  EXPECT_EQ(el[3].out_channels, 32);

  const auto& dl = dec.stack().layers();
  ASSERT_EQ(dl.size(), 4u);
  EXPECT_EQ(dl[0].kind, LayerKind::Dense);
  EXPECT_EQ(dl[0].out_channels, 8 * 7 * 7);
  for (int i = 1; i < 4; ++i) EXPECT_EQ(dl[static_cast<std::size_t>(i)].kind, LayerKind::ConvTranspose);
  EXPECT_EQ(dl[1].stride, 2);
  EXPECT_EQ(dl[2].stride, 2);
  EXPECT_EQ(dl[3].stride, 1);
  EXPECT_EQ(dl[3].out_channels, 1);
  EXPECT_EQ(dl[3].activation, Activation::Sigmoid);
  EXPECT_EQ(dl[3].out_h, 28);

  const std::size_t conv1 = 8 * 1 * 9 + 8, conv = 8 * 8 * 9 + 8;
  EXPECT_EQ(enc.layout().size(), conv1 + 2 * conv + 392 * 32 + 32);
  EXPECT_EQ(dec.layout().size(), 16 * 392 + 392 + 2 * conv + 8 * 9 + 1);
  EXPECT_EQ(enc.layout().entry("encoder.conv2.weight").shape, (std::vector<std::int64_t>{8, 8, 3, 3}));
  EXPECT_EQ(dec.layout().entry("decoder.deconv3.weight").shape, (std::vector<std::int64_t>{8, 1, 3, 3}));
}

TEST(Determinism, SameSeedSameParametersOutputsAndGradients) {
  const NetShape shape{28, 28, 16};
  const Encoder enc(shape);
  const Decoder dec(shape);
  auto run = [&] {
    std::mt19937_64 rng(99);
    NetParams pe = enc.init(rng), pd = dec.init(rng);
    pe = randomized(pe, 5, 0.1);
    Activations ec, dc;
    const auto out = enc.encode(pe, oracle::blob_image(28, 28, 0.2), &ec);
    const Image img = dec.decode(pd, out.means, &dc);
    std::vector<double> ge(pe.size(), 0.0), gd(pd.size(), 0.0);
    enc.backward(pe, ec, out, out.means, out.stds, ge);
    dec.backward(pd, dc, img.pixels, gd);
    return std::make_tuple(pd.values, img.pixels, ge, gd);
  };
  EXPECT_EQ(run(), run());
}

TEST(Positivity, SoftplusIsStable) {
  EXPECT_NEAR(softplus(-800.0), 0.0, 1e-300);
  EXPECT_EQ(softplus(800.0), 800.0);
  EXPECT_NEAR(sigmoid(-800.0), 0.0, 1e-300);
  EXPECT_EQ(sigmoid(800.0), 1.0);
}
