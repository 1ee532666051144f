#pragma once

// The factorized GP-VAE: networks, prior choice, the per-subset ELBO with a
// recorded tape, its reverse pass, and conditional latent prediction.

#include <cmath>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "fgpvae/data.hpp"
#include "fgpvae/errors.hpp"
#include "fgpvae/gp.hpp"
#include "fgpvae/nets.hpp"
#include "fgpvae/posterior.hpp"

namespace fgpvae {

enum class PriorKind : int {
  Factorized = 0,  // periodic GP on local channels, shared global channels
  Identity = 1,    // N(0, I) on every latent; the standard-VAE ablation
};

struct ModelConfig {
  LatentConfig latent;
  int height = 28;
  int width = 28;
  KernelParams kernel;
  double sigma_y = 0.1;
  double jitter = kDefaultJitter;
  PriorKind prior = PriorKind::Factorized;

  [[nodiscard]] NetShape net_shape() const { return {height, width, latent.total_channels}; }
  /// Channels handled as GP posteriors (all of them under the identity prior).
  [[nodiscard]] int gp_channels() const {
    return prior == PriorKind::Identity ? latent.total_channels : latent.local_channels;
  }
  [[nodiscard]] int shared_channels() const { return latent.total_channels - gp_channels(); }

  void validate() const {
    latent.validate();
    kernel.validate();
    net_shape().validate();
    if (!(sigma_y > 0.0)) throw ConfigError("sigma_y must be positive");
    if (!(jitter >= 0.0)) throw ConfigError("jitter must be non-negative");
  }
};

struct GecoState {
  double lagrange_multiplier = 1.0;
  double constraint_ma = 0.0;
};

/// Everything a checkpoint holds.
struct ModelParams {
  ModelConfig config;
  NetParams encoder;  // φ
  NetParams decoder;  // ψ
  GecoState geco;
};

class Model {
 public:
  explicit Model(ModelConfig cfg)
      : config_((cfg.validate(), cfg)), encoder_(cfg.net_shape()), decoder_(cfg.net_shape()) {}

  [[nodiscard]] const ModelConfig& config() const { return config_; }
  [[nodiscard]] const Encoder& encoder() const { return encoder_; }
  [[nodiscard]] const Decoder& decoder() const { return decoder_; }

  [[nodiscard]] ModelParams init(std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    ModelParams p{config_, encoder_.init(rng), decoder_.init(rng), {}};
    return p;
  }

  [[nodiscard]] CovMatrix prior_cov(std::span<const AuxPoint> aux) const {
    if (config_.prior == PriorKind::Identity) return identity_cov(static_cast<Eigen::Index>(aux.size()));
    return build_local_cov(aux, config_.kernel, config_.jitter);
  }

  [[nodiscard]] PosteriorNoise draw_noise(Eigen::Index q, std::mt19937_64& rng) const {
    std::normal_distribution<double> normal;
    PosteriorNoise n = PosteriorNoise::zeros(q, config_.gp_channels(), config_.shared_channels());
    for (Eigen::Index j = 0; j < n.local.cols(); ++j) {
      for (Eigen::Index i = 0; i < n.local.rows(); ++i) n.local(i, j) = normal(rng);
    }
    for (Eigen::Index g = 0; g < n.global.size(); ++g) n.global[g] = normal(rng);
    return n;
  }

  /// Encodes every image of a subset into per-image factors.
  EncoderOutput encode_all(const NetParams& phi, std::span<const Image> images,
                           std::vector<Encoder::Output>* outs = nullptr,
                           std::vector<Activations>* caches = nullptr) const {
    const auto q = static_cast<Eigen::Index>(images.size());
    const int latent = config_.latent.total_channels;
    EncoderOutput enc{Eigen::MatrixXd(q, latent), Eigen::MatrixXd(q, latent)};
    if (outs) outs->resize(images.size());
    if (caches) caches->resize(images.size());
    for (Eigen::Index i = 0; i < q; ++i) {
      const auto k = static_cast<std::size_t>(i);
      auto out = encoder_.encode(phi, images[k], caches ? &(*caches)[k] : nullptr);
      enc.means.row(i) = out.means.transpose();
      enc.stds.row(i) = out.stds.transpose();
      if (outs) (*outs)[k] = std::move(out);
    }
    return enc;
  }

  [[nodiscard]] SubsetPosterior posterior(const EncoderOutput& enc,
                                          std::span<const AuxPoint> aux) const {
    return compose_posterior(enc, prior_cov(aux), config_.gp_channels());
  }

 private:
  ModelConfig config_;
  Encoder encoder_;
  Decoder decoder_;
};

struct ElboParts {
  double loglik = 0.0;      // Σ_q log p_ψ(y_q | z_q)
  double log_qtilde = 0.0;  // Σ_q log q̃_φ(z_q | y_q)
  double log_z = 0.0;       // log Z_{φ,θ}(Y_p, X_p)
};

struct ElboResult {
  double elbo = 0.0;
  double recon_mse = 0.0;  // per-pixel MSE of the decoded sample
  ElboParts parts;
};

/// Forward intermediates needed by `backward`.
struct ElboTape {
  const DigitSubset* subset = nullptr;
  EncoderOutput enc;
  std::vector<Encoder::Output> enc_out;
  std::vector<Activations> enc_cache;
  SubsetPosterior posterior;
  PosteriorNoise noise;
  Eigen::MatrixXd z;
  std::vector<Image> decoded;
  std::vector<Activations> dec_cache;
};

/// Single-sample ELBO estimate of one digit subset.
inline ElboResult subset_elbo(const Model& model, const ModelParams& params,
                              const DigitSubset& subset, const PosteriorNoise& noise,
                              ElboTape* tape = nullptr) {
  if (subset.images.empty()) throw ShapeError("subset_elbo: empty subset");
  ElboTape local;
  ElboTape& t = tape ? *tape : local;
  t.subset = &subset;
  t.enc = model.encode_all(params.encoder, subset.images, &t.enc_out, &t.enc_cache);
  t.posterior = model.posterior(t.enc, subset.aux);
  t.noise = noise;
  t.z = sample_posterior(t.posterior, noise);

  ElboResult r;
  const auto q = subset.images.size();
  t.decoded.resize(q);
  t.dec_cache.resize(q);
  double sq = 0.0;
  for (std::size_t i = 0; i < q; ++i) {
    t.decoded[i] = model.decoder().decode(params.decoder, t.z.row(static_cast<Eigen::Index>(i)).transpose(),
                                          &t.dec_cache[i]);
    r.parts.loglik += gaussian_loglik(subset.images[i], t.decoded[i], model.config().sigma_y);
    sq += mean_squared_error(subset.images[i], t.decoded[i]);
  }
  r.parts.log_qtilde = log_qtilde(t.enc, t.z);
  r.parts.log_z = t.posterior.log_z_total;
  r.elbo = r.parts.loglik - r.parts.log_qtilde + r.parts.log_z;
  r.recon_mse = sq / static_cast<double>(q);
  return r;
}

struct Gradients {
  std::vector<double> encoder;
  std::vector<double> decoder;

  void resize_like(const ModelParams& p) {
    encoder.assign(p.encoder.size(), 0.0);
    decoder.assign(p.decoder.size(), 0.0);
  }
};

/// Reverse pass of F = recon_coeff · Σ log p_ψ + rest_coeff · (log Z − Σ log q̃).
/// With both coefficients 1, F is the ELBO recorded on `tape`.
inline void backward(const Model& model, const ModelParams& params, const ElboTape& tape,
                     Gradients& grads, double recon_coeff = 1.0, double rest_coeff = 1.0) {
  const auto& cfg = model.config();
  const auto& enc = tape.enc;
  const Eigen::Index q = enc.images();
  const Eigen::Index latent = enc.channels();
  if (grads.encoder.size() != params.encoder.size() || grads.decoder.size() != params.decoder.size()) {
    grads.resize_like(params);
  }

  Eigen::MatrixXd grad_z = Eigen::MatrixXd::Zero(q, latent);
  for (Eigen::Index i = 0; i < q; ++i) {
    const auto k = static_cast<std::size_t>(i);
    auto g_pix = gaussian_loglik_grad(tape.subset->images[k], tape.decoded[k], cfg.sigma_y);
    for (double& v : g_pix) v *= recon_coeff;
    grad_z.row(i) += model.decoder()
                         .backward(params.decoder, tape.dec_cache[k], g_pix, grads.decoder)
                         .transpose();
  }

  // −log q̃ term.
  const Eigen::ArrayXXd var = enc.stds.array().square();
  const Eigen::ArrayXXd resid = tape.z.array() - enc.means.array();
  grad_z += (rest_coeff * resid / var).matrix();
  Eigen::MatrixXd grad_mean = (-rest_coeff * resid / var).matrix();
  Eigen::MatrixXd grad_std =
      (-rest_coeff * (-1.0 / enc.stds.array() + resid.square() / (var * enc.stds.array()))).matrix();

  const auto& sp = tape.posterior;
  for (int l = 0; l < sp.local_channels(); ++l) {
    const auto cg = backprop_local_channel(sp.prior, sp.conditioning[static_cast<std::size_t>(l)],
                                           tape.noise.local.col(l), grad_z.col(l), rest_coeff);
    grad_mean.col(l) += cg.mean;
    grad_std.col(l) += cg.std;
  }
  for (std::size_t g = 0; g < sp.global.size(); ++g) {
    const Eigen::Index l = sp.local_channels() + static_cast<Eigen::Index>(g);
    const auto cg = backprop_global_channel(sp.global[g], enc.means.col(l), enc.stds.col(l),
                                            tape.noise.global[static_cast<Eigen::Index>(g)],
                                            grad_z.col(l).sum(), rest_coeff);
    grad_mean.col(l) += cg.mean;
    grad_std.col(l) += cg.std;
  }

  for (Eigen::Index i = 0; i < q; ++i) {
    const auto k = static_cast<std::size_t>(i);
    model.encoder().backward(params.encoder, tape.enc_cache[k], tape.enc_out[k],
                             grad_mean.row(i).transpose(), grad_std.row(i).transpose(), grads.encoder);
  }
}

/// Context for conditional generation: encoded images of one digit.
struct DigitContext {
  EncoderOutput enc;
  std::vector<AuxPoint> aux;
};

inline DigitContext encode_context(const Model& model, const ModelParams& params,
                                   std::span<const Image> images, std::span<const AuxPoint> aux) {
  if (images.size() != aux.size()) throw ShapeError("context images/aux size mismatch");
  return {model.encode_all(params.encoder, images), {aux.begin(), aux.end()}};
}

/// Posterior-mean latent at `target`. Without context, local channels take the
/// prior mean and global channels are drawn from the prior when `rng` is given.
inline Eigen::VectorXd predict_latent(const Model& model, const DigitContext& ctx,
                                      const AuxPoint& target, std::mt19937_64* rng = nullptr) {
  const auto& cfg = model.config();
  const int latent = cfg.latent.total_channels;
  Eigen::VectorXd z = Eigen::VectorXd::Zero(latent);
  const int gp = cfg.gp_channels();

  if (ctx.aux.empty()) {
    if (rng) {
      std::normal_distribution<double> normal;
      for (int l = gp; l < latent; ++l) z[l] = normal(*rng);
    }
    return z;
  }
  // Under the identity prior the target latent is independent of all contexts.
  if (cfg.prior == PriorKind::Identity) return z;

  const CovMatrix k = model.prior_cov(ctx.aux);
  const std::vector<AuxPoint> targets{target};
  for (int l = 0; l < gp; ++l) {
    z[l] = gp_predict(k, ctx.aux, ctx.enc.means.col(l), ctx.enc.stds.col(l), targets, cfg.kernel).mean[0];
  }
  for (int l = gp; l < latent; ++l) {
    z[l] = global_conjugate(ctx.enc.means.col(l), ctx.enc.stds.col(l)).mean;
  }
  return z;
}

inline Image generate(const Model& model, const ModelParams& params, const DigitContext& ctx,
                      const AuxPoint& target, std::mt19937_64* rng = nullptr) {
  return model.decoder().decode(params.decoder, predict_latent(model, ctx, target, rng));
}

}  // namespace fgpvae
