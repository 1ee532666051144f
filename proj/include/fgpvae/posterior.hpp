#pragma once

// Structured posterior of one digit subset: the encoder's per-image Gaussian
// factors act as likelihoods for the GP prior, giving J exact GP posteriors
// over the local channels and L − J shared univariate Gaussians over the
// global channels. Everything here is deterministic given the noise argument.

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fgpvae/errors.hpp"
#include "fgpvae/gp.hpp"

namespace fgpvae {

struct LatentConfig {
  int total_channels = 16;  // L
  int local_channels = 8;   // J

  [[nodiscard]] int global_channels() const { return total_channels - local_channels; }

  void validate() const {
    if (local_channels < 1 || local_channels > total_channels) {
      throw ConfigError("latent config requires 1 <= local_channels <= total_channels, got J=" +
                        std::to_string(local_channels) + " L=" + std::to_string(total_channels));
    }
  }
};

/// Per-image mean-field factors; row q is image q, column l is channel l.
struct EncoderOutput {
  Eigen::MatrixXd means;
  Eigen::MatrixXd stds;

  [[nodiscard]] Eigen::Index images() const { return means.rows(); }
  [[nodiscard]] Eigen::Index channels() const { return means.cols(); }

  void validate() const {
    if (means.rows() != stds.rows() || means.cols() != stds.cols()) {
      throw ShapeError("encoder output means/stds shape mismatch");
    }
    if (!stds.allFinite() || !means.allFinite()) throw NonFiniteError("encoder output is not finite");
    if (!(stds.array() > 0.0).all()) throw std::invalid_argument("encoder stds must be positive");
  }
};

struct GlobalPosterior {
  double mean = 0.0;
  double var = 1.0;
  double log_z = 0.0;
};

struct SubsetPosterior {
  std::vector<GPPosterior> local;
  std::vector<GlobalPosterior> global;
  double log_z_total = 0.0;

  // Retained for density evaluation and gradients.
  CovMatrix prior_cov;
  PriorFactor prior;
  std::vector<GpConditioning> conditioning;

  [[nodiscard]] int local_channels() const { return static_cast<int>(local.size()); }
  [[nodiscard]] int total_channels() const {
    return static_cast<int>(local.size() + global.size());
  }
  [[nodiscard]] Eigen::Index images() const { return prior_cov.size(); }
};

/// Standard-normal draws driving one reparameterized sample.
struct PosteriorNoise {
  Eigen::MatrixXd local;   // Q x J, column per local channel
  Eigen::VectorXd global;  // L − J

  static PosteriorNoise zeros(Eigen::Index q, int local_channels, int global_channels) {
    return {Eigen::MatrixXd::Zero(q, local_channels), Eigen::VectorXd::Zero(global_channels)};
  }
};

inline double normal_logpdf(double x, double mean, double var) {
  const double d = x - mean;
  return -0.5 * (kLog2Pi + std::log(var) + d * d / var);
}

/// Conjugate update of a N(0, 1) prior on one shared scalar observed through
/// N(means_q | z, stds_q²).
inline GlobalPosterior global_conjugate(const Eigen::VectorXd& means,
                                        const Eigen::VectorXd& stds) {
  detail::require_observations(means.size(), means, stds);
  if (means.size() == 0) throw ShapeError("global_conjugate: no observations");
  const Eigen::ArrayXd precision = stds.array().square().inverse();
  GlobalPosterior g;
  g.var = 1.0 / (1.0 + precision.sum());
  g.mean = g.var * (precision * means.array()).sum();
  g.log_z = normal_logpdf(0.0, 0.0, 1.0) - normal_logpdf(0.0, g.mean, g.var);
  for (Eigen::Index q = 0; q < means.size(); ++q) {
    g.log_z += normal_logpdf(0.0, means[q], stds[q] * stds[q]);
  }
  return g;
}

/// Structured posterior with `local_channels` channels under `local_prior`
/// and the rest under the shared binary kernel.
inline SubsetPosterior compose_posterior(const EncoderOutput& enc, const CovMatrix& local_prior,
                                         int local_channels) {
  enc.validate();
  if (enc.images() != local_prior.size()) {
    throw ShapeError("compose_posterior: encoder has " + std::to_string(enc.images()) +
                     " images, prior covers " + std::to_string(local_prior.size()));
  }
  if (local_channels < 0 || local_channels > enc.channels()) {
    throw ShapeError("compose_posterior: local channel count out of range");
  }
  SubsetPosterior sp;
  sp.prior_cov = local_prior;
  sp.prior = factor_prior(local_prior);
  for (int l = 0; l < local_channels; ++l) {
    sp.conditioning.push_back(condition_gp(sp.prior, enc.means.col(l), enc.stds.col(l)));
    sp.local.push_back(posterior_from(sp.prior, sp.conditioning.back()));
    sp.log_z_total += sp.local.back().log_marginal;
  }
  for (Eigen::Index l = local_channels; l < enc.channels(); ++l) {
    sp.global.push_back(global_conjugate(enc.means.col(l), enc.stds.col(l)));
    sp.log_z_total += sp.global.back().log_z;
  }
  return sp;
}

inline SubsetPosterior compose_posterior(const EncoderOutput& enc, std::span<const AuxPoint> points,
                                         const LatentConfig& cfg, const KernelParams& kp) {
  cfg.validate();
  if (enc.channels() != cfg.total_channels) {
    throw ShapeError("compose_posterior: encoder channels " + std::to_string(enc.channels()) +
                     " != L " + std::to_string(cfg.total_channels));
  }
  return compose_posterior(enc, build_local_cov(points, kp), cfg.local_channels);
}

/// One reparameterized draw: local columns are correlated Q-vectors, global
/// columns repeat a single scalar down all rows.
inline Eigen::MatrixXd sample_posterior(const SubsetPosterior& sp, const PosteriorNoise& noise) {
  const Eigen::Index q = sp.images();
  if (noise.local.rows() != q || noise.local.cols() != sp.local_channels() ||
      noise.global.size() != static_cast<Eigen::Index>(sp.global.size())) {
    throw ShapeError("sample_posterior: noise shape does not match posterior");
  }
  Eigen::MatrixXd z(q, sp.total_channels());
  for (int l = 0; l < sp.local_channels(); ++l) {
    const auto& post = sp.local[static_cast<std::size_t>(l)];
    z.col(l) = post.mean + post.factor * noise.local.col(l);
  }
  for (std::size_t g = 0; g < sp.global.size(); ++g) {
    const double v = sp.global[g].mean + std::sqrt(sp.global[g].var) * noise.global[static_cast<Eigen::Index>(g)];
    z.col(sp.local_channels() + static_cast<Eigen::Index>(g)).setConstant(v);
  }
  return z;
}

/// Σ_q Σ_l log N(z[q,l] | means[q,l], stds[q,l]²).
inline double log_qtilde(const EncoderOutput& enc, const Eigen::MatrixXd& z) {
  if (z.rows() != enc.images() || z.cols() != enc.channels()) {
    throw ShapeError("log_qtilde: latent matrix shape mismatch");
  }
  const Eigen::ArrayXXd var = enc.stds.array().square();
  const Eigen::ArrayXXd d = z.array() - enc.means.array();
  return -0.5 * (static_cast<double>(z.size()) * kLog2Pi + var.log().sum() + (d.square() / var).sum());
}

namespace detail {

inline double mvn_logpdf_lower(const Eigen::VectorXd& centred, const Eigen::MatrixXd& lower) {
  const Eigen::VectorXd white = lower.triangularView<Eigen::Lower>().solve(centred);
  return -0.5 * (static_cast<double>(centred.size()) * kLog2Pi +
                 2.0 * lower.diagonal().array().log().sum() + white.squaredNorm());
}

inline void require_shared_globals(const SubsetPosterior& sp, const Eigen::MatrixXd& z) {
  if (z.rows() != sp.images() || z.cols() != sp.total_channels()) {
    throw ShapeError("latent matrix shape does not match posterior");
  }
  for (Eigen::Index l = sp.local_channels(); l < z.cols(); ++l) {
    if (!(z.col(l).array() == z(0, l)).all()) {
      throw std::invalid_argument("global latent column " + std::to_string(l) +
                                  " is not constant within the subset");
    }
  }
}

}  // namespace detail

/// log p_θ(Z | X_p): GP prior on local columns, N(0, 1) on each shared global value.
inline double log_prior(const SubsetPosterior& sp, const Eigen::MatrixXd& z) {
  detail::require_shared_globals(sp, z);
  double total = 0.0;
  for (int l = 0; l < sp.local_channels(); ++l) {
    total += detail::mvn_logpdf_lower(z.col(l), sp.prior.lower);
  }
  for (Eigen::Index l = sp.local_channels(); l < z.cols(); ++l) {
    total += normal_logpdf(z(0, l), 0.0, 1.0);
  }
  return total;
}

/// log q(Z_p | ·) through the posterior square root B L⁻ᵀ, so that the
/// quadratic form shares B⁻¹ with the prior term.
inline double log_q(const SubsetPosterior& sp, const Eigen::MatrixXd& z) {
  detail::require_shared_globals(sp, z);
  const Eigen::MatrixXd& b = sp.prior.lower;
  const Eigen::Index q = sp.images();
  double total = 0.0;
  for (int l = 0; l < sp.local_channels(); ++l) {
    const auto& post = sp.local[static_cast<std::size_t>(l)];
    const auto& lower = sp.conditioning[static_cast<std::size_t>(l)].whitened_lower;
    const Eigen::VectorXd u = b.triangularView<Eigen::Lower>().solve(z.col(l) - post.mean);
    const Eigen::VectorXd w = lower.transpose() * u;
    const double log_det = 2.0 * (b.diagonal().array().log().sum() - lower.diagonal().array().log().sum());
    total += -0.5 * (static_cast<double>(q) * kLog2Pi + log_det + w.squaredNorm());
  }
  for (std::size_t g = 0; g < sp.global.size(); ++g) {
    const auto l = sp.local_channels() + static_cast<Eigen::Index>(g);
    total += normal_logpdf(z(0, l), sp.global[g].mean, sp.global[g].var);
  }
  return total;
}

struct IdentityCheck {
  double lhs = 0.0;  // log q̃(Z) + log p_θ(Z | X) − log Z
  double rhs = 0.0;  // log q(Z)
};

inline IdentityCheck pointwise_identity_check(const SubsetPosterior& sp, const EncoderOutput& enc,
                                              const Eigen::MatrixXd& z) {
  // q̃ is evaluated per image, but the prior and q see each global value once.
  return {log_qtilde(enc, z) + log_prior(sp, z) - sp.log_z_total, log_q(sp, z)};
}

// ---------------------------------------------------------------------------
// Reverse-mode pieces. Each takes dF/dz for the sampled column and the
// coefficient F places on the channel's log Z, and returns dF/d(means, stds)
// of that channel.

struct ChannelGrad {
  Eigen::VectorXd mean;
  Eigen::VectorXd std;
};

inline ChannelGrad backprop_local_channel(const PriorFactor& prior, const GpConditioning& c,
                                          const Eigen::VectorXd& noise,
                                          const Eigen::VectorXd& grad_z, double logz_coeff) {
  const Eigen::MatrixXd& b = prior.lower;
  const Eigen::Index q = b.rows();
  const auto lower = c.whitened_lower.triangularView<Eigen::Lower>();
  const Eigen::MatrixXd l_inv = lower.solve(Eigen::MatrixXd::Identity(q, q));
  const Eigen::MatrixXd m_inv = l_inv.transpose() * l_inv;
  const Eigen::VectorXd& alpha = c.whitened_mean;

  // z = B (α + u), α = M⁻¹ b, u = L⁻ᵀ ε.
  const Eigen::VectorXd u = c.whitened_lower.transpose().triangularView<Eigen::Upper>().solve(noise);
  const Eigen::VectorXd grad_t = b.transpose() * grad_z;
  const Eigen::VectorXd beta = m_inv * grad_t;

  Eigen::VectorXd grad_proj = beta + logz_coeff * alpha;
  Eigen::MatrixXd grad_m = -0.5 * (beta * alpha.transpose() + alpha * beta.transpose());
  grad_m -= 0.5 * logz_coeff * (m_inv + alpha * alpha.transpose());

  // Cholesky adjoint for u: L̄ = −tril(u vᵀ), v = L⁻¹ ḡ_u.
  const Eigen::VectorXd v = l_inv * grad_t;
  const Eigen::MatrixXd grad_l = (-(u * v.transpose())).triangularView<Eigen::Lower>();
  Eigen::MatrixXd phi = (c.whitened_lower.transpose() * grad_l).triangularView<Eigen::Lower>();
  phi.diagonal() *= 0.5;
  grad_m += l_inv.transpose() * (0.5 * (phi + phi.transpose())) * l_inv;

  // M = I + Bᵀ diag(w) B, projected = Bᵀ (w ∘ μ), w = s⁻².
  const Eigen::ArrayXd mu = c.obs_mean.array();
  const Eigen::ArrayXd w = c.precision.array();
  const Eigen::ArrayXd s = c.obs_std.array();
  const Eigen::ArrayXd h = (b * grad_proj).array();
  const Eigen::ArrayXd grad_w = (b * grad_m * b.transpose()).diagonal().array() + mu * h -
                                0.5 * logz_coeff * mu.square();

  ChannelGrad out;
  out.mean = (w * h - logz_coeff * w * mu).matrix();
  out.std = (-logz_coeff / s - 2.0 * grad_w / s.cube()).matrix();
  return out;
}

inline ChannelGrad backprop_global_channel(const GlobalPosterior& g, const Eigen::VectorXd& means,
                                           const Eigen::VectorXd& stds, double noise,
                                           double grad_z, double logz_coeff) {
  const Eigen::ArrayXd mu = means.array();
  const Eigen::ArrayXd s = stds.array();
  const Eigen::ArrayXd w = s.square().inverse();
  const double v = g.var;
  const double m = g.mean;

  const Eigen::ArrayXd grad_w = grad_z * ((mu - m) * v - 0.5 * noise * std::pow(v, 1.5)) +
                                logz_coeff * (-0.5 * (mu - m).square() - 0.5 * v);
  ChannelGrad out;
  out.mean = (grad_z * w * v + logz_coeff * w * (m - mu)).matrix();
  out.std = (-logz_coeff / s - 2.0 * grad_w / s.cube()).matrix();
  return out;
}

}  // namespace fgpvae
