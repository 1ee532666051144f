#pragma once

// Kernels and exact Gaussian-process regression with per-point noise.
//
// All conditioning goes through the whitened system
//   M = I + Bᵀ diag(s⁻²) B,   K = B Bᵀ,
// which stays well conditioned when K itself is singular (the periodic angle
// kernel aliases w and w + π, so duplicated directions are common).

#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fgpvae/errors.hpp"

namespace fgpvae {

inline constexpr double kDefaultJitter = 1e-8;
inline constexpr double kRetryJitter = 1e-6;
inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

/// Auxiliary input of one image: digit instance id and rotation angle (radians).
struct AuxPoint {
  int digit = 0;
  double angle = 0.0;

  friend bool operator==(const AuxPoint&, const AuxPoint&) = default;
};

struct KernelParams {
  double amplitude = 1.0;
  double lengthscale = 1.0;

  void validate() const {
    if (!(amplitude > 0.0) || !(lengthscale > 0.0) || !std::isfinite(amplitude) ||
        !std::isfinite(lengthscale)) {
      throw std::invalid_argument("kernel amplitude and lengthscale must be positive and finite");
    }
  }
};

/// Dense covariance over the points of one subset. `jitter` has already been
/// added to the diagonal of `entries`; it is kept for bookkeeping.
struct CovMatrix {
  Eigen::MatrixXd entries;
  double jitter = 0.0;

  [[nodiscard]] Eigen::Index size() const { return entries.rows(); }
};

struct GPPosterior {
  Eigen::VectorXd mean;
  CovMatrix cov;
  /// Square root of the covariance: factor * factorᵀ == cov.entries.
  Eigen::MatrixXd factor;
  double log_marginal = 0.0;
};

struct GPPrediction {
  Eigen::VectorXd mean;
  Eigen::VectorXd variance;
};

/// Periodic angle kernel gated by digit identity:
/// δ(d_a, d_b) σ² exp(−2 sin²|w_a − w_b| / r²).
inline double local_kernel(const AuxPoint& a, const AuxPoint& b, const KernelParams& p) {
  if (a.digit != b.digit) return 0.0;
  const double s = std::sin(std::abs(a.angle - b.angle));
  return p.amplitude * p.amplitude * std::exp(-2.0 * s * s / (p.lengthscale * p.lengthscale));
}

inline double global_kernel(const AuxPoint& a, const AuxPoint& b) {
  return a.digit == b.digit ? 1.0 : 0.0;
}

namespace detail {

inline void require_single_digit(std::span<const AuxPoint> points, const char* what) {
  for (const auto& x : points) {
    if (x.digit != points.front().digit) {
      throw MixedDigitError(std::string(what) + ": points span digits " +
                            std::to_string(points.front().digit) + " and " +
                            std::to_string(x.digit));
    }
  }
}

inline void require_observations(Eigen::Index q, const Eigen::VectorXd& mean,
                                 const Eigen::VectorXd& std_dev) {
  if (mean.size() != q || std_dev.size() != q) {
    throw ShapeError("observation length mismatch: covariance is " + std::to_string(q) +
                     ", means " + std::to_string(mean.size()) + ", stds " +
                     std::to_string(std_dev.size()));
  }
  for (Eigen::Index i = 0; i < q; ++i) {
    if (!(std_dev[i] > 0.0) || !std::isfinite(std_dev[i]) || !std::isfinite(mean[i])) {
      throw std::invalid_argument("observation stds must be positive and finite");
    }
  }
}

/// Lower Cholesky factor of `a`, retrying once with kRetryJitter on the diagonal.
inline Eigen::MatrixXd cholesky_with_retry(const Eigen::MatrixXd& a) {
  auto attempt = [](const Eigen::MatrixXd& m, Eigen::MatrixXd& out) {
    Eigen::LLT<Eigen::MatrixXd> llt(m);
    if (llt.info() != Eigen::Success) return false;
    out = llt.matrixL();
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
      if (!(out(i, i) > 0.0) || !std::isfinite(out(i, i))) return false;
    }
    return true;
  };
  Eigen::MatrixXd lower;
  if (attempt(a, lower)) return lower;
  Eigen::MatrixXd retry = a;
  retry.diagonal().array() += kRetryJitter;
  if (attempt(retry, lower)) return lower;
  throw CholeskyError("matrix of size " + std::to_string(a.rows()) +
                      " is not positive definite after jitter retry");
}

}  // namespace detail

/// Lower-triangular B with B Bᵀ = K (up to the retry jitter).
struct PriorFactor {
  Eigen::MatrixXd lower;
};

inline PriorFactor factor_prior(const CovMatrix& k) {
  return {detail::cholesky_with_retry(k.entries)};
}

/// Intermediates of conditioning N(0, B Bᵀ) on pseudo-observations
/// N(obs_mean_q | f_q, obs_std_q²). Reused by the gradient code.
struct GpConditioning {
  Eigen::VectorXd obs_mean;
  Eigen::VectorXd obs_std;
  Eigen::VectorXd precision;       // obs_std⁻²
  Eigen::MatrixXd whitened_lower;  // chol(I + Bᵀ diag(precision) B)
  Eigen::VectorXd projected;       // Bᵀ (precision ∘ obs_mean)
  Eigen::VectorXd whitened_mean;   // M⁻¹ projected
  double log_marginal = 0.0;
};

inline GpConditioning condition_gp(const PriorFactor& prior, const Eigen::VectorXd& obs_mean,
                                   const Eigen::VectorXd& obs_std) {
  const Eigen::MatrixXd& b = prior.lower;
  const Eigen::Index q = b.rows();
  detail::require_observations(q, obs_mean, obs_std);

  GpConditioning c;
  c.obs_mean = obs_mean;
  c.obs_std = obs_std;
  c.precision = obs_std.array().square().inverse().matrix();
  Eigen::MatrixXd m = b.transpose() * c.precision.asDiagonal() * b;
  m.diagonal().array() += 1.0;
  Eigen::LLT<Eigen::MatrixXd> llt(m);
  if (llt.info() != Eigen::Success) throw CholeskyError("whitened GP system not positive definite");
  c.whitened_lower = llt.matrixL();
  c.projected = b.transpose() * c.precision.cwiseProduct(obs_mean);
  c.whitened_mean = llt.solve(c.projected);

  const double log_det =
      2.0 * obs_std.array().log().sum() + 2.0 * c.whitened_lower.diagonal().array().log().sum();
  const double quad = c.precision.dot(obs_mean.cwiseAbs2()) - c.projected.dot(c.whitened_mean);
  c.log_marginal = -0.5 * (static_cast<double>(q) * kLog2Pi + log_det + quad);
  return c;
}

/// Covariance over `points` from the local kernel, plus `jitter` on the diagonal.
inline CovMatrix build_local_cov(std::span<const AuxPoint> points, const KernelParams& p,
                                 double jitter = kDefaultJitter) {
  if (points.empty()) throw ShapeError("build_local_cov: empty point set");
  detail::require_single_digit(points, "build_local_cov");
  const auto q = static_cast<Eigen::Index>(points.size());
  CovMatrix k{Eigen::MatrixXd(q, q), jitter};
  for (Eigen::Index i = 0; i < q; ++i) {
    for (Eigen::Index j = 0; j <= i; ++j) {
      const double v = local_kernel(points[i], points[j], p);
      k.entries(i, j) = v;
      k.entries(j, i) = v;
    }
    k.entries(i, i) += jitter;
  }
  return k;
}

/// Prior of the identity-kernel ablation: independent unit Gaussians.
inline CovMatrix identity_cov(Eigen::Index q) {
  return {Eigen::MatrixXd::Identity(q, q), 0.0};
}

inline double gp_marginal_loglik(const CovMatrix& k, const Eigen::VectorXd& obs_mean,
                                 const Eigen::VectorXd& obs_std) {
  return condition_gp(factor_prior(k), obs_mean, obs_std).log_marginal;
}

/// Posterior of a GP prior with factor `prior` given a prepared conditioning.
inline GPPosterior posterior_from(const PriorFactor& prior, const GpConditioning& c) {
  const Eigen::MatrixXd& b = prior.lower;
  GPPosterior post;
  post.mean = b * c.whitened_mean;
  // factor = B L⁻ᵀ, so factor factorᵀ = B M⁻¹ Bᵀ = K − K (K + D)⁻¹ K.
  post.factor = c.whitened_lower.triangularView<Eigen::Lower>()
                    .solve(b.transpose())
                    .transpose();
  post.cov.entries = post.factor * post.factor.transpose();
  post.log_marginal = c.log_marginal;
  return post;
}

inline GPPosterior gp_posterior(const CovMatrix& k, const Eigen::VectorXd& obs_mean,
                                const Eigen::VectorXd& obs_std) {
  const PriorFactor prior = factor_prior(k);
  return posterior_from(prior, condition_gp(prior, obs_mean, obs_std));
}

/// Predictive mean and variance at `targets` given noisy observations at `points`.
inline GPPrediction gp_predict(const CovMatrix& k, std::span<const AuxPoint> points,
                               const Eigen::VectorXd& obs_mean, const Eigen::VectorXd& obs_std,
                               std::span<const AuxPoint> targets, const KernelParams& p) {
  if (points.empty()) throw ShapeError("gp_predict: no context points");
  detail::require_single_digit(points, "gp_predict");
  for (const auto& t : targets) {
    if (t.digit != points.front().digit) {
      throw MixedDigitError("gp_predict: target digit " + std::to_string(t.digit) +
                            " differs from context digit " + std::to_string(points.front().digit));
    }
  }
  const Eigen::Index q = k.size();
  if (static_cast<Eigen::Index>(points.size()) != q) throw ShapeError("gp_predict: K/points size");
  detail::require_observations(q, obs_mean, obs_std);

  Eigen::MatrixXd a = k.entries;
  a.diagonal() += obs_std.cwiseAbs2();
  const Eigen::MatrixXd lower = detail::cholesky_with_retry(a);
  const auto tri = lower.triangularView<Eigen::Lower>();

  const auto s = static_cast<Eigen::Index>(targets.size());
  Eigen::MatrixXd cross(q, s);
  for (Eigen::Index i = 0; i < q; ++i) {
    for (Eigen::Index j = 0; j < s; ++j) cross(i, j) = local_kernel(points[i], targets[j], p);
  }
  const Eigen::MatrixXd whitened_cross = tri.solve(cross);
  const Eigen::VectorXd whitened_obs = tri.solve(obs_mean);

  GPPrediction out;
  out.mean = whitened_cross.transpose() * whitened_obs;
  out.variance.resize(s);
  for (Eigen::Index j = 0; j < s; ++j) {
    const double prior_var = local_kernel(targets[j], targets[j], p);
    out.variance[j] = std::max(0.0, prior_var - whitened_cross.col(j).squaredNorm());
  }
  return out;
}

}  // namespace fgpvae
