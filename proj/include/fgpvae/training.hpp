#pragma once

// Mini-batch training over digit subsets with Adam and GECO, plus held-out
// angle evaluation and digit-space extrapolation.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "fgpvae/data.hpp"
#include "fgpvae/errors.hpp"
#include "fgpvae/model.hpp"

namespace fgpvae {

inline constexpr double kGecoMinMultiplier = 1e-4;
inline constexpr double kGecoMaxMultiplier = 1e4;

struct TrainConfig {
  // Optimization.
  int epochs = 1000;
  int subsets_per_batch = 20;
  int rotations_per_subset = 11;
  double learning_rate = 0.001;
  bool use_geco = true;
  double geco_kappa = 0.020;
  double geco_alpha = 0.01;
  double geco_ma_decay = 0.99;
  std::uint64_t seed = 0;
  bool ablation_identity_prior = false;
  int checkpoint_every = 100;

  // Model.
  int latent_channels = 16;
  int local_channels = 8;
  double sigma_y = 0.1;
  double kernel_amplitude = 1.0;
  double kernel_lengthscale = 1.0;
  bool learn_kernel = false;
  double jitter = kDefaultJitter;

  // Data and evaluation.
  int digit_label = 3;
  int num_digits = 400;
  int num_angles = 16;
  int train_digits = -1;
  int context_images = 11;
  int bench_epochs = 5;

  // Worker threads for per-subset work; results do not depend on it.
  int threads = 1;

  [[nodiscard]] ModelConfig model_config(int height, int width) const {
    ModelConfig m;
    m.latent = {latent_channels, local_channels};
    m.height = height;
    m.width = width;
    m.kernel = {kernel_amplitude, kernel_lengthscale};
    m.sigma_y = sigma_y;
    m.jitter = jitter;
    m.prior = ablation_identity_prior ? PriorKind::Identity : PriorKind::Factorized;
    return m;
  }

  [[nodiscard]] BuildOptions build_options() const {
    return {digit_label, num_digits, num_angles, train_digits, seed};
  }

  void validate() const {
    auto positive = [](bool ok, const char* key) {
      if (!ok) throw ConfigError(std::string(key) + " must be positive");
    };
    positive(epochs >= 0, "epochs");
    positive(subsets_per_batch > 0, "subsets_per_batch");
    positive(rotations_per_subset > 0, "rotations_per_subset");
    positive(learning_rate >= 0.0, "learning_rate");
    positive(geco_kappa > 0.0, "geco_kappa");
    positive(geco_alpha >= 0.0, "geco_alpha");
    positive(checkpoint_every > 0, "checkpoint_every");
    positive(sigma_y > 0.0, "sigma_y");
    positive(kernel_amplitude > 0.0, "kernel_amplitude");
    positive(kernel_lengthscale > 0.0, "kernel_lengthscale");
    positive(num_digits > 0, "num_digits");
    positive(num_angles > 0, "num_angles");
    positive(context_images > 0, "context_images");
    positive(bench_epochs > 0, "bench_epochs");
    positive(threads > 0, "threads");
    if (!(geco_ma_decay >= 0.0 && geco_ma_decay < 1.0)) {
      throw ConfigError("geco_ma_decay must lie in [0, 1)");
    }
    if (rotations_per_subset > num_angles) {
      throw ConfigError("rotations_per_subset exceeds num_angles");
    }
    LatentConfig{latent_channels, local_channels}.validate();
  }
};

namespace detail {

struct ConfigField {
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

template <typename T>
ConfigField field(T TrainConfig::*member) {
  ConfigField f;
  f.set = [member](TrainConfig& c, const std::string& text) {
    std::istringstream in(text);
    T value{};
    if constexpr (std::is_same_v<T, bool>) {
      if (text == "true" || text == "1") {
        value = true;
      } else if (text == "false" || text == "0") {
        value = false;
      } else {
        throw ConfigError("expected true/false, got '" + text + "'");
      }
    } else {
      in >> value;
      if (!in || !(in >> std::ws).eof()) throw ConfigError("cannot parse '" + text + "'");
    }
    c.*member = value;
  };
  f.get = [member](const TrainConfig& c) {
    std::ostringstream out;
    if constexpr (std::is_same_v<T, bool>) {
      out << (c.*member ? "true" : "false");
    } else {
      out << std::setprecision(17) << c.*member;
    }
    return out.str();
  };
  return f;
}

inline const std::map<std::string, ConfigField>& config_fields() {
  static const std::map<std::string, ConfigField> fields = {
      {"epochs", field(&TrainConfig::epochs)},
      {"subsets_per_batch", field(&TrainConfig::subsets_per_batch)},
      {"rotations_per_subset", field(&TrainConfig::rotations_per_subset)},
      {"learning_rate", field(&TrainConfig::learning_rate)},
      {"use_geco", field(&TrainConfig::use_geco)},
      {"geco_kappa", field(&TrainConfig::geco_kappa)},
      {"geco_alpha", field(&TrainConfig::geco_alpha)},
      {"geco_ma_decay", field(&TrainConfig::geco_ma_decay)},
      {"seed", field(&TrainConfig::seed)},
      {"ablation_identity_prior", field(&TrainConfig::ablation_identity_prior)},
      {"checkpoint_every", field(&TrainConfig::checkpoint_every)},
      {"latent_channels", field(&TrainConfig::latent_channels)},
      {"local_channels", field(&TrainConfig::local_channels)},
      {"sigma_y", field(&TrainConfig::sigma_y)},
      {"kernel_amplitude", field(&TrainConfig::kernel_amplitude)},
      {"kernel_lengthscale", field(&TrainConfig::kernel_lengthscale)},
      {"learn_kernel", field(&TrainConfig::learn_kernel)},
      {"jitter", field(&TrainConfig::jitter)},
      {"digit_label", field(&TrainConfig::digit_label)},
      {"num_digits", field(&TrainConfig::num_digits)},
      {"num_angles", field(&TrainConfig::num_angles)},
      {"train_digits", field(&TrainConfig::train_digits)},
      {"context_images", field(&TrainConfig::context_images)},
      {"bench_epochs", field(&TrainConfig::bench_epochs)},
  };
  return fields;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

/// Parses `key = value` lines; '#' starts a comment. Unknown keys are errors.
inline TrainConfig parse_config(const std::string& text, TrainConfig base = {}) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    const auto& fields = detail::config_fields();
    const auto it = fields.find(key);
    if (it == fields.end()) {
      throw ConfigError("line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
    try {
      it->second.set(base, value);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + key + ": " + e.what());
    }
  }
  base.validate();
  return base;
}

/// Every addressable key, in parse_config syntax.
inline std::string format_config(const TrainConfig& cfg) {
  std::string out;
  for (const auto& [key, f] : detail::config_fields()) out += key + " = " + f.get(cfg) + "\n";
  return out;
}

inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [key, f] : detail::config_fields()) keys.push_back(key);
  return keys;
}

// --- optimizers -------------------------------------------------------------

/// Multiplicative Lagrange-multiplier update on the smoothed constraint
/// C = batch_mse − κ.
inline GecoState geco_step(GecoState s, double batch_mse, const TrainConfig& cfg) {
  if (!(batch_mse >= 0.0)) throw std::invalid_argument("batch_mse must be non-negative");
  const double constraint = batch_mse - cfg.geco_kappa;
  s.constraint_ma = cfg.geco_ma_decay * s.constraint_ma + (1.0 - cfg.geco_ma_decay) * constraint;
  s.lagrange_multiplier = std::clamp(s.lagrange_multiplier * std::exp(cfg.geco_alpha * s.constraint_ma),
                                     kGecoMinMultiplier, kGecoMaxMultiplier);
  return s;
}

class Adam {
 public:
  explicit Adam(std::size_t n, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(n, 0.0), v_(n, 0.0) {}

  void step(std::span<double> params, std::span<const double> grad) {
    if (params.size() != m_.size() || grad.size() != m_.size()) throw ShapeError("adam size mismatch");
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grad[i];
      v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grad[i] * grad[i];
      params[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
    }
  }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::vector<double> m_, v_;
  long t_ = 0;
};

// --- training -------------------------------------------------------------

struct EpochMetrics {
  int epoch = 0;
  double elbo = 0.0;  // mean unweighted subset ELBO
  double mse = 0.0;   // mean per-pixel reconstruction MSE of training samples
  double geco_multiplier = 1.0;
  double seconds = 0.0;
};

inline constexpr const char* kMetricsHeader = "epoch,elbo,mse,geco_multiplier,seconds";

inline std::string metrics_csv(const std::vector<EpochMetrics>& rows) {
  std::ostringstream out;
  out << kMetricsHeader << "\n" << std::setprecision(17);
  for (const auto& r : rows) {
    out << r.epoch << "," << r.elbo << "," << r.mse << "," << r.geco_multiplier << "," << r.seconds << "\n";
  }
  return out.str();
}

struct TrainHooks {
  std::function<void(const EpochMetrics&, const ModelParams&)> on_epoch;
};

struct TrainResult {
  ModelParams params;
  std::vector<EpochMetrics> metrics;
};

namespace detail {

struct SubsetJob {
  DigitSubset subset;
  PosteriorNoise noise;
  ElboResult result;
  Gradients grads;
  double loss = 0.0;
};

template <typename Fn>
void run_parallel(std::size_t n, int threads, Fn fn) {
  const auto workers = static_cast<std::size_t>(std::max(1, threads));
  if (workers == 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t t = 0; t < std::min(workers, n); ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += workers) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

inline DigitSubset subsample(const DigitSubset& s, int count, std::mt19937_64& rng) {
  if (static_cast<int>(s.size()) <= count) return s;
  std::vector<std::size_t> idx(s.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(static_cast<std::size_t>(count));
  std::sort(idx.begin(), idx.end());
  DigitSubset out;
  out.digit = s.digit;
  for (std::size_t i : idx) {
    out.images.push_back(s.images[i]);
    out.aux.push_back(s.aux[i]);
    out.indices.push_back(s.indices[i]);
    out.split.push_back(s.split[i]);
  }
  return out;
}

// Negative GECO-weighted objective of one subset: λ (−Σ log p) + (Σ log q̃ − log Z).
inline double subset_loss(const ElboResult& r, double multiplier) {
  return -multiplier * r.parts.loglik + (r.parts.log_qtilde - r.parts.log_z);
}

}  // namespace detail

inline TrainResult train(const RotatedDataset& ds, const TrainConfig& cfg, const TrainHooks& hooks = {},
                         std::optional<ModelParams> initial = std::nullopt) {
  cfg.validate();
  const ModelConfig mcfg = cfg.model_config(ds.height, ds.width);
  Model model(mcfg);
  TrainResult out;
  out.params = initial ? std::move(*initial) : model.init(cfg.seed);
  out.params.config = mcfg;
  ModelParams& params = out.params;

  const auto subsets = subsets_with_split(ds, Split::Train);
  if (subsets.empty()) throw DataError("dataset has no training images");

  std::mt19937_64 rng(cfg.seed ^ 0x5DEECE66DULL);
  const std::size_t n_enc = params.encoder.size();
  Adam adam(n_enc + params.decoder.size(), cfg.learning_rate);
  Adam kernel_adam(2, cfg.learning_rate);
  std::vector<double> flat(n_enc + params.decoder.size());
  std::vector<double> grad(flat.size());

  std::vector<std::size_t> order(subsets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    double elbo_sum = 0.0, mse_sum = 0.0;
    std::size_t seen = 0;

    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.subsets_per_batch)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.subsets_per_batch));
      std::vector<detail::SubsetJob> jobs(stop - start);
      for (std::size_t j = 0; j < jobs.size(); ++j) {
        jobs[j].subset = detail::subsample(subsets[order[start + j]], cfg.rotations_per_subset, rng);
        jobs[j].noise = model.draw_noise(static_cast<Eigen::Index>(jobs[j].subset.size()), rng);
      }
      const double multiplier = cfg.use_geco ? params.geco.lagrange_multiplier : 1.0;
      detail::run_parallel(jobs.size(), cfg.threads, [&](std::size_t j) {
        auto& job = jobs[j];
        ElboTape tape;
        job.result = subset_elbo(model, params, job.subset, job.noise, &tape);
        job.loss = detail::subset_loss(job.result, multiplier);
        job.grads.resize_like(params);
        backward(model, params, tape, job.grads, -multiplier, -1.0);
      });

      std::fill(grad.begin(), grad.end(), 0.0);
      double batch_mse = 0.0;
      const double inv = 1.0 / static_cast<double>(jobs.size());
      for (const auto& job : jobs) {
        if (!std::isfinite(job.loss) || !std::isfinite(job.result.elbo)) {
          throw NonFiniteError("non-finite loss at epoch " + std::to_string(epoch) + " (digit " +
                               std::to_string(job.subset.digit) + ")");
        }
        for (std::size_t i = 0; i < n_enc; ++i) grad[i] += inv * job.grads.encoder[i];
        for (std::size_t i = 0; i < job.grads.decoder.size(); ++i) grad[n_enc + i] += inv * job.grads.decoder[i];
        batch_mse += inv * job.result.recon_mse;
        elbo_sum += job.result.elbo;
        mse_sum += job.result.recon_mse;
        ++seen;
      }
      for (double g : grad) {
        if (!std::isfinite(g)) throw NonFiniteError("non-finite gradient at epoch " + std::to_string(epoch));
      }

      if (cfg.learn_kernel && mcfg.prior == PriorKind::Factorized) {
        // Central differences in log-parameter space with the batch's frozen noise.
        std::array<double, 2> kgrad{};
        std::array<double, 2> logs = {std::log(params.config.kernel.amplitude),
                                      std::log(params.config.kernel.lengthscale)};
        constexpr double h = 1e-4;
        for (int k = 0; k < 2; ++k) {
          double f[2];
          for (int side = 0; side < 2; ++side) {
            auto shifted = logs;
            shifted[static_cast<std::size_t>(k)] += side ? h : -h;
            ModelConfig c = params.config;
            c.kernel = {std::exp(shifted[0]), std::exp(shifted[1])};
            Model probe(c);
            double loss = 0.0;
            for (const auto& job : jobs) {
              loss += inv * detail::subset_loss(subset_elbo(probe, params, job.subset, job.noise), multiplier);
            }
            f[side] = loss;
          }
          kgrad[static_cast<std::size_t>(k)] = (f[1] - f[0]) / (2.0 * h);
        }
        kernel_adam.step(logs, kgrad);
        params.config.kernel = {std::exp(logs[0]), std::exp(logs[1])};
        model = Model(params.config);
      }

      std::copy(params.encoder.values.begin(), params.encoder.values.end(), flat.begin());
      std::copy(params.decoder.values.begin(), params.decoder.values.end(), flat.begin() + static_cast<std::ptrdiff_t>(n_enc));
      adam.step(flat, grad);
      std::copy(flat.begin(), flat.begin() + static_cast<std::ptrdiff_t>(n_enc), params.encoder.values.begin());
      std::copy(flat.begin() + static_cast<std::ptrdiff_t>(n_enc), flat.end(), params.decoder.values.begin());

      if (cfg.use_geco) params.geco = geco_step(params.geco, batch_mse, cfg);
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.elbo = elbo_sum / static_cast<double>(seen);
    m.mse = mse_sum / static_cast<double>(seen);
    m.geco_multiplier = params.geco.lagrange_multiplier;
    m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.metrics.push_back(m);
    if (hooks.on_epoch) hooks.on_epoch(m, params);
  }
  return out;
}

// --- evaluation -------------------------------------------------------------

/// Mean per-pixel MSE of conditional generations at each held-out test angle,
/// conditioned on the digit's training images.
inline double evaluate(const Model& model, const ModelParams& params, const RotatedDataset& ds) {
  const auto train = subsets_with_split(ds, Split::Train);
  const auto test = subsets_with_split(ds, Split::Test);
  if (test.empty()) throw DataError("dataset has no test images");
  std::map<int, const DigitSubset*> context;
  for (const auto& s : train) context[s.digit] = &s;

  double sq = 0.0;
  std::size_t n = 0;
  for (const auto& s : test) {
    const auto it = context.find(s.digit);
    if (it == context.end()) {
      throw MissingContextError("test digit " + std::to_string(s.digit) + " has no training images");
    }
    const auto ctx = encode_context(model, params, it->second->images, it->second->aux);
    for (std::size_t i = 0; i < s.size(); ++i) {
      sq += mean_squared_error(generate(model, params, ctx, s.aux[i]), s.images[i]);
      ++n;
    }
  }
  return sq / static_cast<double>(n);
}

/// Context/target split of one extrapolation digit: `context_images` angles
/// (capped at Q − 1) are observed, the rest are generated.
struct ExtrapolationSplit {
  std::vector<std::size_t> context;
  std::vector<std::size_t> targets;
};

inline ExtrapolationSplit extrapolation_split(const DigitSubset& s, int context_images,
                                              std::uint64_t seed) {
  std::vector<std::size_t> idx(s.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed ^ (0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(s.digit + 1)));
  std::shuffle(idx.begin(), idx.end(), rng);
  const std::size_t k = std::min(static_cast<std::size_t>(context_images), s.size() - 1);
  ExtrapolationSplit out{{idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k)},
                         {idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end()}};
  std::sort(out.context.begin(), out.context.end());
  std::sort(out.targets.begin(), out.targets.end());
  return out;
}

inline DigitContext context_from(const Model& model, const ModelParams& params, const DigitSubset& s,
                                 const std::vector<std::size_t>& which) {
  std::vector<Image> images;
  std::vector<AuxPoint> aux;
  for (std::size_t i : which) {
    images.push_back(s.images[i]);
    aux.push_back(s.aux[i]);
  }
  return encode_context(model, params, images, aux);
}

/// Mean per-pixel MSE of generations for digits never seen in training.
inline double extrapolate_eval(const Model& model, const ModelParams& params, const RotatedDataset& ds,
                               int context_images, std::uint64_t seed) {
  const auto digits = subsets_with_split(ds, Split::Extrapolation);
  if (digits.empty()) throw DataError("dataset has no extrapolation digits");
  double sq = 0.0;
  std::size_t n = 0;
  for (const auto& s : digits) {
    if (s.size() < 2) throw MissingContextError("extrapolation digit needs at least two images");
    const auto split = extrapolation_split(s, context_images, seed);
    const auto ctx = context_from(model, params, s, split.context);
    for (std::size_t i : split.targets) {
      sq += mean_squared_error(generate(model, params, ctx, s.aux[i]), s.images[i]);
      ++n;
    }
  }
  return sq / static_cast<double>(n);
}

// --- scaling --------------------------------------------------------------

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
};

/// Ordinary least squares y ≈ slope·x + intercept.
inline LinearFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("fit_line needs two or more points");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  LinearFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  double ss_res = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double r = y[i] - (f.slope * x[i] + f.intercept);
    ss_res += r * r;
  }
  f.r2 = syy > 0.0 ? 1.0 - ss_res / syy : 1.0;
  return f;
}

/// Median of per-epoch wall-clock seconds.
inline double median_epoch_seconds(const std::vector<EpochMetrics>& metrics) {
  if (metrics.empty()) throw std::invalid_argument("no epochs recorded");
  std::vector<double> t;
  for (const auto& m : metrics) t.push_back(m.seconds);
  std::sort(t.begin(), t.end());
  const std::size_t k = t.size() / 2;
  return t.size() % 2 ? t[k] : 0.5 * (t[k - 1] + t[k]);
}

}  // namespace fgpvae
