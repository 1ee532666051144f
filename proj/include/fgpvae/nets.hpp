#pragma once

// Convolutional inference and generative networks with hand-written reverse
// passes. Encoder: three 3x3 convolutions (8 filters, ELU; stride 1, 2, 2,
// "same" padding) and one fully connected layer. Decoder mirrors it with
// transposed convolutions and a sigmoid output.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fgpvae/errors.hpp"
#include "fgpvae/gp.hpp"
#include "fgpvae/posterior.hpp"

namespace fgpvae {

inline constexpr int kFilters = 8;
inline constexpr int kKernelSize = 3;
inline constexpr int kConvLayers = 3;
inline constexpr double kStdFloor = 1e-4;

struct Image {
  int height = 28;
  int width = 28;
  std::vector<double> pixels;

  Image() = default;
  Image(int h, int w) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w, 0.0) {}
  Image(int h, int w, std::vector<double> px) : height(h), width(w), pixels(std::move(px)) {
    if (pixels.size() != static_cast<std::size_t>(h) * w) throw ShapeError("image pixel count");
  }

  [[nodiscard]] std::size_t size() const { return pixels.size(); }
  double& at(int y, int x) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  [[nodiscard]] double at(int y, int x) const {
    return pixels[static_cast<std::size_t>(y) * width + x];
  }

  friend bool operator==(const Image&, const Image&) = default;
};

inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
inline double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}
/// Positivity map for encoder standard deviations.
inline double positive_std(double raw) { return kStdFloor + softplus(raw); }

struct ParamEntry {
  std::string name;
  std::vector<std::int64_t> shape;
  std::size_t offset = 0;

  [[nodiscard]] std::size_t count() const {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           [](std::size_t a, std::int64_t b) { return a * static_cast<std::size_t>(b); });
  }
  friend bool operator==(const ParamEntry&, const ParamEntry&) = default;
};

/// Flat parameter vector with named views.
struct NetParams {
  std::vector<ParamEntry> manifest;
  std::vector<double> values;

  std::size_t add(std::string name, std::vector<std::int64_t> shape) {
    ParamEntry e{std::move(name), std::move(shape), values.size()};
    values.resize(values.size() + e.count(), 0.0);
    manifest.push_back(std::move(e));
    return manifest.back().offset;
  }
  [[nodiscard]] const ParamEntry& entry(const std::string& name) const {
    for (const auto& e : manifest) {
      if (e.name == name) return e;
    }
    throw std::out_of_range("no parameter named " + name);
  }
  std::span<double> view(const std::string& name) {
    const auto& e = entry(name);
    return {values.data() + e.offset, e.count()};
  }
  [[nodiscard]] std::span<const double> view(const std::string& name) const {
    const auto& e = entry(name);
    return {values.data() + e.offset, e.count()};
  }
  [[nodiscard]] std::size_t size() const { return values.size(); }

  friend bool operator==(const NetParams&, const NetParams&) = default;
};

enum class LayerKind { Conv, ConvTranspose, Dense };
enum class Activation { None, Elu, Sigmoid };

struct LayerSpec {
  LayerKind kind = LayerKind::Dense;
  Activation activation = Activation::None;
  int in_channels = 0, out_channels = 0;
  int in_h = 1, in_w = 1, out_h = 1, out_w = 1;
  int stride = 1;
  std::size_t weight_offset = 0, bias_offset = 0;

  [[nodiscard]] std::size_t in_size() const {
    return static_cast<std::size_t>(in_channels) * in_h * in_w;
  }
  [[nodiscard]] std::size_t out_size() const {
    return static_cast<std::size_t>(out_channels) * out_h * out_w;
  }
};

namespace detail {

// Shared 3x3 "same"-padded stencil between a large map (channels_big x hb x wb)
// and a small map (channels_small x hs x ws) with hs = ceil(hb / stride).
// Weights are laid out [small][big][ky][kx].
struct Stencil {
  int channels_big, hb, wb;
  int channels_small, hs, ws;
  int stride;

  [[nodiscard]] std::size_t widx(int s, int b, int ky, int kx) const {
    return ((static_cast<std::size_t>(s) * channels_big + b) * kKernelSize + ky) * kKernelSize + kx;
  }
  // Valid small-map x range for a given kx: 0 <= x*stride + kx - 1 < wb.
  void x_range(int kx, int& x0, int& x1) const {
    x0 = kx >= 1 ? 0 : (1 - kx + stride - 1) / stride;
    x1 = std::min(ws, (wb - kx + 1 + stride - 1) / stride);
  }

  // small[s][y][x] += Σ W big[b][y*stride+ky-1][x*stride+kx-1]
  void gather(const double* big, const double* w, double* small) const {
    for (int s = 0; s < channels_small; ++s) {
      double* out = small + static_cast<std::size_t>(s) * hs * ws;
      for (int b = 0; b < channels_big; ++b) {
        const double* in = big + static_cast<std::size_t>(b) * hb * wb;
        for (int ky = 0; ky < kKernelSize; ++ky) {
          for (int kx = 0; kx < kKernelSize; ++kx) {
            const double wv = w[widx(s, b, ky, kx)];
            int x0, x1;
            x_range(kx, x0, x1);
            for (int y = 0; y < hs; ++y) {
              const int iy = y * stride + ky - 1;
              if (iy < 0 || iy >= hb) continue;
              const std::ptrdiff_t base = static_cast<std::ptrdiff_t>(iy) * wb + kx - 1;
              double* orow = out + static_cast<std::size_t>(y) * ws;
              for (int x = x0; x < x1; ++x) orow[x] += wv * in[base + x * stride];
            }
          }
        }
      }
    }
  }

  // big[b][y*stride+ky-1][x*stride+kx-1] += W small[s][y][x]
  void scatter(const double* small, const double* w, double* big) const {
    for (int s = 0; s < channels_small; ++s) {
      const double* in = small + static_cast<std::size_t>(s) * hs * ws;
      for (int b = 0; b < channels_big; ++b) {
        double* out = big + static_cast<std::size_t>(b) * hb * wb;
        for (int ky = 0; ky < kKernelSize; ++ky) {
          for (int kx = 0; kx < kKernelSize; ++kx) {
            const double wv = w[widx(s, b, ky, kx)];
            int x0, x1;
            x_range(kx, x0, x1);
            for (int y = 0; y < hs; ++y) {
              const int iy = y * stride + ky - 1;
              if (iy < 0 || iy >= hb) continue;
              const std::ptrdiff_t base = static_cast<std::ptrdiff_t>(iy) * wb + kx - 1;
              const double* irow = in + static_cast<std::size_t>(y) * ws;
              for (int x = x0; x < x1; ++x) out[base + x * stride] += wv * irow[x];
            }
          }
        }
      }
    }
  }

  // dW[s][b][ky][kx] += Σ small[s][y][x] big[b][y*stride+ky-1][x*stride+kx-1]
  void weight_grad(const double* small, const double* big, double* grad_w) const {
    for (int s = 0; s < channels_small; ++s) {
      const double* sm = small + static_cast<std::size_t>(s) * hs * ws;
      for (int b = 0; b < channels_big; ++b) {
        const double* bg = big + static_cast<std::size_t>(b) * hb * wb;
        for (int ky = 0; ky < kKernelSize; ++ky) {
          for (int kx = 0; kx < kKernelSize; ++kx) {
            int x0, x1;
            x_range(kx, x0, x1);
            double acc = 0.0;
            for (int y = 0; y < hs; ++y) {
              const int iy = y * stride + ky - 1;
              if (iy < 0 || iy >= hb) continue;
              const std::ptrdiff_t base = static_cast<std::ptrdiff_t>(iy) * wb + kx - 1;
              const double* srow = sm + static_cast<std::size_t>(y) * ws;
              for (int x = x0; x < x1; ++x) acc += srow[x] * bg[base + x * stride];
            }
            grad_w[widx(s, b, ky, kx)] += acc;
          }
        }
      }
    }
  }
};

inline Stencil stencil_of(const LayerSpec& l) {
  if (l.kind == LayerKind::Conv) {
    return {l.in_channels, l.in_h, l.in_w, l.out_channels, l.out_h, l.out_w, l.stride};
  }
  return {l.out_channels, l.out_h, l.out_w, l.in_channels, l.in_h, l.in_w, l.stride};
}

inline double activate(Activation a, double x) {
  switch (a) {
    case Activation::Elu:
      return x > 0.0 ? x : std::expm1(x);
    case Activation::Sigmoid:
      return sigmoid(x);
    case Activation::None:
      break;
  }
  return x;
}

// Derivative expressed through the activation's output.
inline double activation_slope(Activation a, double y) {
  switch (a) {
    case Activation::Elu:
      return y > 0.0 ? 1.0 : y + 1.0;
    case Activation::Sigmoid:
      return y * (1.0 - y);
    case Activation::None:
      break;
  }
  return 1.0;
}

}  // namespace detail

/// Outputs of every layer from one forward pass; index 0 is the network input.
struct Activations {
  std::vector<std::vector<double>> layers;
};

/// A feed-forward stack of conv / transposed-conv / dense layers over a flat
/// parameter vector.
class LayerStack {
 public:
  void push(LayerSpec spec) { layers_.push_back(spec); }
  [[nodiscard]] const std::vector<LayerSpec>& layers() const { return layers_; }
  [[nodiscard]] std::size_t input_size() const { return layers_.front().in_size(); }
  [[nodiscard]] std::size_t output_size() const { return layers_.back().out_size(); }

  std::vector<double> forward(const NetParams& params, std::span<const double> input,
                              Activations* cache) const {
    if (input.size() != input_size()) throw ShapeError("layer stack input size mismatch");
    std::vector<double> current(input.begin(), input.end());
    if (cache) {
      cache->layers.clear();
      cache->layers.push_back(current);
    }
    for (const auto& l : layers_) {
      std::vector<double> out(l.out_size(), 0.0);
      const double* w = params.values.data() + l.weight_offset;
      const double* bias = params.values.data() + l.bias_offset;
      switch (l.kind) {
        case LayerKind::Dense:
          for (int o = 0; o < l.out_channels; ++o) {
            const double* row = w + static_cast<std::size_t>(o) * l.in_channels;
            double acc = bias[o];
            for (int i = 0; i < l.in_channels; ++i) acc += row[i] * current[static_cast<std::size_t>(i)];
            out[static_cast<std::size_t>(o)] = acc;
          }
          break;
        case LayerKind::Conv:
          detail::stencil_of(l).gather(current.data(), w, out.data());
          add_channel_bias(l, bias, out);
          break;
        case LayerKind::ConvTranspose:
          detail::stencil_of(l).scatter(current.data(), w, out.data());
          add_channel_bias(l, bias, out);
          break;
      }
      for (double& v : out) v = detail::activate(l.activation, v);
      current = std::move(out);
      if (cache) cache->layers.push_back(current);
    }
    return current;
  }

  /// Accumulates parameter gradients into `grad_params` (same layout as the
  /// parameters) and returns the gradient with respect to the input.
  std::vector<double> backward(const NetParams& params, const Activations& cache,
                               std::span<const double> grad_output,
                               std::span<double> grad_params) const {
    if (grad_output.size() != output_size()) throw ShapeError("gradient size mismatch");
    std::vector<double> grad(grad_output.begin(), grad_output.end());
    for (std::size_t k = layers_.size(); k-- > 0;) {
      const auto& l = layers_[k];
      const auto& in = cache.layers[k];
      const auto& out = cache.layers[k + 1];
      for (std::size_t i = 0; i < grad.size(); ++i) grad[i] *= detail::activation_slope(l.activation, out[i]);

      const double* w = params.values.data() + l.weight_offset;
      double* gw = grad_params.data() + l.weight_offset;
      double* gb = grad_params.data() + l.bias_offset;
      std::vector<double> grad_in(l.in_size(), 0.0);
      switch (l.kind) {
        case LayerKind::Dense:
          for (int o = 0; o < l.out_channels; ++o) {
            const double g = grad[static_cast<std::size_t>(o)];
            gb[o] += g;
            const double* row = w + static_cast<std::size_t>(o) * l.in_channels;
            double* grow = gw + static_cast<std::size_t>(o) * l.in_channels;
            for (int i = 0; i < l.in_channels; ++i) {
              grow[i] += g * in[static_cast<std::size_t>(i)];
              grad_in[static_cast<std::size_t>(i)] += g * row[i];
            }
          }
          break;
        case LayerKind::Conv: {
          const auto st = detail::stencil_of(l);
          channel_bias_grad(l, grad, gb);
          st.weight_grad(grad.data(), in.data(), gw);
          st.scatter(grad.data(), w, grad_in.data());
          break;
        }
        case LayerKind::ConvTranspose: {
          const auto st = detail::stencil_of(l);
          channel_bias_grad(l, grad, gb);
          st.weight_grad(in.data(), grad.data(), gw);
          st.gather(grad.data(), w, grad_in.data());
          break;
        }
      }
      grad = std::move(grad_in);
    }
    return grad;
  }

 private:
  static void add_channel_bias(const LayerSpec& l, const double* bias, std::vector<double>& out) {
    const std::size_t plane = static_cast<std::size_t>(l.out_h) * l.out_w;
    for (int c = 0; c < l.out_channels; ++c) {
      for (std::size_t i = 0; i < plane; ++i) out[c * plane + i] += bias[c];
    }
  }
  static void channel_bias_grad(const LayerSpec& l, const std::vector<double>& grad, double* gb) {
    const std::size_t plane = static_cast<std::size_t>(l.out_h) * l.out_w;
    for (int c = 0; c < l.out_channels; ++c) {
      double acc = 0.0;
      for (std::size_t i = 0; i < plane; ++i) acc += grad[c * plane + i];
      gb[c] += acc;
    }
  }

  std::vector<LayerSpec> layers_;
};

/// Image geometry and latent width shared by both networks.
struct NetShape {
  int height = 28;
  int width = 28;
  int latent = 16;

  void validate() const {
    if (height < 4 || width < 4 || height % 4 != 0 || width % 4 != 0) {
      throw ShapeError("image sides must be positive multiples of 4, got " +
                       std::to_string(height) + "x" + std::to_string(width));
    }
    if (latent < 1) throw ShapeError("latent width must be positive");
  }
};

namespace detail {

inline LayerSpec add_layer(NetParams& params, const std::string& prefix, LayerKind kind,
                           Activation act, int in_c, int out_c, int in_h, int in_w, int stride) {
  LayerSpec l;
  l.kind = kind;
  l.activation = act;
  l.in_channels = in_c;
  l.out_channels = out_c;
  l.in_h = in_h;
  l.in_w = in_w;
  l.stride = stride;
  if (kind == LayerKind::Dense) {
    l.out_h = l.out_w = 1;
    l.weight_offset = params.add(prefix + ".weight", {out_c, in_c});
  } else {
    if (kind == LayerKind::Conv) {
      l.out_h = (in_h + stride - 1) / stride;
      l.out_w = (in_w + stride - 1) / stride;
      l.weight_offset = params.add(prefix + ".weight", {out_c, in_c, kKernelSize, kKernelSize});
    } else {
      l.out_h = in_h * stride;
      l.out_w = in_w * stride;
      l.weight_offset = params.add(prefix + ".weight", {in_c, out_c, kKernelSize, kKernelSize});
    }
  }
  l.bias_offset = params.add(prefix + ".bias", {out_c});
  return l;
}

}  // namespace detail

/// Inference network: image -> (means, stds) for L channels.
class Encoder {
 public:
  Encoder() : Encoder(NetShape{}) {}
  explicit Encoder(NetShape shape) : shape_(shape) {
    shape_.validate();
    using detail::add_layer;
    int h = shape.height, w = shape.width;
    const int strides[kConvLayers] = {1, 2, 2};
    int in_c = 1;
    for (int i = 0; i < kConvLayers; ++i) {
      auto l = add_layer(layout_, "encoder.conv" + std::to_string(i + 1), LayerKind::Conv,
                         Activation::Elu, in_c, kFilters, h, w, strides[i]);
      stack_.push(l);
      h = l.out_h;
      w = l.out_w;
      in_c = kFilters;
    }
    stack_.push(add_layer(layout_, "encoder.fc", LayerKind::Dense, Activation::None,
                          kFilters * h * w, 2 * shape.latent, 1, 1, 1));
  }

  [[nodiscard]] const NetShape& shape() const { return shape_; }
  [[nodiscard]] const LayerStack& stack() const { return stack_; }
  /// Zero-valued parameters with this network's manifest.
  [[nodiscard]] NetParams layout() const { return layout_; }

  /// Fan-in-scaled uniform weights; the final layer starts at zero.
  [[nodiscard]] NetParams init(std::mt19937_64& rng) const {
    NetParams p = layout_;
    for (std::size_t k = 0; k + 1 < stack_.layers().size(); ++k) fill_uniform(p, stack_.layers()[k], rng);
    return p;
  }

  struct Output {
    Eigen::VectorXd means;
    Eigen::VectorXd stds;
    std::vector<double> raw;  // pre-positivity outputs, [means | std logits]
  };

  Output encode(const NetParams& params, const Image& y, Activations* cache = nullptr) const {
    if (y.height != shape_.height || y.width != shape_.width) {
      throw ShapeError("encoder expects " + std::to_string(shape_.height) + "x" +
                       std::to_string(shape_.width) + " images, got " + std::to_string(y.height) +
                       "x" + std::to_string(y.width));
    }
    Output out;
    out.raw = stack_.forward(params, y.pixels, cache);
    const int latent = shape_.latent;
    out.means.resize(latent);
    out.stds.resize(latent);
    for (int l = 0; l < latent; ++l) {
      out.means[l] = out.raw[static_cast<std::size_t>(l)];
      out.stds[l] = positive_std(out.raw[static_cast<std::size_t>(latent + l)]);
    }
    return out;
  }

  /// Backpropagates dF/d(means, stds) of one image into `grad_params`.
  void backward(const NetParams& params, const Activations& cache, const Output& out,
                const Eigen::VectorXd& grad_means, const Eigen::VectorXd& grad_stds,
                std::span<double> grad_params) const {
    const int latent = shape_.latent;
    std::vector<double> grad_raw(2 * static_cast<std::size_t>(latent));
    for (int l = 0; l < latent; ++l) {
      grad_raw[static_cast<std::size_t>(l)] = grad_means[l];
      grad_raw[static_cast<std::size_t>(latent + l)] =
          grad_stds[l] * sigmoid(out.raw[static_cast<std::size_t>(latent + l)]);
    }
    stack_.backward(params, cache, grad_raw, grad_params);
  }

  static void fill_uniform(NetParams& p, const LayerSpec& l, std::mt19937_64& rng) {
    std::size_t fan_in = 0, count = 0;
    if (l.kind == LayerKind::Dense) {
      fan_in = static_cast<std::size_t>(l.in_channels);
      count = static_cast<std::size_t>(l.in_channels) * l.out_channels;
    } else {
      fan_in = static_cast<std::size_t>(l.in_channels) * kKernelSize * kKernelSize;
      if (l.kind == LayerKind::ConvTranspose) fan_in /= static_cast<std::size_t>(l.stride * l.stride);
      count = static_cast<std::size_t>(l.in_channels) * l.out_channels * kKernelSize * kKernelSize;
    }
    const double bound = std::sqrt(3.0 / static_cast<double>(std::max<std::size_t>(fan_in, 1)));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (std::size_t i = 0; i < count; ++i) p.values[l.weight_offset + i] = dist(rng);
  }

 private:
  NetShape shape_;
  NetParams layout_;
  LayerStack stack_;
};

/// Generative network: latent vector -> mean image with pixels in (0, 1).
class Decoder {
 public:
  Decoder() : Decoder(NetShape{}) {}
  explicit Decoder(NetShape shape) : shape_(shape) {
    shape_.validate();
    using detail::add_layer;
    const int h = shape.height / 4, w = shape.width / 4;
    stack_.push(add_layer(layout_, "decoder.fc", LayerKind::Dense, Activation::Elu, shape.latent,
                          kFilters * h * w, 1, 1, 1));
    const auto d1 = add_layer(layout_, "decoder.deconv1", LayerKind::ConvTranspose,
                              Activation::Elu, kFilters, kFilters, h, w, 2);
    stack_.push(d1);
    const auto d2 = add_layer(layout_, "decoder.deconv2", LayerKind::ConvTranspose,
                              Activation::Elu, kFilters, kFilters, d1.out_h, d1.out_w, 2);
    stack_.push(d2);
    stack_.push(add_layer(layout_, "decoder.deconv3", LayerKind::ConvTranspose,
                          Activation::Sigmoid, kFilters, 1, d2.out_h, d2.out_w, 1));
  }

  [[nodiscard]] const NetShape& shape() const { return shape_; }
  [[nodiscard]] const LayerStack& stack() const { return stack_; }
  [[nodiscard]] NetParams layout() const { return layout_; }

  [[nodiscard]] NetParams init(std::mt19937_64& rng) const {
    NetParams p = layout_;
    for (const auto& l : stack_.layers()) Encoder::fill_uniform(p, l, rng);
    return p;
  }

  Image decode(const NetParams& params, const Eigen::VectorXd& z, Activations* cache = nullptr) const {
    if (z.size() != shape_.latent) throw ShapeError("decoder latent size mismatch");
    if (!z.allFinite()) throw NonFiniteError("decoder input is not finite");
    std::vector<double> in(z.data(), z.data() + z.size());
    return {shape_.height, shape_.width, stack_.forward(params, in, cache)};
  }

  /// Accumulates parameter gradients and returns dF/dz given dF/d(pixels).
  Eigen::VectorXd backward(const NetParams& params, const Activations& cache,
                           std::span<const double> grad_pixels, std::span<double> grad_params) const {
    const auto g = stack_.backward(params, cache, grad_pixels, grad_params);
    return Eigen::Map<const Eigen::VectorXd>(g.data(), static_cast<Eigen::Index>(g.size()));
  }

 private:
  NetShape shape_;
  NetParams layout_;
  LayerStack stack_;
};

/// Σ_pixels log N(y | mu, sigma_y²).
inline double gaussian_loglik(const Image& y, const Image& mu, double sigma_y) {
  if (y.size() != mu.size()) throw ShapeError("gaussian_loglik: image size mismatch");
  if (!(sigma_y > 0.0)) throw std::invalid_argument("sigma_y must be positive");
  double sq = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double d = y.pixels[i] - mu.pixels[i];
    sq += d * d;
  }
  const auto k = static_cast<double>(y.size());
  return -0.5 * k * (kLog2Pi + 2.0 * std::log(sigma_y)) - 0.5 * sq / (sigma_y * sigma_y);
}

/// d gaussian_loglik / d mu.
inline std::vector<double> gaussian_loglik_grad(const Image& y, const Image& mu, double sigma_y) {
  std::vector<double> g(y.size());
  const double inv = 1.0 / (sigma_y * sigma_y);
  for (std::size_t i = 0; i < y.size(); ++i) g[i] = (y.pixels[i] - mu.pixels[i]) * inv;
  return g;
}

inline double mean_squared_error(const Image& a, const Image& b) {
  if (a.size() != b.size()) throw ShapeError("mse: image size mismatch");
  double sq = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.pixels[i] - b.pixels[i];
    sq += d * d;
  }
  return sq / static_cast<double>(a.size());
}

}  // namespace fgpvae
