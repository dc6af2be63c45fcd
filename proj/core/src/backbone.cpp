#include "centerseg/backbone.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

#include "centerseg/error.hpp"
#include "centerseg/random.hpp"

namespace centerseg {
namespace {

std::array<std::size_t, 2> strides_for(std::size_t downsample) {
  switch (downsample) {
    case 1:
      return {1, 1};
    case 2:
      return {2, 1};
    case 4:
      return {2, 2};
    default:
      throw ConfigError("backbone: downsample must be 1, 2 or 4, got " +
                        std::to_string(downsample));
  }
}

}  // namespace

void BackboneConfig::validate() const {
  if (in_channels == 0 || hidden_channels == 0 || feature_dim == 0) {
    throw ConfigError("backbone: channel counts must be positive");
  }
  strides_for(downsample);
}

template <typename T>
std::vector<Tensor<T>> BackboneParams<T>::parameters() const {
  std::vector<Tensor<T>> out;
  for (std::size_t i = 0; i < kernels.size(); ++i) {
    out.push_back(kernels[i]);
    out.push_back(biases[i]);
  }
  return out;
}

template <typename T>
void BackboneParams<T>::zero_grad() {
  for (auto& k : kernels) k.zero_grad();
  for (auto& b : biases) b.zero_grad();
}

template <typename T>
void BackboneParams<T>::set_requires_grad(bool value) {
  for (auto& k : kernels) k.set_requires_grad(value);
  for (auto& b : biases) b.set_requires_grad(value);
}

template <typename T>
BackboneParams<T> init_params(std::uint64_t seed, const BackboneConfig& config) {
  config.validate();
  const std::size_t h = config.hidden_channels;
  const std::array<std::array<std::size_t, 3>, 4> layers{{
      {h, config.in_channels, 3},
      {h, h, 3},
      {h, h, 3},
      {config.feature_dim, h, 1},
  }};
  Rng rng(seed);
  BackboneParams<T> params;
  params.config = config;
  for (const auto& [out_c, in_c, k] : layers) {
    const double fan_in = static_cast<double>(in_c * k * k);
    const double fan_out = static_cast<double>(out_c * k * k);
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    std::vector<T> values(out_c * in_c * k * k);
    for (T& v : values) v = static_cast<T>(rng.uniform(-bound, bound));
    params.kernels.emplace_back(Shape{out_c, in_c, k, k}, std::move(values), true);
    params.biases.emplace_back(Shape{out_c}, T(0), true);
  }
  return params;
}

template <typename T>
Tensor<T> forward(const Tensor<T>& image, const BackboneParams<T>& params) {
  const BackboneConfig& cfg = params.config;
  if (image.rank() != 3 || image.dim(0) != cfg.in_channels) {
    throw DimensionError("backbone: expected image [" + std::to_string(cfg.in_channels) +
                         ", H, W], got " + to_string(image.shape()));
  }
  if (image.dim(1) % cfg.downsample != 0 || image.dim(2) % cfg.downsample != 0) {
    throw DimensionError("backbone: image size " + to_string(image.shape()) +
                         " not divisible by downsample factor " +
                         std::to_string(cfg.downsample));
  }
  if (params.kernels.size() != 4 || params.biases.size() != 4) {
    throw ContractError("backbone: expected four layers");
  }
  const auto [s1, s2] = strides_for(cfg.downsample);
  Tensor<T> x = relu(conv2d(image, params.kernels[0], params.biases[0], s1, 1));
  x = relu(conv2d(x, params.kernels[1], params.biases[1], s2, 1));
  x = relu(conv2d(x, params.kernels[2], params.biases[2], 1, 1));
  return conv2d(x, params.kernels[3], params.biases[3], 1, 0);
}

template <typename T>
OptimizerState<T> make_optimizer(std::span<const Tensor<T>> params, T learning_rate,
                                 T weight_decay) {
  OptimizerState<T> state;
  state.learning_rate = learning_rate;
  state.weight_decay = weight_decay;
  for (const auto& p : params) state.velocity.emplace_back(p.numel(), T(0));
  return state;
}

template <typename T>
void sgd_step(std::span<Tensor<T>> params, OptimizerState<T>& state) {
  if (state.velocity.size() != params.size()) {
    throw ContractError("sgd_step: optimizer state does not match parameter list");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) {
      throw ContractError("sgd_step: parameter " + std::to_string(i) + " has no gradient");
    }
    if (state.velocity[i].size() != params[i].numel()) {
      throw ContractError("sgd_step: momentum buffer shape mismatch");
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].mutable_data();
    const auto g = params[i].grad();
    auto& v = state.velocity[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      v[j] = state.momentum * v[j] + g[j] + state.weight_decay * p[j];
      p[j] -= state.learning_rate * v[j];
    }
  }
}

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, std::size_t height, std::size_t width) {
  if (x.rank() != 3) throw DimensionError("resize_bilinear: expected [C, H, W]");
  const std::size_t c = x.dim(0);
  const std::size_t ih = x.dim(1);
  const std::size_t iw = x.dim(2);
  const auto src = x.data();
  std::vector<T> out(c * height * width);
  auto coord = [](std::size_t o, std::size_t in, std::size_t out_size, std::size_t& lo,
                  std::size_t& hi, double& frac) {
    double s = (static_cast<double>(o) + 0.5) * static_cast<double>(in) /
                   static_cast<double>(out_size) -
               0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    lo = static_cast<std::size_t>(std::floor(s));
    hi = std::min(lo + 1, in - 1);
    frac = s - static_cast<double>(lo);
  };
  for (std::size_t y = 0; y < height; ++y) {
    std::size_t y0 = 0, y1 = 0;
    double fy = 0.0;
    coord(y, ih, height, y0, y1, fy);
    for (std::size_t xo = 0; xo < width; ++xo) {
      std::size_t x0 = 0, x1 = 0;
      double fx = 0.0;
      coord(xo, iw, width, x0, x1, fx);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T* plane = src.data() + ch * ih * iw;
        const double top = (1.0 - fx) * plane[y0 * iw + x0] + fx * plane[y0 * iw + x1];
        const double bottom = (1.0 - fx) * plane[y1 * iw + x0] + fx * plane[y1 * iw + x1];
        out[(ch * height + y) * width + xo] = static_cast<T>((1.0 - fy) * top + fy * bottom);
      }
    }
  }
  return Tensor<T>(Shape{c, height, width}, std::move(out));
}

#define CENTERSEG_INSTANTIATE_BACKBONE(T)                                                  \
  template struct BackboneParams<T>;                                                       \
  template BackboneParams<T> init_params<T>(std::uint64_t, const BackboneConfig&);         \
  template Tensor<T> forward<T>(const Tensor<T>&, const BackboneParams<T>&);               \
  template OptimizerState<T> make_optimizer<T>(std::span<const Tensor<T>>, T, T);          \
  template void sgd_step<T>(std::span<Tensor<T>>, OptimizerState<T>&);                     \
  template Tensor<T> resize_bilinear<T>(const Tensor<T>&, std::size_t, std::size_t);

CENTERSEG_INSTANTIATE_BACKBONE(float)
CENTERSEG_INSTANTIATE_BACKBONE(double)

}  // namespace centerseg
