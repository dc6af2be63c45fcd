#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "centerseg/tensor.hpp"

namespace centerseg {

struct BackboneConfig {
  std::size_t in_channels = 3;
  std::size_t hidden_channels = 16;
  std::size_t feature_dim = 32;  // C of the embedding space
  std::size_t downsample = 4;    // d; one of 1, 2, 4

  void validate() const;
};

// Four convolutions: 3x3 (stride s1) -> relu -> 3x3 (stride s2) -> relu ->
// 3x3 -> relu -> 1x1 to feature_dim, where s1 * s2 == downsample.
template <typename T>
struct BackboneParams {
  BackboneConfig config;
  std::vector<Tensor<T>> kernels;
  std::vector<Tensor<T>> biases;

  // Handles in optimizer order: kernel0, bias0, kernel1, bias1, ...
  std::vector<Tensor<T>> parameters() const;
  void zero_grad();
  void set_requires_grad(bool value);
};

// Xavier-uniform kernels (a = sqrt(6 / (fan_in + fan_out))), zero biases.
template <typename T>
BackboneParams<T> init_params(std::uint64_t seed, const BackboneConfig& config);

// image [in_channels, H, W] -> features [feature_dim, H / d, W / d].
template <typename T>
Tensor<T> forward(const Tensor<T>& image, const BackboneParams<T>& params);

template <typename T>
struct OptimizerState {
  T learning_rate = T(0.01);
  T weight_decay = T(1e-4);
  T momentum = T(0.9);
  std::vector<std::vector<T>> velocity;  // one buffer per parameter
};

template <typename T>
OptimizerState<T> make_optimizer(std::span<const Tensor<T>> params, T learning_rate,
                                 T weight_decay);

// Classic momentum SGD, in place:
//   v <- momentum * v + g + weight_decay * p;  p <- p - learning_rate * v
template <typename T>
void sgd_step(std::span<Tensor<T>> params, OptimizerState<T>& state);

// Bilinear resize of a [C, H, W] map (half-pixel centers), outside the tape.
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, std::size_t height, std::size_t width);

}  // namespace centerseg
