#pragma once

#include <cstddef>

#include "centerseg/prototype.hpp"
#include "centerseg/tensor.hpp"
#include "centerseg/types.hpp"

namespace centerseg {

inline constexpr double kDistanceEpsilon = 1e-12;

template <typename T>
struct DistanceMap {
  Tensor<T> distances;  // [K * m, H, W], row (k, i) at k * m + i
  std::size_t num_classes = 0;
  std::size_t per_class = 0;
};

// D[(k, i), y, x] = sqrt(|F[:, y, x] - P[k, i]|^2 + epsilon). Differentiable in
// the features; the bank is a constant.
template <typename T>
DistanceMap<T> pairwise_distances(const Tensor<T>& features, const PrototypeBank<T>& bank,
                                  double epsilon = kDistanceEpsilon);

// f(t) = 1 / (1 + alpha * t). Throws ConfigError unless alpha > 0.
template <typename T>
Tensor<T> similarity(const Tensor<T>& distances, double alpha);

// Winner-take-all: the class owning the most similar of all K * m prototypes.
template <typename T>
LabelMap predict(const Tensor<T>& features, const PrototypeBank<T>& bank, double alpha);

// [K, H, W]: best similarity among each class's prototypes.
template <typename T>
Tensor<T> class_logits(const DistanceMap<T>& distances, double alpha);

}  // namespace centerseg
