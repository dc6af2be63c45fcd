#include "centerseg/classifier.hpp"

#include <string>

#include "centerseg/error.hpp"

namespace centerseg {

template <typename T>
DistanceMap<T> pairwise_distances(const Tensor<T>& features, const PrototypeBank<T>& bank,
                                  double epsilon) {
  if (features.rank() != 3) throw DimensionError("pairwise_distances: features must be [C, H, W]");
  const std::size_t c = features.dim(0);
  if (c != bank.feature_dim()) {
    throw DimensionError("pairwise_distances: feature dim " + std::to_string(c) +
                         " does not match bank dim " + std::to_string(bank.feature_dim()));
  }
  const std::size_t h = features.dim(1);
  const std::size_t w = features.dim(2);
  const std::size_t k = bank.num_classes();
  const std::size_t m = bank.per_class();
  Tensor<T> pixels = transpose(reshape(features, Shape{c, h * w}));
  Tensor<T> protos = detach(reshape(bank.prototypes, Shape{k * m, c}));
  Tensor<T> sq = squared_distances(protos, pixels);
  if (epsilon != 0.0) sq = add(sq, static_cast<T>(epsilon));
  return {reshape(sqrt(sq), Shape{k * m, h, w}), k, m};
}

template <typename T>
Tensor<T> similarity(const Tensor<T>& distances, double alpha) {
  if (!(alpha > 0.0)) throw ConfigError("similarity: alpha must be positive");
  return reciprocal(add(mul(distances, static_cast<T>(alpha)), T(1)));
}

template <typename T>
LabelMap predict(const Tensor<T>& features, const PrototypeBank<T>& bank, double alpha) {
  NoGradGuard<T> no_grad;
  const DistanceMap<T> d = pairwise_distances(features, bank);
  const Tensor<T> s = similarity(d.distances, alpha);
  const std::size_t h = features.dim(1);
  const std::size_t w = features.dim(2);
  const auto winners = argmax(s, 0);
  LabelMap out(h, w);
  for (std::size_t i = 0; i < h * w; ++i) {
    out.values[i] = static_cast<std::uint8_t>(winners[i] / d.per_class);
  }
  return out;
}

template <typename T>
Tensor<T> class_logits(const DistanceMap<T>& distances, double alpha) {
  const Tensor<T>& d = distances.distances;
  const std::size_t h = d.dim(1);
  const std::size_t w = d.dim(2);
  Tensor<T> s = reshape(similarity(d, alpha),
                        Shape{distances.num_classes, distances.per_class, h * w});
  return reshape(max(s, 1), Shape{distances.num_classes, h, w});
}

#define CENTERSEG_INSTANTIATE_CLASSIFIER(T)                                                   \
  template DistanceMap<T> pairwise_distances<T>(const Tensor<T>&, const PrototypeBank<T>&,    \
                                                double);                                      \
  template Tensor<T> similarity<T>(const Tensor<T>&, double);                                 \
  template LabelMap predict<T>(const Tensor<T>&, const PrototypeBank<T>&, double);            \
  template Tensor<T> class_logits<T>(const DistanceMap<T>&, double);

CENTERSEG_INSTANTIATE_CLASSIFIER(float)
CENTERSEG_INSTANTIATE_CLASSIFIER(double)

}  // namespace centerseg
