#include "centerseg/losses.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "centerseg/error.hpp"

namespace centerseg {

void LossWeights::validate() const {
  for (double v : {pp, fp, dice, margin}) {
    if (!std::isfinite(v) || v < 0.0) throw ConfigError("loss weights must be finite and >= 0");
  }
  if (!(margin > 0.0)) throw ConfigError("loss margin must be positive");
}

template <typename T>
CellTargets cell_targets(const SoftMask<T>& target) {
  const std::size_t k = target.num_classes();
  const std::size_t n = target.height() * target.width();
  const auto y = target.classes.data();
  CellTargets out;
  out.label.assign(n, -1);
  out.class_count.assign(k, 0);
  for (std::size_t p = 0; p < n; ++p) {
    if (target.ignore[p] > T(0.5)) continue;
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c) {
      if (y[c * n + p] > y[best * n + p]) best = c;
    }
    out.label[p] = static_cast<int>(best);
    ++out.class_count[best];
    ++out.included;
  }
  return out;
}

namespace {

template <typename T>
void check_target(const Tensor<T>& x, const SoftMask<T>& target, const char* op) {
  if (x.shape() != target.classes.shape()) {
    throw DimensionError(std::string(op) + ": input " + to_string(x.shape()) +
                         " does not match target " + to_string(target.classes.shape()));
  }
}

template <typename T>
Tensor<T> include_mask(const SoftMask<T>& target, const CellTargets& cells) {
  std::vector<T> inc(cells.label.size());
  for (std::size_t p = 0; p < inc.size(); ++p) inc[p] = cells.label[p] >= 0 ? T(1) : T(0);
  return Tensor<T>(Shape{target.height(), target.width()}, std::move(inc));
}

}  // namespace

template <typename T>
CrossEntropy<T> cross_entropy(const Tensor<T>& logits, const SoftMask<T>& target) {
  check_target(logits, target, "cross_entropy");
  for (T v : logits.data()) {
    if (!std::isfinite(v)) throw NumericError("cross_entropy: non-finite logits");
  }
  const CellTargets cells = cell_targets(target);
  if (cells.included == 0) return {Tensor<T>::scalar(T(0)), true};
  const std::size_t k = target.num_classes();
  const std::size_t n = cells.label.size();
  const auto y = target.classes.data();
  const T scale = T(1) / static_cast<T>(cells.included);
  std::vector<T> weights(k * n, T(0));
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t p = 0; p < n; ++p) {
      if (cells.label[p] >= 0) weights[c * n + p] = y[c * n + p] * scale;
    }
  }
  Tensor<T> w(logits.shape(), std::move(weights));
  return {neg(sum(mul(w, log_softmax(logits, 0)))), false};
}

template <typename T>
Tensor<T> dice_loss(const Tensor<T>& probs, const SoftMask<T>& target) {
  check_target(probs, target, "dice_loss");
  const CellTargets cells = cell_targets(target);
  const std::size_t k = target.num_classes();
  const std::size_t n = cells.label.size();
  const Tensor<T> inc = include_mask(target, cells);
  const Tensor<T> y = mul(target.classes, inc);
  std::vector<T> ysum(k, T(0));
  const auto yd = y.data();
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t p = 0; p < n; ++p) ysum[c] += yd[c * n + p];
  }
  Tensor<T> masked = reshape(mul(probs, inc), Shape{k, n});
  Tensor<T> inter = sum(mul(masked, reshape(y, Shape{k, n})), 1);
  Tensor<T> psum = sum(masked, 1);
  Tensor<T> num = add(mul(inter, T(2)), T(1));
  Tensor<T> den = add(add(psum, Tensor<T>(Shape{k}, std::move(ysum))), T(1));
  return rsub(mean(div(num, den)), T(1));
}

template <typename T>
Tensor<T> loss_pp1(const Tensor<T>& prototypes) {
  if (prototypes.rank() != 3) throw DimensionError("loss_pp1: prototypes must be [K, m, C]");
  const std::size_t k = prototypes.dim(0);
  const std::size_t m = prototypes.dim(1);
  if (prototypes.dim(2) < m) {
    throw ConfigError("loss_pp1: feature dim " + std::to_string(prototypes.dim(2)) +
                      " is smaller than prototypes per class " + std::to_string(m));
  }
  Tensor<T> eye(Shape{m, m});
  for (std::size_t i = 0; i < m; ++i) eye.mutable_data()[i * m + i] = T(1);
  Tensor<T> gram = matmul(prototypes, transpose(prototypes));
  return mul(sum(square(sub(gram, eye))), T(1) / static_cast<T>(k));
}

template <typename T>
Tensor<T> orthonormalize_rows(const Tensor<T>& rows, std::size_t cls) {
  if (rows.rank() != 2) throw DimensionError("orthonormalize_rows: expected [m, C]");
  const std::size_t m = rows.dim(0);
  if (rows.dim(1) < m) {
    throw NumericError("orthonormalize_rows: class " + std::to_string(cls) + " has " +
                       std::to_string(m) + " prototypes in dimension " +
                       std::to_string(rows.dim(1)));
  }
  const T tolerance = T(0.1) * std::sqrt(std::numeric_limits<T>::epsilon());
  std::vector<Tensor<T>> basis;
  for (std::size_t i = 0; i < m; ++i) {
    Tensor<T> v = slice(rows, 0, i, 1);
    T original = T(0);
    for (T x : v.data()) original += x * x;
    original = std::sqrt(original);
    for (const auto& q : basis) v = sub(v, mul(sum(mul(q, v)), q));
    Tensor<T> norm = frobenius_norm(v);
    if (!(original > T(0)) || !(norm.item() > tolerance * original)) {
      throw NumericError("orthonormalize_rows: prototypes of class " + std::to_string(cls) +
                         " are rank-deficient");
    }
    basis.push_back(div(v, norm));
  }
  return concat(basis, 0);
}

namespace {

template <typename T>
Tensor<T> projector(const Tensor<T>& rows, std::size_t cls) {
  Tensor<T> q = orthonormalize_rows(rows, cls);
  return matmul(transpose(q), q);
}

template <typename T>
Tensor<T> projector_distance(const Tensor<T>& pa, const Tensor<T>& pb) {
  return mul(frobenius_norm(sub(pa, pb)), static_cast<T>(1.0 / std::sqrt(2.0)));
}

}  // namespace

template <typename T>
Tensor<T> projection_metric(const Tensor<T>& a, const Tensor<T>& b, std::size_t cls_a,
                            std::size_t cls_b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw DimensionError("projection_metric: blocks must be [m, C] with equal C");
  }
  return projector_distance(projector(a, cls_a), projector(b, cls_b));
}

template <typename T>
Tensor<T> loss_pp2(const Tensor<T>& prototypes) {
  if (prototypes.rank() != 3) throw DimensionError("loss_pp2: prototypes must be [K, m, C]");
  const std::size_t k = prototypes.dim(0);
  const std::size_t m = prototypes.dim(1);
  const std::size_t c = prototypes.dim(2);
  if (k < 2) return Tensor<T>::scalar(T(0));
  std::vector<Tensor<T>> projectors;
  for (std::size_t cls = 0; cls < k; ++cls) {
    projectors.push_back(projector(reshape(slice(prototypes, 0, cls, 1), Shape{m, c}), cls));
  }
  Tensor<T> total;
  for (std::size_t a = 0; a + 1 < k; ++a) {
    for (std::size_t b = a + 1; b < k; ++b) {
      Tensor<T> phi = projector_distance(projectors[a], projectors[b]);
      total = total.defined() ? add(total, phi) : phi;
    }
  }
  return neg(total);
}

namespace {

template <typename T>
Tensor<T> nearest_per_class(const DistanceMap<T>& distances, const SoftMask<T>& target,
                            const char* op) {
  const Tensor<T>& d = distances.distances;
  if (d.rank() != 3 || d.dim(1) != target.height() || d.dim(2) != target.width() ||
      distances.num_classes != target.num_classes()) {
    throw DimensionError(std::string(op) + ": distance map " + to_string(d.shape()) +
                         " does not match target " + to_string(target.classes.shape()));
  }
  const std::size_t n = d.dim(1) * d.dim(2);
  return min(reshape(d, Shape{distances.num_classes, distances.per_class, n}), 1);
}

}  // namespace

template <typename T>
Tensor<T> loss_fp1(const DistanceMap<T>& distances, const SoftMask<T>& target) {
  Tensor<T> nearest = nearest_per_class(distances, target, "loss_fp1");
  const CellTargets cells = cell_targets(target);
  const std::size_t k = distances.num_classes;
  const std::size_t n = cells.label.size();
  std::vector<T> weights(k * n, T(0));
  for (std::size_t p = 0; p < n; ++p) {
    const int label = cells.label[p];
    if (label < 0) continue;
    const auto cls = static_cast<std::size_t>(label);
    weights[cls * n + p] = T(1) / static_cast<T>(cells.class_count[cls]);
  }
  return sum(mul(nearest, Tensor<T>(Shape{k, n}, std::move(weights))));
}

template <typename T>
Tensor<T> loss_fp2(const DistanceMap<T>& distances, const SoftMask<T>& target, double margin) {
  if (!(margin > 0.0)) throw ConfigError("loss_fp2: margin must be positive");
  Tensor<T> nearest = nearest_per_class(distances, target, "loss_fp2");
  const CellTargets cells = cell_targets(target);
  const std::size_t k = distances.num_classes;
  const std::size_t n = cells.label.size();
  std::vector<T> own(k * n, T(0));
  std::vector<T> weights(n, T(0));
  for (std::size_t p = 0; p < n; ++p) {
    const int label = cells.label[p];
    if (label < 0) continue;
    const auto cls = static_cast<std::size_t>(label);
    own[cls * n + p] = std::numeric_limits<T>::infinity();
    weights[p] = T(1) / static_cast<T>(cells.class_count[cls]);
  }
  Tensor<T> other = min(add(nearest, Tensor<T>(Shape{k, n}, std::move(own))), 0);
  Tensor<T> hinge = relu(rsub(other, static_cast<T>(margin)));
  return sum(mul(hinge, Tensor<T>(Shape{n}, std::move(weights))));
}

template <typename T>
std::pair<Tensor<T>, LossReport> total_loss(const LossTerms<T>& terms,
                                            const LossWeights& weights) {
  LossReport report;
  auto value = [](const Tensor<T>& t) {
    return t.defined() ? static_cast<double>(t.item()) : 0.0;
  };
  report.ce = value(terms.ce);
  report.dice = value(terms.dice);
  report.pp1 = value(terms.pp1);
  report.pp2 = value(terms.pp2);
  report.fp1 = value(terms.fp1);
  report.fp2 = value(terms.fp2);

  Tensor<T> total = terms.ce.defined() ? terms.ce : Tensor<T>::scalar(T(0));
  auto accumulate = [&total](const Tensor<T>& term, double weight) {
    if (!term.defined() || weight == 0.0) return;
    total = add(total, mul(term, static_cast<T>(weight)));
  };
  accumulate(terms.pp1, weights.pp);
  accumulate(terms.pp2, weights.pp);
  accumulate(terms.fp1, weights.fp);
  accumulate(terms.fp2, weights.fp);
  accumulate(terms.dice, weights.dice);
  report.total = static_cast<double>(total.item());
  return {total, report};
}

#define CENTERSEG_INSTANTIATE_LOSSES(T)                                                        \
  template CellTargets cell_targets<T>(const SoftMask<T>&);                                    \
  template CrossEntropy<T> cross_entropy<T>(const Tensor<T>&, const SoftMask<T>&);             \
  template Tensor<T> dice_loss<T>(const Tensor<T>&, const SoftMask<T>&);                       \
  template Tensor<T> loss_pp1<T>(const Tensor<T>&);                                            \
  template Tensor<T> orthonormalize_rows<T>(const Tensor<T>&, std::size_t);                    \
  template Tensor<T> projection_metric<T>(const Tensor<T>&, const Tensor<T>&, std::size_t,     \
                                          std::size_t);                                        \
  template Tensor<T> loss_pp2<T>(const Tensor<T>&);                                            \
  template Tensor<T> loss_fp1<T>(const DistanceMap<T>&, const SoftMask<T>&);                   \
  template Tensor<T> loss_fp2<T>(const DistanceMap<T>&, const SoftMask<T>&, double);           \
  template std::pair<Tensor<T>, LossReport> total_loss<T>(const LossTerms<T>&,                 \
                                                          const LossWeights&);

CENTERSEG_INSTANTIATE_LOSSES(float)
CENTERSEG_INSTANTIATE_LOSSES(double)

}  // namespace centerseg
