#pragma once

// Training objectives. Every function returns a scalar tensor on the tape.

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "centerseg/classifier.hpp"
#include "centerseg/prototype.hpp"
#include "centerseg/tensor.hpp"

namespace centerseg {

struct LossWeights {
  double pp = 0.01;
  double fp = 0.01;
  double dice = 1.0;
  double margin = 1.0;  // hinge margin of the feats-to-other-prototype term

  void validate() const;
};

struct LossReport {
  double ce = 0.0;
  double dice = 0.0;
  double pp1 = 0.0;
  double pp2 = 0.0;
  double fp1 = 0.0;
  double fp2 = 0.0;
  double total = 0.0;
};

// Per-cell view of a SoftMask used by the losses. A cell takes part when its
// ignore fraction is at most one half; its hard label is the first class of
// largest fraction.
struct CellTargets {
  std::vector<int> label;                // -1 for excluded cells
  std::vector<std::size_t> class_count;  // included cells per hard label
  std::size_t included = 0;
};

template <typename T>
CellTargets cell_targets(const SoftMask<T>& target);

template <typename T>
struct CrossEntropy {
  Tensor<T> loss;
  bool all_ignored = false;  // loss is then a constant zero
};

// Mean over included cells of -sum_k y_k log softmax(logits)_k.
template <typename T>
CrossEntropy<T> cross_entropy(const Tensor<T>& logits, const SoftMask<T>& target);

// 1 - mean_k (2 sum p y + 1) / (sum p + sum y + 1) over included cells.
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& probs, const SoftMask<T>& target);

// (1/K) sum_k |P_k P_k^T - I_m|_F^2 over prototypes [K, m, C]. ConfigError if C < m.
template <typename T>
Tensor<T> loss_pp1(const Tensor<T>& prototypes);

// Rows of `rows` [m, C] orthonormalized by modified Gram-Schmidt. Throws
// NumericError naming `cls` when the rows are (numerically) dependent.
template <typename T>
Tensor<T> orthonormalize_rows(const Tensor<T>& rows, std::size_t cls = 0);

// Projection metric between the row spans of a and b ([m, C] each):
// (1 / sqrt 2) |Qa^T Qa - Qb^T Qb|_F.
template <typename T>
Tensor<T> projection_metric(const Tensor<T>& a, const Tensor<T>& b, std::size_t cls_a = 0,
                            std::size_t cls_b = 1);

// -sum_{k1 < k2} phi(P_k1, P_k2); descent pushes class subspaces apart.
template <typename T>
Tensor<T> loss_pp2(const Tensor<T>& prototypes);

// sum_k mean over cells of class k of the distance to the nearest own-class
// prototype.
template <typename T>
Tensor<T> loss_fp1(const DistanceMap<T>& distances, const SoftMask<T>& target);

// sum_k mean over cells of class k of max(0, margin - distance to the nearest
// prototype of any other class).
template <typename T>
Tensor<T> loss_fp2(const DistanceMap<T>& distances, const SoftMask<T>& target, double margin);

// Loss terms of one step; undefined tensors count as zero.
template <typename T>
struct LossTerms {
  Tensor<T> ce;
  Tensor<T> dice;
  Tensor<T> pp1;
  Tensor<T> pp2;
  Tensor<T> fp1;
  Tensor<T> fp2;
};

// ce + w.pp (pp1 + pp2) + w.fp (fp1 + fp2) + w.dice dice
template <typename T>
std::pair<Tensor<T>, LossReport> total_loss(const LossTerms<T>& terms, const LossWeights& weights);

}  // namespace centerseg
