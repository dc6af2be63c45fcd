#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "centerseg/types.hpp"

namespace centerseg {

// Rows are ground truth, columns are prediction.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t num_classes);

  // cm[gt, pred] += 1 for every pixel whose ground truth is not ignore_index.
  // DimensionError on a shape mismatch, DataError on out-of-range values.
  void accumulate(const LabelMap& pred, const LabelMap& gt,
                  std::uint8_t ignore_index = kIgnoreIndex);
  void merge(const ConfusionMatrix& other);

  std::size_t num_classes() const { return k_; }
  std::uint64_t at(std::size_t gt, std::size_t pred) const { return counts_[gt * k_ + pred]; }
  std::uint64_t total() const;
  std::uint64_t ignored() const { return ignored_; }
  const std::vector<std::uint64_t>& counts() const { return counts_; }

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t k_;
  std::vector<std::uint64_t> counts_;
  std::uint64_t ignored_ = 0;
};

struct ClassMetrics {
  double iou = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  bool present = false;  // occurs in ground truth or prediction
};

struct Metrics {
  std::vector<ClassMetrics> per_class;
  double miou = 0.0;
  double precision = 0.0;  // macro
  double recall = 0.0;     // macro
  double f1 = 0.0;         // macro
  double oa = 0.0;
};

// Macro means run over classes with a nonzero denominator for that quantity.
// ContractError when the matrix is empty.
Metrics compute_metrics(const ConfusionMatrix& cm);

// Header, one row per class, then a summary row with the macro values and OA.
std::string metrics_csv(const Metrics& metrics);

}  // namespace centerseg
