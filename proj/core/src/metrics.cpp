#include "centerseg/metrics.hpp"

#include <cstdio>

#include "centerseg/error.hpp"

namespace centerseg {

ConfusionMatrix::ConfusionMatrix(std::size_t num_classes)
    : k_(num_classes), counts_(num_classes * num_classes, 0) {
  if (num_classes == 0) throw ConfigError("confusion matrix needs at least one class");
}

void ConfusionMatrix::accumulate(const LabelMap& pred, const LabelMap& gt,
                                 std::uint8_t ignore_index) {
  if (pred.height != gt.height || pred.width != gt.width) {
    throw DimensionError("accumulate: prediction " + std::to_string(pred.height) + "x" +
                         std::to_string(pred.width) + " vs ground truth " +
                         std::to_string(gt.height) + "x" + std::to_string(gt.width));
  }
  for (std::size_t p = 0; p < gt.size(); ++p) {
    const std::uint8_t g = gt.values[p];
    if (g == ignore_index) {
      ++ignored_;
      continue;
    }
    const std::uint8_t q = pred.values[p];
    if (g >= k_ || q >= k_) throw DataError("accumulate: label out of range");
    ++counts_[g * k_ + q];
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.k_ != k_) throw DimensionError("merge: class count mismatch");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  ignored_ += other.ignored_;
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (auto c : counts_) t += c;
  return t;
}

Metrics compute_metrics(const ConfusionMatrix& cm) {
  const std::uint64_t total = cm.total();
  if (total == 0) throw ContractError("compute_metrics: empty confusion matrix");
  const std::size_t k = cm.num_classes();
  Metrics out;
  out.per_class.resize(k);
  double iou_sum = 0.0, p_sum = 0.0, r_sum = 0.0, f1_sum = 0.0;
  std::size_t iou_n = 0, p_n = 0, r_n = 0, f1_n = 0;
  std::uint64_t trace = 0;
  for (std::size_t c = 0; c < k; ++c) {
    const std::uint64_t tp = cm.at(c, c);
    std::uint64_t row = 0, col = 0;
    for (std::size_t j = 0; j < k; ++j) {
      row += cm.at(c, j);
      col += cm.at(j, c);
    }
    const std::uint64_t fn = row - tp;
    const std::uint64_t fp = col - tp;
    trace += tp;
    ClassMetrics& m = out.per_class[c];
    m.present = row + col > 0;
    if (tp + fp + fn > 0) {
      m.iou = static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
      m.f1 = 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
      iou_sum += m.iou;
      f1_sum += m.f1;
      ++iou_n;
      ++f1_n;
    }
    if (tp + fp > 0) {
      m.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
      p_sum += m.precision;
      ++p_n;
    }
    if (tp + fn > 0) {
      m.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
      r_sum += m.recall;
      ++r_n;
    }
  }
  out.miou = iou_n ? iou_sum / static_cast<double>(iou_n) : 0.0;
  out.f1 = f1_n ? f1_sum / static_cast<double>(f1_n) : 0.0;
  out.precision = p_n ? p_sum / static_cast<double>(p_n) : 0.0;
  out.recall = r_n ? r_sum / static_cast<double>(r_n) : 0.0;
  out.oa = static_cast<double>(trace) / static_cast<double>(total);
  return out;
}

std::string metrics_csv(const Metrics& metrics) {
  std::string out = "class,iou,precision,recall,f1,oa\n";
  char buf[256];
  for (std::size_t c = 0; c < metrics.per_class.size(); ++c) {
    const ClassMetrics& m = metrics.per_class[c];
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,\n", c, m.iou, m.precision,
                  m.recall, m.f1);
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "summary,%.17g,%.17g,%.17g,%.17g,%.17g\n", metrics.miou,
                metrics.precision, metrics.recall, metrics.f1, metrics.oa);
  out += buf;
  return out;
}

}  // namespace centerseg
