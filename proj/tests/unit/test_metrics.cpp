#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "centerseg/error.hpp"
#include "centerseg/metrics.hpp"
#include "centerseg/random.hpp"

using namespace centerseg;

namespace {

LabelMap from_values(std::size_t h, std::size_t w, std::vector<std::uint8_t> v) {
  LabelMap l(h, w);
  l.values = std::move(v);
  return l;
}

// gt/pred pairs whose confusion matrix is [[2, 2], [0, 4]].
ConfusionMatrix fixture() {
  const LabelMap gt = from_values(1, 9, {0, 0, 0, 0, 1, 1, 1, 1, kIgnoreIndex});
  const LabelMap pred = from_values(1, 9, {0, 0, 1, 1, 1, 1, 1, 1, 0});
  ConfusionMatrix cm(2);
  cm.accumulate(pred, gt);
  return cm;
}

TEST(Confusion, FixtureCounts) {
  const ConfusionMatrix cm = fixture();
  EXPECT_EQ(cm.counts(), (std::vector<std::uint64_t>{2, 2, 0, 4}));
  EXPECT_EQ(cm.total(), 8u);
  EXPECT_EQ(cm.ignored(), 1u);
}

TEST(Confusion, FixtureMetrics) {
  const Metrics m = compute_metrics(fixture());
  EXPECT_NEAR(m.per_class[0].iou, 0.5, 1e-15);
  EXPECT_NEAR(m.per_class[1].iou, 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(m.per_class[0].precision, 1.0, 1e-15);
  EXPECT_NEAR(m.per_class[1].precision, 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(m.per_class[0].recall, 0.5, 1e-15);
  EXPECT_NEAR(m.per_class[1].recall, 1.0, 1e-15);
  EXPECT_NEAR(m.per_class[0].f1, 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(m.per_class[1].f1, 0.8, 1e-15);
  EXPECT_NEAR(m.miou, 7.0 / 12.0, 1e-15);
  EXPECT_NEAR(m.precision, 5.0 / 6.0, 1e-15);
  EXPECT_NEAR(m.recall, 0.75, 1e-15);
  EXPECT_NEAR(m.f1, 11.0 / 15.0, 1e-15);
  EXPECT_NEAR(m.oa, 0.75, 1e-15);
}

struct SetOracle {
  std::vector<double> iou, precision, recall, f1;
  double miou, mp, mr, mf1, oa;
};

// Per-class metrics from pixel-set sizes, without a confusion matrix.
SetOracle set_oracle(const LabelMap& pred, const LabelMap& gt, std::size_t k) {
  SetOracle o;
  std::size_t correct = 0, valid = 0;
  double si = 0, sp = 0, sr = 0, sf = 0;
  std::size_t ni = 0, np = 0, nr = 0, nf = 0;
  for (std::size_t c = 0; c < k; ++c) {
    std::size_t inter = 0, in_pred = 0, in_gt = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (gt.values[i] == kIgnoreIndex) continue;
      const bool p = pred.values[i] == c, g = gt.values[i] == c;
      inter += p && g;
      in_pred += p;
      in_gt += g;
    }
    const std::size_t uni = in_pred + in_gt - inter;
    auto ratio = [](std::size_t a, std::size_t b) { return b ? double(a) / double(b) : 0.0; };
    o.iou.push_back(ratio(inter, uni));
    o.precision.push_back(ratio(inter, in_pred));
    o.recall.push_back(ratio(inter, in_gt));
    o.f1.push_back(ratio(2 * inter, in_pred + in_gt));
    if (uni) si += o.iou.back(), ++ni;
    if (in_pred) sp += o.precision.back(), ++np;
    if (in_gt) sr += o.recall.back(), ++nr;
    if (in_pred + in_gt) sf += o.f1.back(), ++nf;
  }
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt.values[i] == kIgnoreIndex) continue;
    ++valid;
    correct += pred.values[i] == gt.values[i];
  }
  o.miou = ni ? si / ni : 0;
  o.mp = np ? sp / np : 0;
  o.mr = nr ? sr / nr : 0;
  o.mf1 = nf ? sf / nf : 0;
  o.oa = double(correct) / double(valid);
  return o;
}

TEST(Metrics, MatchSetOracleOnRandomMaps) {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t k = 2 + rng.uniform_index(6);
    const std::size_t h = 1 + rng.uniform_index(20), w = 1 + rng.uniform_index(20);
    LabelMap gt(h, w), pred(h, w);
    // Some classes never occur so absent-class handling is exercised.
    const std::size_t used = 1 + rng.uniform_index(k);
    for (std::size_t i = 0; i < h * w; ++i) {
      gt.values[i] = rng.uniform() < 0.1 ? kIgnoreIndex : std::uint8_t(rng.uniform_index(used));
      pred.values[i] = std::uint8_t(rng.uniform() < 0.6 && gt.values[i] != kIgnoreIndex
                                        ? gt.values[i]
                                        : rng.uniform_index(k));
    }
    gt.values[0] = 0;  // at least one valid pixel
    ConfusionMatrix cm(k);
    cm.accumulate(pred, gt);
    const Metrics m = compute_metrics(cm);
    const SetOracle o = set_oracle(pred, gt, k);
    for (std::size_t c = 0; c < k; ++c) {
      EXPECT_NEAR(m.per_class[c].iou, o.iou[c], 1e-12);
      EXPECT_NEAR(m.per_class[c].precision, o.precision[c], 1e-12);
      EXPECT_NEAR(m.per_class[c].recall, o.recall[c], 1e-12);
      EXPECT_NEAR(m.per_class[c].f1, o.f1[c], 1e-12);
      EXPECT_LE(m.per_class[c].iou, m.per_class[c].f1 + 1e-15);
    }
    EXPECT_NEAR(m.miou, o.miou, 1e-12);
    EXPECT_NEAR(m.precision, o.mp, 1e-12);
    EXPECT_NEAR(m.recall, o.mr, 1e-12);
    EXPECT_NEAR(m.f1, o.mf1, 1e-12);
    EXPECT_NEAR(m.oa, o.oa, 1e-12);
  }
}

TEST(Metrics, InvariantUnderPixelPermutationAndMergeOrder) {
  Rng rng(2);
  const std::size_t k = 4, n = 300;
  LabelMap gt(1, n), pred(1, n);
  for (std::size_t i = 0; i < n; ++i) {
    gt.values[i] = rng.uniform() < 0.1 ? kIgnoreIndex : std::uint8_t(rng.uniform_index(k));
    pred.values[i] = std::uint8_t(rng.uniform_index(k));
  }
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = n - 1; i > 0; --i) std::swap(perm[i], perm[rng.uniform_index(i + 1)]);
  LabelMap gt2(1, n), pred2(1, n);
  for (std::size_t i = 0; i < n; ++i) {
    gt2.values[i] = gt.values[perm[i]];
    pred2.values[i] = pred.values[perm[i]];
  }
  ConfusionMatrix a(k), b(k);
  a.accumulate(pred, gt);
  b.accumulate(pred2, gt2);
  EXPECT_EQ(a, b);

  // Split into halves, merge in both orders.
  LabelMap g1(1, n / 2), p1(1, n / 2), g2(1, n / 2), p2(1, n / 2);
  for (std::size_t i = 0; i < n / 2; ++i) {
    g1.values[i] = gt.values[i], p1.values[i] = pred.values[i];
    g2.values[i] = gt.values[n / 2 + i], p2.values[i] = pred.values[n / 2 + i];
  }
  ConfusionMatrix x(k), y(k), part(k);
  x.accumulate(p1, g1);
  part.accumulate(p2, g2);
  x.merge(part);
  y.accumulate(p2, g2);
  part = ConfusionMatrix(k);
  part.accumulate(p1, g1);
  y.merge(part);
  EXPECT_EQ(x, a);
  EXPECT_EQ(y, a);
}

TEST(Metrics, Errors) {
  ConfusionMatrix cm(2);
  EXPECT_THROW(compute_metrics(cm), ContractError);
  EXPECT_THROW(cm.accumulate(LabelMap(2, 2), LabelMap(2, 3)), DimensionError);
  EXPECT_THROW(cm.accumulate(LabelMap(2, 2, 2), LabelMap(2, 2)), DataError);
  EXPECT_THROW(cm.accumulate(LabelMap(2, 2), LabelMap(2, 2, 5)), DataError);
  ConfusionMatrix other(3);
  EXPECT_THROW(cm.merge(other), DimensionError);
}

TEST(Metrics, CsvLayout) {
  const std::string csv = metrics_csv(compute_metrics(fixture()));
  std::vector<std::string> lines;
  std::size_t start = 0;
  for (std::size_t pos; (pos = csv.find('\n', start)) != std::string::npos; start = pos + 1)
    lines.push_back(csv.substr(start, pos - start));
  ASSERT_EQ(lines.size(), 4u);
  EXPECT_EQ(lines[0], "class,iou,precision,recall,f1,oa");
  EXPECT_EQ(lines[1].rfind("0,0.5,1,0.5,", 0), 0u);
  EXPECT_EQ(lines[1].back(), ',');
  EXPECT_EQ(lines[3].rfind("summary,", 0), 0u);
  EXPECT_NE(lines[3].find(",0.75"), std::string::npos);
}

}  // namespace
