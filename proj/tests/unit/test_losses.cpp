#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "centerseg/error.hpp"
#include "centerseg/gradcheck_suite.hpp"
#include "centerseg/losses.hpp"
#include "helpers.hpp"

using namespace centerseg;
using centerseg::testing::max_grad_error;
using centerseg::testing::random_tensor;

namespace {

using TD = Tensor<double>;

// Random soft mask: per-cell fractions from a Dirichlet-like draw, with an
// ignore fraction that sometimes exceeds one half.
SoftMask<double> random_mask(Rng& rng, std::size_t k, std::size_t h, std::size_t w) {
  SoftMask<double> m;
  std::vector<double> cls(k * h * w);
  m.ignore.resize(h * w);
  for (std::size_t p = 0; p < h * w; ++p) {
    const double ig = rng.uniform() < 0.2 ? rng.uniform(0.0, 1.0) : 0.0;
    m.ignore[p] = ig;
    std::vector<double> e(k);
    double s = 0;
    for (auto& v : e) s += (v = -std::log(1.0 - rng.uniform()));
    for (std::size_t c = 0; c < k; ++c) cls[c * h * w + p] = (1.0 - ig) * e[c] / s;
  }
  m.classes = TD(Shape{k, h, w}, std::move(cls));
  return m;
}

int hard_label(const SoftMask<double>& m, std::size_t p) {
  if (m.ignore[p] > 0.5) return -1;
  const std::size_t n = m.ignore.size();
  int best = 0;
  for (std::size_t c = 1; c < m.num_classes(); ++c)
    if (m.classes.data()[c * n + p] > m.classes.data()[best * n + p]) best = static_cast<int>(c);
  return best;
}

TEST(CellTargets, HandCase) {
  SoftMask<double> m;
  // cells: tie 0.5/0.5, mostly class 1, ignored 0.6, ignored exactly 0.5
  m.classes = TD(Shape{2, 1, 4}, std::vector<double>{0.5, 0.2, 0.3, 0.1, 0.5, 0.8, 0.1, 0.4});
  m.ignore = {0.0, 0.0, 0.6, 0.5};
  const CellTargets t = cell_targets(m);
  EXPECT_EQ(t.label, (std::vector<int>{0, 1, -1, 1}));
  EXPECT_EQ(t.class_count, (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(t.included, 3u);
}

TEST(CrossEntropy, MatchesDirectSum) {
  Rng rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t k = 2 + rng.uniform_index(3), h = 3, w = 4, n = h * w;
    const SoftMask<double> m = random_mask(rng, k, h, w);
    const TD logits = random_tensor(rng, {k, h, w}, -3, 3);
    double total = 0;
    std::size_t included = 0;
    for (std::size_t p = 0; p < n; ++p) {
      if (m.ignore[p] > 0.5) continue;
      ++included;
      double z = 0;
      for (std::size_t c = 0; c < k; ++c) z += std::exp(logits.data()[c * n + p]);
      for (std::size_t c = 0; c < k; ++c)
        total -= m.classes.data()[c * n + p] * (logits.data()[c * n + p] - std::log(z));
    }
    const CrossEntropy<double> ce = cross_entropy(logits, m);
    ASSERT_GT(included, 0u);
    EXPECT_FALSE(ce.all_ignored);
    EXPECT_NEAR(ce.loss.item(), total / static_cast<double>(included), 1e-12);
    EXPECT_LT(max_grad_error([&](const TD& x) { return cross_entropy(x, m).loss; }, logits), 1e-6);
  }
}

TEST(CrossEntropy, AllIgnoredAndErrors) {
  SoftMask<double> m;
  m.classes = TD(Shape{2, 1, 2}, 0.1);
  m.ignore = {0.8, 0.9};
  const CrossEntropy<double> ce = cross_entropy(TD(Shape{2, 1, 2}, 0.3), m);
  EXPECT_TRUE(ce.all_ignored);
  EXPECT_EQ(ce.loss.item(), 0.0);
  m.ignore = {0.0, 0.0};
  EXPECT_THROW(cross_entropy(TD(Shape{2, 1, 2}, std::vector<double>{0, NAN, 0, 0}), m), NumericError);
  EXPECT_THROW(cross_entropy(TD(Shape{3, 1, 2}), m), DimensionError);
}

TEST(Dice, MatchesDirectSum) {
  Rng rng(2);
  const std::size_t k = 3, h = 4, w = 4, n = h * w;
  const SoftMask<double> m = random_mask(rng, k, h, w);
  const TD probs = softmax(random_tensor(rng, {k, h, w}, -2, 2), 0);
  double acc = 0;
  for (std::size_t c = 0; c < k; ++c) {
    double inter = 0, ps = 0, ys = 0;
    for (std::size_t p = 0; p < n; ++p) {
      if (m.ignore[p] > 0.5) continue;
      inter += probs.data()[c * n + p] * m.classes.data()[c * n + p];
      ps += probs.data()[c * n + p];
      ys += m.classes.data()[c * n + p];
    }
    acc += (2 * inter + 1) / (ps + ys + 1);
  }
  EXPECT_NEAR(dice_loss(probs, m).item(), 1.0 - acc / k, 1e-12);
  EXPECT_LT(max_grad_error([&](const TD& x) { return dice_loss(x, m); }, probs), 1e-6);
}

TEST(Dice, PerfectPredictionIsNearZero) {
  SoftMask<double> m;
  m.classes = TD(Shape{2, 1, 3}, std::vector<double>{1, 0, 1, 0, 1, 0});
  m.ignore = {0, 0, 0};
  EXPECT_NEAR(dice_loss(m.classes, m).item(), 0.0, 1e-15);
}

TEST(FeatureLosses, MatchDirectSums) {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t k = 2 + rng.uniform_index(3), m = 1 + rng.uniform_index(3), h = 3, w = 3,
                      n = h * w;
    const SoftMask<double> mask = random_mask(rng, k, h, w);
    DistanceMap<double> d;
    d.num_classes = k;
    d.per_class = m;
    d.distances = random_tensor(rng, {k * m, h, w}, 0.0, 2.0);
    const double margin = 1.5;
    auto nearest = [&](std::size_t c, std::size_t p) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < m; ++i) best = std::min(best, d.distances.data()[(c * m + i) * n + p]);
      return best;
    };
    std::vector<double> fp1(k, 0), fp2(k, 0);
    std::vector<std::size_t> count(k, 0);
    for (std::size_t p = 0; p < n; ++p) {
      const int l = hard_label(mask, p);
      if (l < 0) continue;
      const auto c = static_cast<std::size_t>(l);
      ++count[c];
      fp1[c] += nearest(c, p);
      double other = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < k; ++j)
        if (j != c) other = std::min(other, nearest(j, p));
      fp2[c] += std::max(0.0, margin - other);
    }
    double e1 = 0, e2 = 0;
    for (std::size_t c = 0; c < k; ++c) {
      if (count[c] == 0) continue;
      e1 += fp1[c] / count[c];
      e2 += fp2[c] / count[c];
    }
    EXPECT_NEAR(loss_fp1(d, mask).item(), e1, 1e-12);
    EXPECT_NEAR(loss_fp2(d, mask, margin).item(), e2, 1e-12);
  }
}

TEST(FeatureLosses, MarginMustBePositive) {
  DistanceMap<double> d{TD(Shape{2, 1, 1}, 1.0), 2, 1};
  SoftMask<double> m{TD(Shape{2, 1, 1}, 0.5), {0.0}};
  EXPECT_THROW(loss_fp2(d, m, 0.0), ConfigError);
}

TEST(PrototypeLosses, Pp1MatchesDirectSum) {
  Rng rng(4);
  const std::size_t k = 3, m = 2, c = 4;
  const TD p = random_tensor(rng, {k, m, c});
  double acc = 0;
  for (std::size_t cls = 0; cls < k; ++cls)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        double g = 0;
        for (std::size_t q = 0; q < c; ++q) g += p.at({cls, i, q}) * p.at({cls, j, q});
        acc += std::pow(g - (i == j ? 1.0 : 0.0), 2);
      }
  EXPECT_NEAR(loss_pp1(p).item(), acc / k, 1e-12);
  EXPECT_LT(max_grad_error([](const TD& x) { return loss_pp1(x); }, p), 1e-6);
  EXPECT_THROW(loss_pp1(TD(Shape{1, 3, 2}, 1.0)), ConfigError);
}

TD rows(std::size_t m, std::size_t c, std::vector<double> v) { return TD(Shape{m, c}, std::move(v)); }

TEST(ProjectionMetric, Anchors) {
  // Same span given by different bases.
  const TD a = rows(2, 4, {1, 0, 0, 0, 0, 1, 0, 0});
  const TD a2 = rows(2, 4, {2, 3, 0, 0, -1, 5, 0, 0});
  EXPECT_NEAR(projection_metric(a, a2).item(), 0.0, 1e-12);
  // Orthogonal spans of dimension m give sqrt(m).
  const TD b = rows(2, 4, {0, 0, 1, 0, 0, 0, 0, 1});
  EXPECT_NEAR(projection_metric(a, b).item(), std::sqrt(2.0), 1e-12);
  // Orthogonal lines give 1.
  EXPECT_NEAR(projection_metric(rows(1, 3, {1, 0, 0}), rows(1, 3, {0, 0, 2})).item(), 1.0, 1e-12);
  // Lines at angle theta give sin(theta).
  for (double th : {0.1, 0.7, 1.3}) {
    const double got =
        projection_metric(rows(1, 2, {1, 0}), rows(1, 2, {std::cos(th), std::sin(th)})).item();
    EXPECT_NEAR(got, std::sin(th), 1e-12);
  }
  // One shared direction out of two.
  const TD c = rows(2, 4, {1, 0, 0, 0, 0, 0, 1, 0});
  EXPECT_NEAR(projection_metric(a, c).item(), 1.0, 1e-12);
}

TEST(ProjectionMetric, RankDeficientThrows) {
  const TD dependent = rows(2, 3, {1, 2, 3, 2, 4, 6});
  EXPECT_THROW(orthonormalize_rows(dependent, 5), NumericError);
  try {
    orthonormalize_rows(dependent, 5);
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find('5'), std::string::npos);
  }
  EXPECT_THROW(orthonormalize_rows(rows(1, 2, {0, 0})), NumericError);
}

TEST(ProjectionMetric, OrthonormalizedRowsAreOrthonormalAndSpanTheInput) {
  Rng rng(5);
  const TD r = random_tensor(rng, {3, 5});
  const TD q = orthonormalize_rows(r);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double g = 0;
      for (std::size_t c = 0; c < 5; ++c) g += q.at({i, c}) * q.at({j, c});
      EXPECT_NEAR(g, i == j ? 1.0 : 0.0, 1e-12);
    }
  EXPECT_NEAR(projection_metric(r, q).item(), 0.0, 1e-12);
}

TEST(PrototypeLosses, Pp2IsNegatedPairwiseSum) {
  Rng rng(6);
  const TD p = random_tensor(rng, {3, 2, 5});
  double acc = 0;
  for (std::size_t a = 0; a < 3; ++a)
    for (std::size_t b = a + 1; b < 3; ++b)
      acc += projection_metric(reshape(slice(p, 0, a, 1), Shape{2, 5}),
                               reshape(slice(p, 0, b, 1), Shape{2, 5}))
                 .item();
  EXPECT_NEAR(loss_pp2(p).item(), -acc, 1e-12);
  EXPECT_EQ(loss_pp2(random_tensor(rng, {1, 2, 5})).item(), 0.0);
  EXPECT_LT(max_grad_error([](const TD& x) { return loss_pp2(x); }, p), 1e-6);
}

TEST(TotalLoss, WeightedComposition) {
  LossTerms<double> t;
  t.ce = TD::scalar(1.5);
  t.dice = TD::scalar(0.25);
  t.pp1 = TD::scalar(2.0);
  t.pp2 = TD::scalar(-0.5);
  t.fp1 = TD::scalar(3.0);
  LossWeights w;
  w.pp = 0.1;
  w.fp = 0.2;
  w.dice = 2.0;
  const auto [loss, report] = total_loss(t, w);
  const double expected = 1.5 + 0.1 * (2.0 - 0.5) + 0.2 * 3.0 + 2.0 * 0.25;
  EXPECT_NEAR(loss.item(), expected, 1e-15);
  EXPECT_NEAR(report.total, expected, 1e-15);
  EXPECT_EQ(report.fp2, 0.0);
  EXPECT_EQ(report.pp2, -0.5);
  w.dice = -1.0;
  EXPECT_THROW(w.validate(), ConfigError);
}

TEST(GradCheckSuite, AllTermsPassAndInjectionFails) {
  const GradCheckReport ok = run_grad_check(0, 1e-4);
  EXPECT_TRUE(ok.passed()) << ok.to_text();
  ASSERT_EQ(ok.terms.size(), 7u);
  const GradCheckReport bad = run_grad_check(0, 1e-4, 1.01);
  EXPECT_FALSE(bad.passed());
}

}  // namespace
