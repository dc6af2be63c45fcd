#include <gtest/gtest.h>

#include <cmath>

#include "centerseg/error.hpp"
#include "centerseg/prototype.hpp"
#include "helpers.hpp"

using namespace centerseg;
using centerseg::testing::random_tensor;

namespace {

using TD = Tensor<double>;

LabelMap random_labels(Rng& rng, std::size_t h, std::size_t w, std::size_t k,
                       double ignore_rate = 0.1) {
  LabelMap l(h, w);
  for (auto& v : l.values) {
    v = rng.uniform() < ignore_rate ? kIgnoreIndex : static_cast<std::uint8_t>(rng.uniform_index(k));
  }
  return l;
}

TEST(DownsampleLabels, HandCountedFractions) {
  LabelMap l(2, 4);
  // block (0,0): 0 0 / 1 255   block (0,1): 1 1 / 1 1
  l.values = {0, 0, 1, 1, 1, kIgnoreIndex, 1, 1};
  const SoftMask<double> m = downsample_labels<double>(l, 2, 2);
  EXPECT_EQ(m.classes.shape(), (Shape{2, 1, 2}));
  EXPECT_DOUBLE_EQ(m.classes.at({0, 0, 0}), 0.5);
  EXPECT_DOUBLE_EQ(m.classes.at({1, 0, 0}), 0.25);
  EXPECT_DOUBLE_EQ(m.ignore[0], 0.25);
  EXPECT_DOUBLE_EQ(m.classes.at({1, 0, 1}), 1.0);
  EXPECT_DOUBLE_EQ(m.ignore[1], 0.0);
}

TEST(DownsampleLabels, Errors) {
  LabelMap l(4, 4, 3);
  EXPECT_THROW(downsample_labels<double>(l, 3, 2), DataError);
  EXPECT_THROW(downsample_labels<double>(l, 4, 3), DimensionError);
}

TEST(Patches, SplitMatchesIndexingAndReassembles) {
  Rng rng(1);
  TD f = random_tensor(rng, {3, 4, 6});
  const SoftMask<double> mask = downsample_labels<double>(random_labels(rng, 4, 6, 2), 2, 1);
  const Patches<double> p = split_patches(f, mask, 2, 3);
  ASSERT_EQ(p.count(), 4u);
  for (std::size_t gr = 0; gr < 2; ++gr)
    for (std::size_t gc = 0; gc < 2; ++gc)
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < 2; ++y)
          for (std::size_t x = 0; x < 3; ++x)
            EXPECT_DOUBLE_EQ(p.features.at({gr * 2 + gc, c, y * 3 + x}),
                             f.at({c, gr * 2 + y, gc * 3 + x}));
  EXPECT_EQ(reassemble_patches(p.features, 2, 2, 2, 3).to_vector(), f.to_vector());
  EXPECT_THROW(split_patches(f, mask, 3, 3), DimensionError);
}

TEST(ExtractCenters, MatchesBruteForceMaskedMeans) {
  Rng rng(2);
  const std::size_t k = 3, c = 4, h = 8, w = 8, ph = 4, pw = 2;
  TD f = random_tensor(rng, {c, h, w});
  LabelMap labels = random_labels(rng, 2 * h, 2 * w, k, 0.2);
  // Leave class 2 out of the top-left patch so an invalid center exists.
  for (std::size_t y = 0; y < 2 * ph; ++y)
    for (std::size_t x = 0; x < 2 * pw; ++x)
      if (labels.at(y, x) == 2) labels.at(y, x) = 0;
  const SoftMask<double> mask = downsample_labels<double>(labels, k, 2);
  const ClassCenters<double> centers = extract_centers(split_patches(f, mask, ph, pw));
  const std::size_t n = (h / ph) * (w / pw);
  ASSERT_EQ(centers.centers.shape(), (Shape{k, n, c}));
  EXPECT_FALSE(centers.is_valid(2, 0));
  for (std::size_t cls = 0; cls < k; ++cls) {
    for (std::size_t p = 0; p < n; ++p) {
      const std::size_t y0 = (p / (w / pw)) * ph;
      const std::size_t x0 = (p % (w / pw)) * pw;
      double mass = 0;
      std::vector<double> acc(c, 0.0);
      for (std::size_t y = y0; y < y0 + ph; ++y)
        for (std::size_t x = x0; x < x0 + pw; ++x) {
          const double m = mask.classes.at({cls, y, x});
          mass += m;
          for (std::size_t j = 0; j < c; ++j) acc[j] += m * f.at({j, y, x});
        }
      EXPECT_NEAR(centers.mass[cls * n + p], mass, 1e-12);
      EXPECT_EQ(centers.is_valid(cls, p), mass > 0);
      for (std::size_t j = 0; j < c; ++j) {
        const double expected = mass > 0 ? acc[j] / mass : 0.0;
        EXPECT_NEAR(centers.centers.at({cls, p, j}), expected, 1e-12);
      }
    }
  }
}

TEST(ExtractCenters, ConcatJoinsPatchAxis) {
  Rng rng(3);
  std::vector<ClassCenters<double>> parts;
  for (int i = 0; i < 2; ++i) {
    TD f = random_tensor(rng, {2, 4, 4});
    const SoftMask<double> mask = downsample_labels<double>(random_labels(rng, 4, 4, 2), 2, 1);
    parts.push_back(extract_centers(split_patches(f, mask, 2, 2)));
  }
  const ClassCenters<double> joined = concat_centers(parts);
  EXPECT_EQ(joined.num_patches(), 8u);
  EXPECT_DOUBLE_EQ(joined.centers.at({1, 5, 1}), parts[1].centers.at({1, 1, 1}));
  EXPECT_EQ(joined.is_valid(0, 6), parts[1].is_valid(0, 2));
}

TEST(Gumbel, SamplesLookGumbel) {
  Rng rng(4);
  const TD g = sample_gumbel<double>(rng, Shape{20000});
  double mean = 0;
  for (double v : g.data()) mean += v;
  mean /= 20000.0;
  EXPECT_NEAR(mean, 0.5772156649, 0.03);  // Euler-Mascheroni constant
}

TEST(Gumbel, HardRowsAreExactlyOneHotAtTheSoftArgmax) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    TD centers = random_tensor(rng, {7, 5});
    TD protos = random_tensor(rng, {4, 5});
    AssignmentOptions opt;
    opt.temperature = rng.uniform(0.1, 3.0);
    Rng draw(static_cast<std::uint64_t>(trial));
    const Assignment<double> a = gumbel_assign(centers, protos, draw, opt);
    for (std::size_t i = 0; i < 7; ++i) {
      int ones = 0;
      for (std::size_t j = 0; j < 4; ++j) {
        const double v = a.hard.at({i, j});
        EXPECT_TRUE(v == 0.0 || v == 1.0);
        ones += v == 1.0;
        EXPECT_LE(a.soft.at({i, j}), a.soft.at({i, a.choice[i]}));
      }
      EXPECT_EQ(ones, 1);
      EXPECT_EQ(a.hard.at({i, a.choice[i]}), 1.0);
    }
  }
}

TEST(Gumbel, NoiseFreeChoiceIsNearestByDotProduct) {
  Rng rng(6);
  TD centers = random_tensor(rng, {10, 3});
  TD protos = random_tensor(rng, {3, 3});
  AssignmentOptions opt;
  opt.gumbel_noise = false;
  const Assignment<double> a = gumbel_assign(centers, protos, rng, opt);
  for (std::size_t i = 0; i < 10; ++i) {
    std::size_t best = 0;
    double best_v = -1e300;
    for (std::size_t j = 0; j < 3; ++j) {
      double dot = 0;
      for (std::size_t c = 0; c < 3; ++c) dot += centers.at({i, c}) * protos.at({j, c});
      if (dot > best_v) {
        best_v = dot;
        best = j;
      }
    }
    EXPECT_EQ(a.choice[i], best);
  }
}

TEST(Gumbel, Errors) {
  Rng rng(7);
  AssignmentOptions opt;
  opt.temperature = 0;
  EXPECT_THROW(gumbel_assign(TD(Shape{2, 3}), TD(Shape{2, 3}), rng, opt), ConfigError);
  opt.temperature = 1;
  EXPECT_THROW(gumbel_assign(TD(Shape{2, 3}), TD(Shape{2, 4}), rng, opt), DimensionError);
  TD bad(Shape{1, 3}, std::vector<double>{NAN, 0, 0});
  EXPECT_THROW(gumbel_assign(bad, TD(Shape{2, 3}, 1.0), rng, opt), NumericError);
}

// Backward through the straight-through path delivers to the logits exactly
// what the soft assignment would receive for the same upstream gradient.
TEST(Gumbel, StraightThroughGradientEqualsSoftGradient) {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    TD centers = random_tensor(rng, {6, 4});
    TD protos = random_tensor(rng, {3, 4});
    TD weights = random_tensor(rng, {6, 3});
    AssignmentOptions opt;
    opt.temperature = 0.5;
    const std::uint64_t seed = rng.next_u64();

    Tape<double>::local().clear();
    TD c1 = centers.clone().set_requires_grad(true);
    Rng r1(seed);
    Assignment<double> a1 = gumbel_assign(c1, protos, r1, opt);
    sum(square(mul(a1.hard, weights))).backward();
    const std::vector<double> upstream(a1.hard.grad().begin(), a1.hard.grad().end());
    const std::vector<double> g_logits1(a1.logits.grad().begin(), a1.logits.grad().end());
    const std::vector<double> g_centers1(c1.grad().begin(), c1.grad().end());

    TD c2 = centers.clone().set_requires_grad(true);
    Rng r2(seed);
    Assignment<double> a2 = gumbel_assign(c2, protos, r2, opt);
    sum(mul(TD(Shape{6, 3}, upstream), a2.soft)).backward();
    const std::vector<double> g_logits2(a2.logits.grad().begin(), a2.logits.grad().end());
    const std::vector<double> g_centers2(c2.grad().begin(), c2.grad().end());

    EXPECT_EQ(g_logits1, g_logits2);
    EXPECT_EQ(g_centers1, g_centers2);
  }
}

TEST(Gumbel, DisabledStraightThroughHasNoGradient) {
  Rng rng(9);
  TD centers = random_tensor(rng, {3, 2}, -1, 1, true);
  AssignmentOptions opt;
  opt.straight_through = false;
  const Assignment<double> a = gumbel_assign(centers, random_tensor(rng, {2, 2}), rng, opt);
  EXPECT_FALSE(a.hard.requires_grad());
  Tape<double>::local().clear();
}

TEST(Bank, InitRowsAreUnitLength) {
  Rng rng(10);
  const PrototypeBank<double> bank = init_bank<double>(3, 4, 5, 0.9, rng);
  EXPECT_EQ(bank.prototypes.shape(), (Shape{3, 4, 5}));
  EXPECT_FALSE(bank.prototypes.requires_grad());
  for (std::size_t r = 0; r < 12; ++r) {
    double n = 0;
    for (std::size_t c = 0; c < 5; ++c) n += std::pow(bank.prototypes.data()[r * 5 + c], 2);
    EXPECT_NEAR(n, 1.0, 1e-12);
  }
  EXPECT_THROW(init_bank<double>(0, 1, 1, 0.9, rng), ConfigError);
}

TEST(Bank, BatchPrototypesAreMeansOfAssignedCenters) {
  Rng rng(11);
  const std::size_t k = 2, m = 3, c = 4;
  TD f = random_tensor(rng, {c, 8, 8});
  const SoftMask<double> mask = downsample_labels<double>(random_labels(rng, 8, 8, k, 0.0), k, 1);
  const ClassCenters<double> centers = extract_centers(split_patches(f, mask, 2, 2));
  PrototypeBank<double> bank = init_bank<double>(k, m, c, 0.9, rng);
  const auto assignments = assign_centers(centers, bank, rng, AssignmentOptions{});
  const BatchPrototypes<double> batch = batch_prototypes(assignments, k, m, c);
  ASSERT_EQ(assignments.size(), k);
  for (const auto& a : assignments) {
    for (std::size_t slot = 0; slot < m; ++slot) {
      std::vector<double> acc(c, 0.0);
      std::size_t count = 0;
      for (std::size_t r = 0; r < a.assignment.choice.size(); ++r) {
        if (a.assignment.choice[r] != slot) continue;
        ++count;
        for (std::size_t j = 0; j < c; ++j) acc[j] += a.centers.at({r, j});
      }
      EXPECT_EQ(batch.counts[a.cls * m + slot], count);
      for (std::size_t j = 0; j < c; ++j) {
        EXPECT_NEAR(batch.prototypes.at({a.cls, slot, j}), count ? acc[j] / count : 0.0, 1e-12);
      }
    }
  }
  const TD filled = fill_empty_slots(batch, bank);
  for (std::size_t s = 0; s < k * m; ++s) {
    for (std::size_t j = 0; j < c; ++j) {
      const double expected = batch.counts[s] ? batch.prototypes.data()[s * c + j]
                                              : bank.prototypes.data()[s * c + j];
      EXPECT_EQ(filled.data()[s * c + j], expected);
    }
  }
}

TEST(Bank, AssignCentersSkipsAbsentClasses) {
  Rng rng(12);
  TD f = random_tensor(rng, {3, 4, 4});
  const SoftMask<double> mask = downsample_labels<double>(LabelMap(4, 4, 1), 3, 1);
  const ClassCenters<double> centers = extract_centers(split_patches(f, mask, 2, 2));
  const auto a = assign_centers(centers, init_bank<double>(3, 2, 3, 0.9, rng), rng,
                                AssignmentOptions{});
  ASSERT_EQ(a.size(), 1u);
  EXPECT_EQ(a[0].cls, 1u);
  EXPECT_EQ(a[0].patch_index, (std::vector<std::size_t>{0, 1, 2, 3}));
}

TEST(Bank, MomentumUpdateIsExactAndLeavesEmptySlots) {
  Rng rng(13);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t k = 1 + rng.uniform_index(4), m = 1 + rng.uniform_index(4),
                      c = 1 + rng.uniform_index(6);
    PrototypeBank<float> bank = init_bank<float>(k, m, c, static_cast<float>(rng.uniform()), rng);
    const std::vector<float> before = bank.prototypes.to_vector();
    const Tensor<float> batch = random_tensor<float>(rng, {k, m, c}, -2, 2);
    std::vector<std::size_t> counts(k * m);
    for (auto& n : counts) n = rng.uniform() < 0.3 ? 0 : 1 + rng.uniform_index(5);
    momentum_update(bank, batch, counts);
    const float mu = bank.momentum;
    for (std::size_t s = 0; s < k * m; ++s) {
      EXPECT_EQ(bank.update_counts[s], counts[s] ? 1u : 0u);
      for (std::size_t j = s * c; j < (s + 1) * c; ++j) {
        const float expected =
            counts[s] ? mu * before[j] + (1.0f - mu) * batch.data()[j] : before[j];
        EXPECT_EQ(bank.prototypes.data()[j], expected);
      }
    }
  }
}

TEST(Bank, MomentumUpdateIsAConvexCombination) {
  Rng rng(14);
  PrototypeBank<double> bank = init_bank<double>(2, 2, 3, 0.75, rng);
  const std::vector<double> before = bank.prototypes.to_vector();
  const TD batch = random_tensor(rng, {2, 2, 3});
  momentum_update(bank, batch, {1, 1, 1, 1});
  for (std::size_t j = 0; j < before.size(); ++j) {
    const double lo = std::min(before[j], batch.data()[j]);
    const double hi = std::max(before[j], batch.data()[j]);
    EXPECT_GE(bank.prototypes.data()[j], lo - 1e-15);
    EXPECT_LE(bank.prototypes.data()[j], hi + 1e-15);
  }
  EXPECT_THROW(momentum_update(bank, random_tensor(rng, {2, 3, 3}), {1, 1, 1, 1}), DimensionError);
}

}  // namespace
