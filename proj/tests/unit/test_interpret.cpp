#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <limits>

#include "centerseg/error.hpp"
#include "centerseg/interpret.hpp"
#include "helpers.hpp"

using namespace centerseg;
using centerseg::testing::random_tensor;

namespace {

LabelMap random_labels(Rng& rng, std::size_t h, std::size_t w, std::size_t k) {
  LabelMap l(h, w);
  for (auto& v : l.values) v = static_cast<std::uint8_t>(rng.uniform_index(k));
  return l;
}

TEST(Centers, CollectMatchesMaskedMeansAndDominantClass) {
  Rng rng(1);
  const std::size_t k = 3, c = 4;
  const Tensor<float> f = random_tensor<float>(rng, {c, 6, 6});
  const LabelMap labels = random_labels(rng, 6, 6, k);
  const SoftMask<float> mask = downsample_labels<float>(labels, k, 1);
  CenterCollection out;
  out.num_classes = k;
  out.feature_dim = c;
  collect_sample_centers(f, mask, 2, 3, 7, out);
  std::size_t expected_records = 0;
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t q = 0; q < 3; ++q) {
      std::vector<std::size_t> count(k, 0);
      for (std::size_t y = r * 3; y < r * 3 + 3; ++y)
        for (std::size_t x = q * 2; x < q * 2 + 2; ++x) ++count[labels.at(y, x)];
      std::size_t dominant = 0;
      for (std::size_t cls = 1; cls < k; ++cls)
        if (count[cls] > count[dominant]) dominant = cls;
      for (std::size_t cls = 0; cls < k; ++cls) {
        if (count[cls] == 0) continue;
        const CenterRecord& rec = out.records.at(expected_records++);
        EXPECT_EQ(rec.sample, 7u);
        EXPECT_EQ(rec.row, r);
        EXPECT_EQ(rec.col, q);
        EXPECT_EQ(rec.cls, cls);
        EXPECT_EQ(rec.dominant, dominant);
        for (std::size_t j = 0; j < c; ++j) {
          double acc = 0;
          for (std::size_t y = r * 3; y < r * 3 + 3; ++y)
            for (std::size_t x = q * 2; x < q * 2 + 2; ++x)
              if (labels.at(y, x) == cls) acc += f.at({j, y, x});
          EXPECT_NEAR(rec.center[j], acc / count[cls], 1e-5);
        }
      }
    }
  }
  EXPECT_EQ(out.records.size(), expected_records);
}

CenterCollection random_collection(Rng& rng, std::size_t n, std::size_t k, std::size_t c) {
  CenterCollection col;
  col.num_classes = k;
  col.feature_dim = c;
  for (std::size_t i = 0; i < n; ++i) {
    CenterRecord r;
    r.sample = i / 4;
    r.row = i % 4;
    r.cls = rng.uniform_index(k);
    r.dominant = rng.uniform_index(k);
    for (std::size_t j = 0; j < c; ++j) r.center.push_back(static_cast<float>(rng.normal()));
    col.records.push_back(std::move(r));
  }
  return col;
}

TEST(Exemplars, PlantedCenterIsFound) {
  Rng rng(2);
  CenterCollection col = random_collection(rng, 40, 2, 5);
  PrototypeBank<float> bank = init_bank<float>(2, 2, 5, 0.9f, rng);
  // Plant a copy of prototype (1, 0) as a class-1 center.
  CenterRecord planted;
  planted.sample = 99;
  planted.cls = 1;
  planted.dominant = 1;
  for (std::size_t j = 0; j < 5; ++j) planted.center.push_back(bank.prototypes.at({1, 0, j}));
  col.records.insert(col.records.begin() + 17, planted);
  const ExemplarReport rep = find_exemplars(bank, col);
  ASSERT_EQ(rep.exemplars.size(), 4u);
  EXPECT_EQ(rep.exemplars[2].k, 1u);
  EXPECT_EQ(rep.exemplars[2].i, 0u);
  EXPECT_EQ(rep.exemplars[2].sample, 99u);
  EXPECT_EQ(rep.exemplars[2].distance, 0.0);
}

TEST(Exemplars, MatchBruteForceAndReportMissingClasses) {
  Rng rng(3);
  CenterCollection col = random_collection(rng, 60, 3, 4);
  for (auto& r : col.records)
    if (r.cls == 2) r.cls = 0;  // class 2 never occurs
  const PrototypeBank<float> bank = init_bank<float>(3, 2, 4, 0.9f, rng);
  const ExemplarReport rep = find_exemplars(bank, col);
  ASSERT_EQ(rep.exemplars.size(), 4u);
  EXPECT_EQ(rep.missing, (std::vector<std::pair<std::size_t, std::size_t>>{{2, 0}, {2, 1}}));
  for (const auto& e : rep.exemplars) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_idx = 0;
    for (std::size_t n = 0; n < col.records.size(); ++n) {
      if (col.records[n].cls != e.k) continue;
      double d = 0;
      for (std::size_t j = 0; j < 4; ++j)
        d += std::pow(double(col.records[n].center[j]) - double(bank.prototypes.at({e.k, e.i, j})), 2);
      if (std::sqrt(d) < best) {
        best = std::sqrt(d);
        best_idx = n;
      }
    }
    EXPECT_NEAR(e.distance, best, 1e-9);
    EXPECT_EQ(e.sample, col.records[best_idx].sample);
    EXPECT_EQ(e.row, col.records[best_idx].row);
    EXPECT_EQ(e.dominant, col.records[best_idx].dominant);
  }
  const std::string csv = exemplars_csv(rep);
  EXPECT_EQ(csv.rfind("k,i,sample,row,col,distance,dominant\n", 0), 0u);
}

TEST(Pca, VariancesMatchEigenvaluesOfCovariance) {
  Rng rng(4);
  const std::size_t n = 200, c = 5;
  std::vector<double> data(n * c);
  const double scale[5] = {3.0, 2.0, 1.0, 0.5, 0.2};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) data[i * c + j] = scale[j] * rng.normal() + 0.3 * j;
  // Mix the axes so the components are not coordinate-aligned.
  Eigen::MatrixXd x = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      data.data(), n, c);
  const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(Eigen::MatrixXd::Random(c, c)).householderQ();
  x = x * q;
  std::vector<double> mixed(n * c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) mixed[i * c + j] = x(i, j);

  const Projection p = pca_project(mixed, n, c);
  const Eigen::MatrixXd centered = x.rowwise() - x.colwise().mean();
  const Eigen::MatrixXd cov = centered.transpose() * centered / double(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  const Eigen::VectorXd ev = es.eigenvalues();  // ascending
  ASSERT_EQ(p.variances.size(), 2u);
  EXPECT_NEAR(p.variances[0], ev(c - 1), 1e-6 * ev(c - 1));
  EXPECT_NEAR(p.variances[1], ev(c - 2), 1e-6 * ev(c - 1));
  EXPECT_NEAR(p.total_variance, cov.trace(), 1e-9);
  EXPECT_FALSE(p.degenerate);
  // Coordinates are projections on the leading eigenvectors, up to sign.
  for (std::size_t d = 0; d < 2; ++d) {
    const Eigen::VectorXd v = es.eigenvectors().col(c - 1 - d);
    const Eigen::VectorXd proj = centered * v;
    double dot = 0;
    for (std::size_t i = 0; i < n; ++i) dot += proj(i) * p.coords[i * 2 + d];
    const double sign = dot >= 0 ? 1.0 : -1.0;
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(p.coords[i * 2 + d], sign * proj(i), 1e-5);
  }
}

TEST(Pca, TwoDimensionalDataKeepsPairwiseDistances) {
  Rng rng(5);
  const std::size_t n = 30;
  std::vector<double> data(n * 2);
  for (std::size_t i = 0; i < n; ++i) {
    data[2 * i] = 2.0 * rng.normal();
    data[2 * i + 1] = 0.7 * rng.normal();
  }
  const Projection p = pca_project(data, n, 2);
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b) {
      const double d0 = std::hypot(data[2 * a] - data[2 * b], data[2 * a + 1] - data[2 * b + 1]);
      const double d1 = std::hypot(p.coords[2 * a] - p.coords[2 * b], p.coords[2 * a + 1] - p.coords[2 * b + 1]);
      EXPECT_NEAR(d0, d1, 1e-6);
    }
}

TEST(Pca, PointsOnALine) {
  std::vector<double> data;
  for (int i = 0; i < 10; ++i) {
    const double t = i - 4.5;
    data.insert(data.end(), {1 + t, 2 + 2 * t, -t});
  }
  const Projection p = pca_project(data, 10, 3);
  EXPECT_NEAR(p.variances[1], 0.0, 1e-9);
  EXPECT_NEAR(p.variances[0], p.total_variance, 1e-9);
  for (int i = 0; i < 10; ++i) EXPECT_NEAR(std::abs(p.coords[2 * i]), std::abs(i - 4.5) * std::sqrt(6.0), 1e-6);
}

TEST(Pca, IsotropicDataSpreadsVarianceEvenly) {
  Rng rng(6);
  const std::size_t n = 4000, c = 8;
  std::vector<double> data(n * c);
  for (auto& v : data) v = rng.normal();
  const Projection p = pca_project(data, n, c);
  const double captured = (p.variances[0] + p.variances[1]) / p.total_variance;
  EXPECT_NEAR(captured, 2.0 / c, 0.05);
}

TEST(Pca, DegenerateAndErrors) {
  const Projection p = pca_project(std::vector<double>(12, 1.5), 4, 3);
  EXPECT_TRUE(p.degenerate);
  for (double v : p.coords) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(pca_project({1, 2, 3}, 1, 3), ContractError);
}

}  // namespace
