#include "centerseg/interpret.hpp"

#include <cmath>
#include <cstdio>
#include <limits>

#include "centerseg/error.hpp"

namespace centerseg {

void collect_sample_centers(const Tensor<float>& features, const SoftMask<float>& mask,
                            std::size_t grid_rows, std::size_t grid_cols, std::size_t sample,
                            CenterCollection& out) {
  NoGradGuard<float> guard;
  const std::size_t h = features.dim(1);
  const std::size_t w = features.dim(2);
  if (grid_rows == 0 || grid_cols == 0 || h % grid_rows != 0 || w % grid_cols != 0) {
    throw DimensionError("patch grid " + std::to_string(grid_rows) + "x" +
                         std::to_string(grid_cols) + " does not divide the feature map " +
                         std::to_string(h) + "x" + std::to_string(w));
  }
  const Patches<float> patches = split_patches(features, mask, h / grid_rows, w / grid_cols);
  const ClassCenters<float> centers = extract_centers(patches);
  const std::size_t k = centers.num_classes();
  const std::size_t n = centers.num_patches();
  const std::size_t c = centers.feature_dim();
  if (out.records.empty() && out.num_classes == 0) {
    out.num_classes = k;
    out.feature_dim = c;
  } else if (out.num_classes != k || out.feature_dim != c) {
    throw DimensionError("collect_sample_centers: inconsistent class count or feature dim");
  }
  const auto data = centers.centers.data();
  for (std::size_t p = 0; p < n; ++p) {
    std::size_t dominant = 0;
    for (std::size_t cls = 1; cls < k; ++cls) {
      if (centers.mass[cls * n + p] > centers.mass[dominant * n + p]) dominant = cls;
    }
    for (std::size_t cls = 0; cls < k; ++cls) {
      if (!centers.is_valid(cls, p)) continue;
      CenterRecord r;
      r.sample = sample;
      r.row = p / grid_cols;
      r.col = p % grid_cols;
      r.cls = cls;
      r.dominant = dominant;
      r.center.assign(data.begin() + static_cast<std::ptrdiff_t>((cls * n + p) * c),
                      data.begin() + static_cast<std::ptrdiff_t>((cls * n + p + 1) * c));
      out.records.push_back(std::move(r));
    }
  }
}

CenterCollection collect_dataset_centers(const Manifest& manifest, const std::string& split,
                                         const BackboneParams<float>& params,
                                         std::size_t grid_rows, std::size_t grid_cols) {
  NoGradGuard<float> guard;
  CenterCollection out;
  out.num_classes = manifest.spec.classes;
  out.feature_dim = params.config.feature_dim;
  const std::size_t count = manifest.files(split).size();
  for (std::size_t s = 0; s < count; ++s) {
    const Sample sample = load_sample(manifest, split, s);
    const Tensor<float> features = forward(sample.image.to_tensor<float>(), params);
    const SoftMask<float> mask =
        downsample_labels<float>(sample.labels, manifest.spec.classes, params.config.downsample);
    collect_sample_centers(features, mask, grid_rows, grid_cols, s, out);
  }
  return out;
}

ExemplarReport find_exemplars(const PrototypeBank<float>& bank, const CenterCollection& centers) {
  const std::size_t k = bank.num_classes();
  const std::size_t m = bank.per_class();
  const std::size_t c = bank.feature_dim();
  if (!centers.records.empty() && (centers.num_classes != k || centers.feature_dim != c)) {
    throw DimensionError("find_exemplars: bank " + to_string(bank.prototypes.shape()) +
                         " does not match the collected centers");
  }
  const auto protos = bank.prototypes.data();
  ExemplarReport report;
  for (std::size_t cls = 0; cls < k; ++cls) {
    for (std::size_t i = 0; i < m; ++i) {
      const float* p = protos.data() + (cls * m + i) * c;
      double best = std::numeric_limits<double>::infinity();
      const CenterRecord* winner = nullptr;
      for (const auto& r : centers.records) {
        if (r.cls != cls) continue;
        double d2 = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          const double diff = static_cast<double>(r.center[j]) - static_cast<double>(p[j]);
          d2 += diff * diff;
        }
        if (d2 < best) {
          best = d2;
          winner = &r;
        }
      }
      if (winner == nullptr) {
        report.missing.emplace_back(cls, i);
        continue;
      }
      report.exemplars.push_back(
          {cls, i, winner->sample, winner->row, winner->col, std::sqrt(best), winner->dominant});
    }
  }
  return report;
}

Projection pca_project(const std::vector<double>& data, std::size_t n, std::size_t c,
                       std::size_t dims) {
  if (n < 2) throw ContractError("pca_project: need at least 2 points");
  if (data.size() != n * c) throw DimensionError("pca_project: data is not n x c");
  if (dims == 0 || dims > c) throw ContractError("pca_project: dims must be in [1, c]");

  std::vector<double> mean(c, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < c; ++j) mean[j] += data[r * c + j];
  }
  for (double& v : mean) v /= static_cast<double>(n);
  std::vector<double> centered(n * c);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < c; ++j) centered[r * c + j] = data[r * c + j] - mean[j];
  }
  std::vector<double> cov(c * c, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = centered.data() + r * c;
    for (std::size_t a = 0; a < c; ++a) {
      for (std::size_t b = a; b < c; ++b) cov[a * c + b] += row[a] * row[b];
    }
  }
  for (std::size_t a = 0; a < c; ++a) {
    for (std::size_t b = a; b < c; ++b) {
      cov[a * c + b] /= static_cast<double>(n);
      cov[b * c + a] = cov[a * c + b];
    }
  }

  Projection out;
  out.coords.assign(n * dims, 0.0);
  for (std::size_t j = 0; j < c; ++j) out.total_variance += cov[j * c + j];
  double scale = 0.0;
  for (double v : data) scale = std::max(scale, std::abs(v));
  if (out.total_variance <= 1e-24 * std::max(1.0, scale * scale)) {
    out.degenerate = true;
    out.variances.assign(dims, 0.0);
    return out;
  }

  std::vector<std::vector<double>> components;
  for (std::size_t d = 0; d < dims; ++d) {
    std::vector<double> v(c);
    for (std::size_t j = 0; j < c; ++j) v[j] = cov[j * c + j] + 1.0 + 0.01 * static_cast<double>(j);
    auto orthogonalize = [&](std::vector<double>& x) {
      for (const auto& u : components) {
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += u[j] * x[j];
        for (std::size_t j = 0; j < c; ++j) x[j] -= dot * u[j];
      }
    };
    auto normalize = [&](std::vector<double>& x) {
      double norm = 0.0;
      for (double e : x) norm += e * e;
      norm = std::sqrt(norm);
      if (norm > 0.0) {
        for (double& e : x) e /= norm;
      }
      return norm;
    };
    orthogonalize(v);
    normalize(v);
    double eigenvalue = 0.0;
    for (int iter = 0; iter < 1000; ++iter) {
      std::vector<double> next(c, 0.0);
      for (std::size_t a = 0; a < c; ++a) {
        for (std::size_t b = 0; b < c; ++b) next[a] += cov[a * c + b] * v[b];
      }
      // Deflation: keep the iterate orthogonal to the components already found.
      orthogonalize(next);
      eigenvalue = normalize(next);
      if (eigenvalue == 0.0) {
        // Remaining variance is zero; any orthogonal direction gives zero coordinates.
        break;
      }
      double delta = 0.0;
      for (std::size_t j = 0; j < c; ++j) delta += (next[j] - v[j]) * (next[j] - v[j]);
      v = std::move(next);
      if (std::sqrt(delta) < 1e-8) break;
    }
    std::size_t largest = 0;
    for (std::size_t j = 1; j < c; ++j) {
      if (std::abs(v[j]) > std::abs(v[largest])) largest = j;
    }
    if (v[largest] < 0.0) {
      for (double& e : v) e = -e;
    }
    out.variances.push_back(eigenvalue);
    components.push_back(std::move(v));
  }
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t d = 0; d < dims; ++d) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += centered[r * c + j] * components[d][j];
      out.coords[r * dims + d] = dot;
    }
  }
  return out;
}

std::string exemplars_csv(const ExemplarReport& report) {
  std::string out = "k,i,sample,row,col,distance,dominant\n";
  char buf[256];
  for (const auto& e : report.exemplars) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%zu,%zu,%zu,%.9g,%zu\n", e.k, e.i, e.sample, e.row,
                  e.col, e.distance, e.dominant);
    out += buf;
  }
  return out;
}

std::string projection_csv(const Projection& projection, const CenterCollection& centers) {
  const std::size_t n = centers.records.size();
  std::string out = "x,y,class\n";
  if (n == 0) return out;
  if (projection.coords.size() < n * 2) {
    throw DimensionError("projection_csv: projection has fewer than two components per center");
  }
  const std::size_t dims = projection.coords.size() / n;
  char buf[128];
  for (std::size_t r = 0; r < n; ++r) {
    std::snprintf(buf, sizeof buf, "%.9g,%.9g,%zu\n", projection.coords[r * dims],
                  projection.coords[r * dims + 1], centers.records[r].cls);
    out += buf;
  }
  return out;
}

}  // namespace centerseg
