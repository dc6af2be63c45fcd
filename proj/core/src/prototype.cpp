#include "centerseg/prototype.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "centerseg/error.hpp"

namespace centerseg {

template <typename T>
SoftMask<T> downsample_labels(const LabelMap& labels, std::size_t num_classes,
                              std::size_t factor, std::uint8_t ignore_index) {
  if (factor == 0 || labels.height % factor != 0 || labels.width % factor != 0) {
    throw DimensionError("downsample_labels: " + std::to_string(labels.height) + "x" +
                         std::to_string(labels.width) + " not divisible by " +
                         std::to_string(factor));
  }
  if (num_classes == 0) throw ConfigError("downsample_labels: no classes");
  const std::size_t h = labels.height / factor;
  const std::size_t w = labels.width / factor;
  const T cell = T(1) / static_cast<T>(factor * factor);
  std::vector<std::size_t> counts(num_classes);
  std::vector<T> classes(num_classes * h * w, T(0));
  std::vector<T> ignore(h * w, T(0));
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      std::fill(counts.begin(), counts.end(), 0);
      std::size_t ignored = 0;
      for (std::size_t dy = 0; dy < factor; ++dy) {
        for (std::size_t dx = 0; dx < factor; ++dx) {
          const std::uint8_t v = labels.at(y * factor + dy, x * factor + dx);
          if (v == ignore_index) {
            ++ignored;
          } else if (v < num_classes) {
            ++counts[v];
          } else {
            throw DataError("downsample_labels: label " + std::to_string(v) +
                            " outside [0, " + std::to_string(num_classes) + ")");
          }
        }
      }
      for (std::size_t k = 0; k < num_classes; ++k) {
        classes[(k * h + y) * w + x] = static_cast<T>(counts[k]) * cell;
      }
      ignore[y * w + x] = static_cast<T>(ignored) * cell;
    }
  }
  return {Tensor<T>(Shape{num_classes, h, w}, std::move(classes)), std::move(ignore)};
}

template <typename T>
SoftMask<T> concat_width(const std::vector<SoftMask<T>>& masks) {
  if (masks.empty()) throw ContractError("concat_width: no masks");
  std::vector<Tensor<T>> parts;
  std::size_t total_w = 0;
  for (const auto& m : masks) {
    parts.push_back(m.classes);
    total_w += m.width();
  }
  Tensor<T> classes = detach(concat(parts, 2));
  const std::size_t h = masks[0].height();
  std::vector<T> ignore(h * total_w);
  std::size_t offset = 0;
  for (const auto& m : masks) {
    for (std::size_t y = 0; y < h; ++y) {
      std::copy_n(m.ignore.begin() + static_cast<std::ptrdiff_t>(y * m.width()), m.width(),
                  ignore.begin() + static_cast<std::ptrdiff_t>(y * total_w + offset));
    }
    offset += m.width();
  }
  return {classes, std::move(ignore)};
}

namespace {

template <typename T>
Tensor<T> tile(const Tensor<T>& x, std::size_t patch_h, std::size_t patch_w) {
  const std::size_t c = x.dim(0);
  const std::size_t gr = x.dim(1) / patch_h;
  const std::size_t gc = x.dim(2) / patch_w;
  Tensor<T> t = reshape(x, Shape{c, gr, patch_h, gc, patch_w});
  t = permute(t, {1, 3, 0, 2, 4});
  return reshape(t, Shape{gr * gc, c, patch_h * patch_w});
}

}  // namespace

template <typename T>
Patches<T> split_patches(const Tensor<T>& features, const SoftMask<T>& mask,
                         std::size_t patch_h, std::size_t patch_w) {
  if (features.rank() != 3) throw DimensionError("split_patches: features must be [C, H, W]");
  const std::size_t h = features.dim(1);
  const std::size_t w = features.dim(2);
  if (mask.height() != h || mask.width() != w) {
    throw DimensionError("split_patches: mask " + to_string(mask.classes.shape()) +
                         " does not match features " + to_string(features.shape()));
  }
  if (patch_h == 0 || patch_w == 0 || h % patch_h != 0 || w % patch_w != 0) {
    throw DimensionError("split_patches: " + std::to_string(h) + "x" + std::to_string(w) +
                         " is not divisible into " + std::to_string(patch_h) + "x" +
                         std::to_string(patch_w) + " patches");
  }
  Patches<T> out;
  out.features = tile(features, patch_h, patch_w);
  out.masks = tile(mask.classes, patch_h, patch_w);
  out.grid_rows = h / patch_h;
  out.grid_cols = w / patch_w;
  out.patch_h = patch_h;
  out.patch_w = patch_w;
  return out;
}

template <typename T>
Tensor<T> reassemble_patches(const Tensor<T>& patches, std::size_t grid_rows,
                             std::size_t grid_cols, std::size_t patch_h, std::size_t patch_w) {
  if (patches.rank() != 3 || patches.dim(0) != grid_rows * grid_cols ||
      patches.dim(2) != patch_h * patch_w) {
    throw DimensionError("reassemble_patches: unexpected shape " + to_string(patches.shape()));
  }
  const std::size_t c = patches.dim(1);
  Tensor<T> t = reshape(patches, Shape{grid_rows, grid_cols, c, patch_h, patch_w});
  t = permute(t, {2, 0, 3, 1, 4});
  return reshape(t, Shape{c, grid_rows * patch_h, grid_cols * patch_w});
}

template <typename T>
ClassCenters<T> extract_centers(const Patches<T>& patches) {
  const std::size_t n = patches.features.dim(0);
  const std::size_t k = patches.masks.dim(1);
  const std::size_t pixels = patches.masks.dim(2);
  if (patches.masks.dim(0) != n || patches.features.dim(2) != pixels) {
    throw DimensionError("extract_centers: inconsistent patch shapes");
  }
  ClassCenters<T> out;
  out.mass.assign(k * n, T(0));
  out.valid.assign(k * n, 0);
  const auto m = patches.masks.data();
  std::vector<T> inverse(k * n, T(0));
  for (std::size_t p = 0; p < n; ++p) {
    for (std::size_t cls = 0; cls < k; ++cls) {
      T total = T(0);
      const T* row = m.data() + (p * k + cls) * pixels;
      for (std::size_t i = 0; i < pixels; ++i) total += row[i];
      out.mass[cls * n + p] = total;
      if (total > T(0)) {
        out.valid[cls * n + p] = 1;
        inverse[cls * n + p] = T(1) / std::max(total, T(1e-12));
      }
    }
  }
  // [n, K, P] x [n, P, C] -> [n, K, C] -> [K, n, C]
  Tensor<T> sums = matmul(detach(patches.masks), transpose(patches.features));
  sums = permute(sums, {1, 0, 2});
  out.centers = mul(sums, Tensor<T>(Shape{k, n, 1}, std::move(inverse)));
  return out;
}

template <typename T>
ClassCenters<T> concat_centers(const std::vector<ClassCenters<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_centers: no inputs");
  const std::size_t k = parts[0].num_classes();
  std::vector<Tensor<T>> tensors;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.num_classes() != k) throw DimensionError("concat_centers: class count mismatch");
    tensors.push_back(p.centers);
    total += p.num_patches();
  }
  ClassCenters<T> out;
  out.centers = concat(tensors, 1);
  out.valid.resize(k * total);
  out.mass.resize(k * total);
  for (std::size_t cls = 0; cls < k; ++cls) {
    std::size_t offset = 0;
    for (const auto& p : parts) {
      const std::size_t n = p.num_patches();
      for (std::size_t i = 0; i < n; ++i) {
        out.valid[cls * total + offset + i] = p.valid[cls * n + i];
        out.mass[cls * total + offset + i] = p.mass[cls * n + i];
      }
      offset += n;
    }
  }
  return out;
}

template <typename T>
Tensor<T> sample_gumbel(Rng& rng, const Shape& shape) {
  std::vector<T> values(element_count(shape));
  for (T& v : values) {
    const double u = std::clamp(rng.uniform(), 1e-12, 1.0 - 1e-12);
    v = static_cast<T>(-std::log(-std::log(u)));
  }
  return Tensor<T>(shape, std::move(values));
}

template <typename T>
Assignment<T> gumbel_assign(const Tensor<T>& centers, const Tensor<T>& prototypes, Rng& rng,
                            const AssignmentOptions& options) {
  if (centers.rank() != 2 || prototypes.rank() != 2 || centers.dim(1) != prototypes.dim(1)) {
    throw DimensionError("gumbel_assign: expected centers [n, C] and prototypes [m, C], got " +
                         to_string(centers.shape()) + " and " + to_string(prototypes.shape()));
  }
  if (!(options.temperature > 0.0)) throw ConfigError("gumbel_assign: temperature must be > 0");
  const std::size_t n = centers.dim(0);
  const std::size_t m = prototypes.dim(0);

  Assignment<T> out;
  out.logits = matmul(centers, transpose(detach(prototypes)));
  for (T v : out.logits.data()) {
    if (!std::isfinite(v)) throw NumericError("gumbel_assign: non-finite assignment logits");
  }
  Tensor<T> z = out.logits;
  if (options.gumbel_noise) z = add(z, sample_gumbel<T>(rng, Shape{n, m}));
  if (options.temperature != 1.0) z = mul(z, static_cast<T>(1.0 / options.temperature));
  out.soft = softmax(z, 1);
  out.choice = argmax(out.soft, 1);

  std::vector<T> one_hot(n * m, T(0));
  for (std::size_t i = 0; i < n; ++i) one_hot[i * m + out.choice[i]] = T(1);
  Tensor<T> hard(Shape{n, m}, std::move(one_hot));
  // (A - sg(A)) is exactly zero, so the forward value stays exactly one-hot.
  out.hard = options.straight_through ? add(hard, sub(out.soft, detach(out.soft))) : hard;
  return out;
}

template <typename T>
PrototypeBank<T> init_bank(std::size_t num_classes, std::size_t per_class,
                           std::size_t feature_dim, T momentum, Rng& rng) {
  if (num_classes == 0 || per_class == 0 || feature_dim == 0) {
    throw ConfigError("init_bank: empty bank shape");
  }
  if (!(momentum >= T(0) && momentum <= T(1))) throw ConfigError("init_bank: momentum outside [0, 1]");
  std::vector<T> values(num_classes * per_class * feature_dim);
  for (std::size_t row = 0; row < num_classes * per_class; ++row) {
    std::vector<double> v(feature_dim);
    double norm = 0.0;
    while (norm == 0.0) {
      norm = 0.0;
      for (double& x : v) {
        x = rng.normal();
        norm += x * x;
      }
    }
    norm = std::sqrt(norm);
    for (std::size_t c = 0; c < feature_dim; ++c) {
      values[row * feature_dim + c] = static_cast<T>(v[c] / norm);
    }
  }
  PrototypeBank<T> bank;
  bank.prototypes = Tensor<T>(Shape{num_classes, per_class, feature_dim}, std::move(values));
  bank.momentum = momentum;
  bank.update_counts.assign(num_classes * per_class, 0);
  return bank;
}

template <typename T>
std::vector<ClassAssignment<T>> assign_centers(const ClassCenters<T>& centers,
                                               const PrototypeBank<T>& bank, Rng& rng,
                                               const AssignmentOptions& options) {
  const std::size_t k = centers.num_classes();
  const std::size_t n = centers.num_patches();
  const std::size_t c = centers.feature_dim();
  if (bank.num_classes() != k || bank.feature_dim() != c) {
    throw DimensionError("assign_centers: bank " + to_string(bank.prototypes.shape()) +
                         " does not match centers " + to_string(centers.centers.shape()));
  }
  const std::size_t m = bank.per_class();
  Tensor<T> flat = reshape(centers.centers, Shape{k * n, c});
  std::vector<ClassAssignment<T>> out;
  for (std::size_t cls = 0; cls < k; ++cls) {
    ClassAssignment<T> entry;
    entry.cls = cls;
    std::vector<std::size_t> rows;
    for (std::size_t p = 0; p < n; ++p) {
      if (centers.is_valid(cls, p)) {
        entry.patch_index.push_back(p);
        rows.push_back(cls * n + p);
      }
    }
    if (rows.empty()) continue;
    entry.centers = index_select(flat, 0, rows);
    Tensor<T> protos = reshape(slice(bank.prototypes, 0, cls, 1), Shape{m, c});
    entry.assignment = gumbel_assign(entry.centers, protos, rng, options);
    out.push_back(std::move(entry));
  }
  return out;
}

template <typename T>
BatchPrototypes<T> batch_prototypes(const std::vector<ClassAssignment<T>>& assignments,
                                    std::size_t num_classes, std::size_t per_class,
                                    std::size_t feature_dim) {
  BatchPrototypes<T> out;
  out.counts.assign(num_classes * per_class, 0);
  std::vector<Tensor<T>> rows(num_classes);
  for (const auto& entry : assignments) {
    if (entry.cls >= num_classes) throw DimensionError("batch_prototypes: class out of range");
    if (entry.assignment.hard.dim(1) != per_class) {
      throw DimensionError("batch_prototypes: assignment width does not match prototype count");
    }
    for (std::size_t choice : entry.assignment.choice) ++out.counts[entry.cls * per_class + choice];
    std::vector<T> scale(per_class, T(0));
    for (std::size_t i = 0; i < per_class; ++i) {
      const std::size_t count = out.counts[entry.cls * per_class + i];
      if (count > 0) scale[i] = T(1) / static_cast<T>(count);
    }
    Tensor<T> sums = matmul(transpose(entry.assignment.hard), entry.centers);
    Tensor<T> means = mul(sums, Tensor<T>(Shape{per_class, 1}, std::move(scale)));
    rows[entry.cls] = reshape(means, Shape{1, per_class, feature_dim});
  }
  for (auto& r : rows) {
    if (!r.defined()) r = Tensor<T>::zeros(Shape{1, per_class, feature_dim});
  }
  out.prototypes = concat(rows, 0);
  return out;
}

template <typename T>
void momentum_update(PrototypeBank<T>& bank, const Tensor<T>& batch,
                     const std::vector<std::size_t>& counts) {
  if (batch.shape() != bank.prototypes.shape()) {
    throw DimensionError("momentum_update: batch " + to_string(batch.shape()) +
                         " does not match bank " + to_string(bank.prototypes.shape()));
  }
  const std::size_t slots = bank.num_classes() * bank.per_class();
  if (counts.size() != slots) throw DimensionError("momentum_update: counts size mismatch");
  const std::size_t c = bank.feature_dim();
  const T mu = bank.momentum;
  auto p = bank.prototypes.mutable_data();
  const auto q = batch.data();
  for (std::size_t s = 0; s < slots; ++s) {
    if (counts[s] == 0) continue;
    for (std::size_t j = s * c; j < (s + 1) * c; ++j) p[j] = mu * p[j] + (T(1) - mu) * q[j];
    ++bank.update_counts[s];
  }
}

template <typename T>
Tensor<T> fill_empty_slots(const BatchPrototypes<T>& batch, const PrototypeBank<T>& bank) {
  if (batch.prototypes.shape() != bank.prototypes.shape()) {
    throw DimensionError("fill_empty_slots: batch and bank shapes differ");
  }
  const std::size_t c = bank.feature_dim();
  std::vector<T> filler(bank.prototypes.numel(), T(0));
  const auto b = bank.prototypes.data();
  for (std::size_t s = 0; s < batch.counts.size(); ++s) {
    if (batch.counts[s] != 0) continue;
    std::copy_n(b.begin() + static_cast<std::ptrdiff_t>(s * c), c,
                filler.begin() + static_cast<std::ptrdiff_t>(s * c));
  }
  return add(batch.prototypes, Tensor<T>(bank.prototypes.shape(), std::move(filler)));
}

#define CENTERSEG_INSTANTIATE_PROTOTYPE(T)                                                      \
  template SoftMask<T> downsample_labels<T>(const LabelMap&, std::size_t, std::size_t,          \
                                            std::uint8_t);                                      \
  template SoftMask<T> concat_width<T>(const std::vector<SoftMask<T>>&);                        \
  template Patches<T> split_patches<T>(const Tensor<T>&, const SoftMask<T>&, std::size_t,       \
                                       std::size_t);                                            \
  template Tensor<T> reassemble_patches<T>(const Tensor<T>&, std::size_t, std::size_t,          \
                                           std::size_t, std::size_t);                           \
  template ClassCenters<T> extract_centers<T>(const Patches<T>&);                               \
  template ClassCenters<T> concat_centers<T>(const std::vector<ClassCenters<T>>&);              \
  template Tensor<T> sample_gumbel<T>(Rng&, const Shape&);                                      \
  template Assignment<T> gumbel_assign<T>(const Tensor<T>&, const Tensor<T>&, Rng&,             \
                                          const AssignmentOptions&);                            \
  template PrototypeBank<T> init_bank<T>(std::size_t, std::size_t, std::size_t, T, Rng&);       \
  template std::vector<ClassAssignment<T>> assign_centers<T>(                                   \
      const ClassCenters<T>&, const PrototypeBank<T>&, Rng&, const AssignmentOptions&);         \
  template BatchPrototypes<T> batch_prototypes<T>(const std::vector<ClassAssignment<T>>&,       \
                                                  std::size_t, std::size_t, std::size_t);       \
  template void momentum_update<T>(PrototypeBank<T>&, const Tensor<T>&,                         \
                                   const std::vector<std::size_t>&);                            \
  template Tensor<T> fill_empty_slots<T>(const BatchPrototypes<T>&, const PrototypeBank<T>&);

CENTERSEG_INSTANTIATE_PROTOTYPE(float)
CENTERSEG_INSTANTIATE_PROTOTYPE(double)

}  // namespace centerseg
