#pragma once

// Training-time prototype pipeline: label downsampling, patch splitting,
// masked class-center aggregation, Gumbel hard assignment with a
// straight-through gradient, batch prototypes and the momentum bank.

#include <cstddef>
#include <cstdint>
#include <vector>

#include "centerseg/random.hpp"
#include "centerseg/tensor.hpp"
#include "centerseg/types.hpp"

namespace centerseg {

// Per-cell class fractions of a downsampled label map.
template <typename T>
struct SoftMask {
  Tensor<T> classes;     // [K, H, W], fraction of the source block with label k
  std::vector<T> ignore;  // [H * W], fraction of ignored source pixels

  std::size_t num_classes() const { return classes.dim(0); }
  std::size_t height() const { return classes.dim(1); }
  std::size_t width() const { return classes.dim(2); }
};

// Each d x d block of `labels` becomes one cell. Throws DataError for labels
// outside [0, K) other than `ignore_index`.
template <typename T>
SoftMask<T> downsample_labels(const LabelMap& labels, std::size_t num_classes,
                              std::size_t factor, std::uint8_t ignore_index = kIgnoreIndex);

// Joins masks side by side along the width axis.
template <typename T>
SoftMask<T> concat_width(const std::vector<SoftMask<T>>& masks);

template <typename T>
struct Patches {
  Tensor<T> features;  // [n, C, patch_h * patch_w]
  Tensor<T> masks;     // [n, K, patch_h * patch_w]
  std::size_t grid_rows = 0;
  std::size_t grid_cols = 0;
  std::size_t patch_h = 0;
  std::size_t patch_w = 0;

  std::size_t count() const { return grid_rows * grid_cols; }
};

// Non-overlapping patch_h x patch_w tiles in raster order.
template <typename T>
Patches<T> split_patches(const Tensor<T>& features, const SoftMask<T>& mask,
                         std::size_t patch_h, std::size_t patch_w);

// Inverse of the feature half of split_patches: [n, C, ph * pw] -> [C, H, W].
template <typename T>
Tensor<T> reassemble_patches(const Tensor<T>& patches, std::size_t grid_rows,
                             std::size_t grid_cols, std::size_t patch_h, std::size_t patch_w);

template <typename T>
struct ClassCenters {
  Tensor<T> centers;                 // [K, n, C]; invalid rows are exactly zero
  std::vector<std::uint8_t> valid;   // [K * n]
  std::vector<T> mass;               // [K * n], soft pixel count per class and patch

  std::size_t num_classes() const { return centers.dim(0); }
  std::size_t num_patches() const { return centers.dim(1); }
  std::size_t feature_dim() const { return centers.dim(2); }
  bool is_valid(std::size_t k, std::size_t p) const { return valid[k * num_patches() + p] != 0; }
};

// Masked mean of the features of each class inside each patch.
template <typename T>
ClassCenters<T> extract_centers(const Patches<T>& patches);

// Joins the centers of several images along the patch axis.
template <typename T>
ClassCenters<T> concat_centers(const std::vector<ClassCenters<T>>& parts);

// i.i.d. Gumbel(0, 1): -log(-log(u)), u clamped to (1e-12, 1 - 1e-12).
template <typename T>
Tensor<T> sample_gumbel(Rng& rng, const Shape& shape);

struct AssignmentOptions {
  double temperature = 1.0;
  bool gumbel_noise = true;
  // When false the hard assignment is a constant one-hot with no gradient.
  bool straight_through = true;
};

template <typename T>
struct Assignment {
  Tensor<T> logits;  // [n_v, m], centers . prototypes
  Tensor<T> soft;    // [n_v, m], softmax((logits + gumbel) / tau) over prototypes
  Tensor<T> hard;    // [n_v, m], one-hot forward value, soft gradient
  std::vector<std::size_t> choice;  // selected prototype per center
};

// Assigns each row of `centers` [n_v, C] to one of the rows of `prototypes`
// [m, C]. The prototypes enter under stop-gradient.
template <typename T>
Assignment<T> gumbel_assign(const Tensor<T>& centers, const Tensor<T>& prototypes, Rng& rng,
                            const AssignmentOptions& options);

template <typename T>
struct PrototypeBank {
  Tensor<T> prototypes;  // [K, m, C], never tracks gradients
  T momentum = T(0.999);
  std::vector<std::uint64_t> update_counts;  // [K * m]

  std::size_t num_classes() const { return prototypes.dim(0); }
  std::size_t per_class() const { return prototypes.dim(1); }
  std::size_t feature_dim() const { return prototypes.dim(2); }
};

// Rows drawn from N(0, I) and scaled to unit length.
template <typename T>
PrototypeBank<T> init_bank(std::size_t num_classes, std::size_t per_class,
                           std::size_t feature_dim, T momentum, Rng& rng);

template <typename T>
struct ClassAssignment {
  std::size_t cls = 0;
  std::vector<std::size_t> patch_index;  // which patch each center came from
  Tensor<T> centers;                     // [n_v, C] valid centers of the class
  Assignment<T> assignment;
};

// Runs gumbel_assign for every class that has at least one valid center, in
// class order.
template <typename T>
std::vector<ClassAssignment<T>> assign_centers(const ClassCenters<T>& centers,
                                               const PrototypeBank<T>& bank, Rng& rng,
                                               const AssignmentOptions& options);

template <typename T>
struct BatchPrototypes {
  Tensor<T> prototypes;             // [K, m, C], empty slots are zero
  std::vector<std::size_t> counts;  // [K * m], centers hard-assigned to each slot
};

// Mean of the centers assigned to each prototype slot, weighted by the hard
// assignment so gradients follow the straight-through path.
template <typename T>
BatchPrototypes<T> batch_prototypes(const std::vector<ClassAssignment<T>>& assignments,
                                    std::size_t num_classes, std::size_t per_class,
                                    std::size_t feature_dim);

// P <- mu * P + (1 - mu) * P_hat for slots with a positive count.
template <typename T>
void momentum_update(PrototypeBank<T>& bank, const Tensor<T>& batch,
                     const std::vector<std::size_t>& counts);

// Batch prototypes with empty slots taken from the bank (as constants).
template <typename T>
Tensor<T> fill_empty_slots(const BatchPrototypes<T>& batch, const PrototypeBank<T>& bank);

}  // namespace centerseg
