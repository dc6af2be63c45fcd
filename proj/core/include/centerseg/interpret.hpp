#pragma once

// Maps each prototype to the nearest class center seen in training data, and
// projects centers to 2-D for plotting.

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "centerseg/backbone.hpp"
#include "centerseg/data.hpp"
#include "centerseg/prototype.hpp"

namespace centerseg {

struct CenterRecord {
  std::size_t sample = 0;
  std::size_t row = 0;  // patch grid coordinates
  std::size_t col = 0;
  std::size_t cls = 0;
  std::size_t dominant = 0;  // class with the largest mass in the patch
  std::vector<float> center;
};

struct CenterCollection {
  std::size_t num_classes = 0;
  std::size_t feature_dim = 0;
  std::vector<CenterRecord> records;  // valid centers only, in scan order
};

// Appends the valid class centers of one feature map [C, h, w] under `mask`.
void collect_sample_centers(const Tensor<float>& features, const SoftMask<float>& mask,
                            std::size_t grid_rows, std::size_t grid_cols, std::size_t sample,
                            CenterCollection& out);

// Runs the backbone over every sample of a split without recording gradients.
CenterCollection collect_dataset_centers(const Manifest& manifest, const std::string& split,
                                         const BackboneParams<float>& params,
                                         std::size_t grid_rows, std::size_t grid_cols);

struct PrototypeExemplar {
  std::size_t k = 0;
  std::size_t i = 0;
  std::size_t sample = 0;
  std::size_t row = 0;
  std::size_t col = 0;
  double distance = 0.0;
  std::size_t dominant = 0;
};

struct ExemplarReport {
  std::vector<PrototypeExemplar> exemplars;  // (k, i) order
  std::vector<std::pair<std::size_t, std::size_t>> missing;  // prototypes whose class never occurs
};

// For each prototype P[k, i], the class-k center at minimum Euclidean distance;
// ties keep the first in scan order.
ExemplarReport find_exemplars(const PrototypeBank<float>& bank, const CenterCollection& centers);

struct Projection {
  std::vector<double> coords;       // [N, dims]
  std::vector<double> variances;    // variance captured by each component
  double total_variance = 0.0;
  bool degenerate = false;          // rank-0 input; coords are all zero
};

// Projection of the centered rows of data [n, c] onto the leading principal
// components, found by power iteration with deflation (tolerance 1e-8, at
// most 1000 iterations). Components are sign-normalized so their largest
// entry is positive. ContractError when n < 2.
Projection pca_project(const std::vector<double>& data, std::size_t n, std::size_t c,
                       std::size_t dims = 2);

std::string exemplars_csv(const ExemplarReport& report);

// x,y,class per center.
std::string projection_csv(const Projection& projection, const CenterCollection& centers);

}  // namespace centerseg
