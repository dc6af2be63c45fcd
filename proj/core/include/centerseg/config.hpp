#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "centerseg/backbone.hpp"
#include "centerseg/losses.hpp"
#include "centerseg/prototype.hpp"

namespace centerseg {

// Everything that determines a training run. Serialized as key=value lines;
// keys match the CLI flag names.
struct RunConfig {
  std::string dataset;
  std::size_t classes = 0;      // 0 until bound to a dataset
  std::size_t prototypes = 8;   // m, per class
  std::size_t grid_rows = 2;    // logical patch grid over the feature map
  std::size_t grid_cols = 2;
  double momentum = 0.999;
  double alpha = 1.0;
  double tau = 1.0;
  bool gumbel_noise = true;
  double lambda_pp = 0.01;
  double lambda_fp = 0.01;
  double lambda_dice = 1.0;
  double margin = 1.0;
  double lr = 0.01;
  double weight_decay = 1e-4;
  std::size_t epochs = 30;
  std::size_t batch_size = 4;
  std::uint64_t seed = 0;
  bool baseline = false;  // one prototype per class, regularizers off
  std::size_t feature_dim = 32;
  std::size_t hidden = 16;
  std::size_t downsample = 4;

  // ConfigError naming the offending key.
  void validate() const;

  // The baseline flag applied: m = 1 and lambda_pp = lambda_fp = 0.
  RunConfig effective() const;

  // ConfigError for unknown keys or unparsable values.
  void set(const std::string& key, const std::string& value);

  std::string to_text() const;
  static RunConfig from_text(const std::string& text);
  static const std::vector<std::string>& keys();

  BackboneConfig backbone() const;
  LossWeights loss_weights() const;
  AssignmentOptions assignment() const;

  bool operator==(const RunConfig&) const = default;
};

}  // namespace centerseg
