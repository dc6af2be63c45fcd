#pragma once

// Training loop and evaluation. One step: backbone forward per image, class
// centers per patch, Gumbel assignment to the bank, batch prototypes, losses,
// backward, SGD on the backbone, momentum update of the bank.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "centerseg/backbone.hpp"
#include "centerseg/checkpoint.hpp"
#include "centerseg/config.hpp"
#include "centerseg/data.hpp"
#include "centerseg/error.hpp"
#include "centerseg/losses.hpp"
#include "centerseg/metrics.hpp"
#include "centerseg/prototype.hpp"

namespace centerseg {

// Thrown when a step produces a non-finite loss, or non-finite values stop it
// earlier (then `cause` holds the original message and the report is NaN);
// carries what is needed to reproduce it.
class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(std::uint64_t epoch, std::uint64_t step, std::vector<std::size_t> batch,
                   LossReport report, std::string cause = {});

  std::uint64_t epoch;
  std::uint64_t step;
  std::vector<std::size_t> batch;
  LossReport report;
  std::string cause;

  std::string dump() const;
};

struct StepRecord {
  std::uint64_t step = 0;
  LossReport report;
};

class Trainer {
 public:
  // Fresh run. The baseline flag is applied and the class count is taken from
  // the dataset (ConfigError if the config names a different one).
  Trainer(const RunConfig& config, const Manifest& manifest);
  // Resume from a checkpoint.
  Trainer(const Checkpoint& checkpoint, const Manifest& manifest);

  const RunConfig& config() const { return config_; }
  std::uint64_t epoch() const { return epoch_; }
  std::uint64_t step() const { return step_; }
  const BackboneParams<float>& backbone() const { return backbone_; }
  const PrototypeBank<float>& bank() const { return bank_; }

  // Shuffled training order of an epoch; depends only on seed and epoch.
  std::vector<std::size_t> epoch_order(std::uint64_t epoch) const;

  LossReport train_step(const std::vector<std::size_t>& batch);

  // One pass over the training split; `on_step` sees every step's losses.
  void train_epoch(const std::function<void(const StepRecord&)>& on_step = {});

  Checkpoint checkpoint() const;

 private:
  void load_training_set();
  LossReport run_step(const std::vector<std::size_t>& batch);

  RunConfig config_;
  Manifest manifest_;
  BackboneParams<float> backbone_;
  PrototypeBank<float> bank_;
  OptimizerState<float> optimizer_;
  std::uint64_t epoch_ = 0;
  std::uint64_t step_ = 0;
  std::vector<Tensor<float>> images_;
  std::vector<SoftMask<float>> masks_;
};

// Features upsampled to the input size, then winner-take-all per pixel.
LabelMap predict_image(const Image& image, const BackboneParams<float>& backbone,
                       const PrototypeBank<float>& bank, double alpha);

struct EvalResult {
  ConfusionMatrix confusion{1};
  Metrics metrics;
  std::vector<LabelMap> predictions;  // filled when requested
};

// threads > 1 splits the samples over worker threads; the result does not
// depend on the thread count.
EvalResult evaluate(const Manifest& manifest, const std::string& split,
                    const BackboneParams<float>& backbone, const PrototypeBank<float>& bank,
                    double alpha, std::size_t threads = 1, bool keep_predictions = false);

}  // namespace centerseg
