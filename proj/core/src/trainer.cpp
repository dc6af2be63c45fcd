#include "centerseg/trainer.hpp"

#include <cmath>
#include <exception>
#include <limits>
#include <sstream>
#include <thread>

#include "centerseg/classifier.hpp"
#include "centerseg/random.hpp"

namespace centerseg {

namespace {

constexpr std::uint64_t kBackboneStream = 10;
constexpr std::uint64_t kBankStream = 11;
constexpr std::uint64_t kStepStream = 20;
constexpr std::uint64_t kShuffleStream = 21;

std::string describe(const LossReport& r) {
  std::ostringstream os;
  os.precision(9);
  os << "ce=" << r.ce << " dice=" << r.dice << " pp1=" << r.pp1 << " pp2=" << r.pp2
     << " fp1=" << r.fp1 << " fp2=" << r.fp2 << " total=" << r.total;
  return os.str();
}

bool finite(const LossReport& r) {
  for (double v : {r.ce, r.dice, r.pp1, r.pp2, r.fp1, r.fp2, r.total}) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

RunConfig bind_to_dataset(const RunConfig& config, const Manifest& manifest) {
  RunConfig c = config.effective();
  if (c.classes != 0 && c.classes != manifest.spec.classes) {
    throw ConfigError("config has " + std::to_string(c.classes) + " classes but the dataset has " +
                      std::to_string(manifest.spec.classes));
  }
  c.classes = manifest.spec.classes;
  c.validate();
  const std::size_t fh = manifest.spec.height / c.downsample;
  const std::size_t fw = manifest.spec.width / c.downsample;
  if (manifest.spec.height % c.downsample != 0 || manifest.spec.width % c.downsample != 0 ||
      fh % c.grid_rows != 0 || fw % c.grid_cols != 0) {
    throw ConfigError("patch grid " + std::to_string(c.grid_rows) + "x" +
                      std::to_string(c.grid_cols) + " does not divide the " + std::to_string(fh) +
                      "x" + std::to_string(fw) + " feature map");
  }
  return c;
}

}  // namespace

TrainingDiverged::TrainingDiverged(std::uint64_t epoch, std::uint64_t step,
                                   std::vector<std::size_t> batch, LossReport report,
                                   std::string cause)
    : NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                   std::to_string(step) + ": " + (cause.empty() ? describe(report) : cause)),
      epoch(epoch),
      step(step),
      batch(std::move(batch)),
      report(report),
      cause(std::move(cause)) {}

std::string TrainingDiverged::dump() const {
  std::ostringstream os;
  os << "epoch=" << epoch << "\n" << "step=" << step << "\n" << "batch=";
  for (std::size_t i = 0; i < batch.size(); ++i) os << (i ? "," : "") << batch[i];
  os << "\n";
  std::string losses = describe(report);
  for (char& ch : losses) {
    if (ch == ' ') ch = '\n';
  }
  os << losses << "\n";
  if (!cause.empty()) os << "cause=" << cause << "\n";
  return os.str();
}

Trainer::Trainer(const RunConfig& config, const Manifest& manifest)
    : config_(bind_to_dataset(config, manifest)), manifest_(manifest) {
  backbone_ = init_params<float>(Rng::derive(config_.seed, {kBackboneStream}), config_.backbone());
  Rng rng(Rng::derive(config_.seed, {kBankStream}));
  bank_ = init_bank<float>(config_.classes, config_.prototypes, config_.feature_dim,
                           static_cast<float>(config_.momentum), rng);
  const auto params = backbone_.parameters();
  optimizer_ = make_optimizer<float>(params, static_cast<float>(config_.lr),
                                     static_cast<float>(config_.weight_decay));
  load_training_set();
}

Trainer::Trainer(const Checkpoint& checkpoint, const Manifest& manifest)
    : config_(bind_to_dataset(checkpoint.config, manifest)),
      manifest_(manifest),
      backbone_(checkpoint.backbone),
      bank_(checkpoint.bank),
      epoch_(checkpoint.epoch),
      step_(checkpoint.step) {
  // Own copies, so training does not write through to the caller's checkpoint.
  for (auto& k : backbone_.kernels) k = k.clone();
  for (auto& b : backbone_.biases) b = b.clone();
  backbone_.set_requires_grad(true);
  bank_.prototypes = bank_.prototypes.clone();
  const auto params = backbone_.parameters();
  optimizer_ = make_optimizer<float>(params, static_cast<float>(config_.lr),
                                     static_cast<float>(config_.weight_decay));
  optimizer_.velocity = checkpoint.velocity;
  load_training_set();
}

void Trainer::load_training_set() {
  const std::size_t n = manifest_.files("train").size();
  if (n == 0) throw DataError("dataset has no training samples");
  images_.reserve(n);
  masks_.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Sample s = load_sample(manifest_, "train", i);
    images_.push_back(s.image.to_tensor<float>());
    masks_.push_back(downsample_labels<float>(s.labels, config_.classes, config_.downsample));
  }
}

std::vector<std::size_t> Trainer::epoch_order(std::uint64_t epoch) const {
  std::vector<std::size_t> order(images_.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(Rng::derive(config_.seed, {kShuffleStream, epoch}));
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[rng.uniform_index(i)]);
  }
  return order;
}

LossReport Trainer::train_step(const std::vector<std::size_t>& batch) {
  if (batch.empty()) throw ContractError("train_step: empty batch");
  try {
    return run_step(batch);
  } catch (const TrainingDiverged&) {
    throw;
  } catch (const NumericError& e) {
    // Non-finite features or prototypes are caught by the assignment or the
    // subspace terms before any loss value exists.
    Tape<float>::local().clear();
    const double nan = std::numeric_limits<double>::quiet_NaN();
    throw TrainingDiverged(epoch_, step_, batch, {nan, nan, nan, nan, nan, nan, nan}, e.what());
  }
}

LossReport Trainer::run_step(const std::vector<std::size_t>& batch) {
  auto& tape = Tape<float>::local();
  tape.clear();
  backbone_.zero_grad();

  std::vector<Tensor<float>> feats;
  std::vector<SoftMask<float>> masks;
  for (std::size_t i : batch) {
    if (i >= images_.size()) throw ContractError("train_step: sample index out of range");
    feats.push_back(forward(images_[i], backbone_));
    masks.push_back(masks_[i]);
  }
  // Images sit side by side; patches never straddle two images because the
  // patch width divides each image's feature width.
  const Tensor<float> features = feats.size() == 1 ? feats[0] : concat(feats, 2);
  const SoftMask<float> mask = masks.size() == 1 ? masks[0] : concat_width(masks);
  const std::size_t patch_h = feats[0].dim(1) / config_.grid_rows;
  const std::size_t patch_w = feats[0].dim(2) / config_.grid_cols;

  const Patches<float> patches = split_patches(features, mask, patch_h, patch_w);
  const ClassCenters<float> centers = extract_centers(patches);
  Rng rng(Rng::derive(config_.seed, {kStepStream, step_}));
  const auto assignments = assign_centers(centers, bank_, rng, config_.assignment());
  const BatchPrototypes<float> batch_protos =
      batch_prototypes(assignments, config_.classes, config_.prototypes, config_.feature_dim);

  const LossWeights weights = config_.loss_weights();
  LossTerms<float> terms;
  const DistanceMap<float> distances = pairwise_distances(features, bank_);
  const Tensor<float> logits = class_logits(distances, config_.alpha);
  terms.ce = cross_entropy(logits, mask).loss;
  terms.dice = dice_loss(softmax(logits, 0), mask);
  if (weights.fp > 0.0) {
    terms.fp1 = loss_fp1(distances, mask);
    terms.fp2 = loss_fp2(distances, mask, weights.margin);
  }
  if (weights.pp > 0.0) {
    const Tensor<float> protos = fill_empty_slots(batch_protos, bank_);
    terms.pp1 = loss_pp1(protos);
    terms.pp2 = loss_pp2(protos);
  }
  auto [total, report] = total_loss(terms, weights);
  if (!finite(report)) {
    tape.clear();
    throw TrainingDiverged(epoch_, step_, batch, report);
  }
  if (total.requires_grad()) {
    total.backward();
    auto params = backbone_.parameters();
    sgd_step<float>(params, optimizer_);
  } else {
    tape.clear();
  }
  momentum_update(bank_, batch_protos.prototypes, batch_protos.counts);
  ++step_;
  return report;
}

void Trainer::train_epoch(const std::function<void(const StepRecord&)>& on_step) {
  const auto order = epoch_order(epoch_);
  for (std::size_t start = 0; start < order.size(); start += config_.batch_size) {
    const std::size_t end = std::min(order.size(), start + config_.batch_size);
    const std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(end));
    const std::uint64_t step = step_;
    const LossReport report = train_step(batch);
    if (on_step) on_step({step, report});
  }
  ++epoch_;
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint c;
  c.config = config_;
  c.epoch = epoch_;
  c.step = step_;
  c.backbone = backbone_;
  for (auto& k : c.backbone.kernels) k = k.clone();
  for (auto& b : c.backbone.biases) b = b.clone();
  c.bank = bank_;
  c.bank.prototypes = bank_.prototypes.clone();
  c.velocity = optimizer_.velocity;
  return c;
}

LabelMap predict_image(const Image& image, const BackboneParams<float>& backbone,
                       const PrototypeBank<float>& bank, double alpha) {
  NoGradGuard<float> guard;
  const Tensor<float> features = forward(image.to_tensor<float>(), backbone);
  const Tensor<float> full =
      features.dim(1) == image.height && features.dim(2) == image.width
          ? features
          : resize_bilinear(features, image.height, image.width);
  return predict(full, bank, alpha);
}

EvalResult evaluate(const Manifest& manifest, const std::string& split,
                    const BackboneParams<float>& backbone, const PrototypeBank<float>& bank,
                    double alpha, std::size_t threads, bool keep_predictions) {
  if (bank.num_classes() != manifest.spec.classes) {
    throw ConfigError("model has " + std::to_string(bank.num_classes()) +
                      " classes but the dataset has " + std::to_string(manifest.spec.classes));
  }
  const std::size_t n = manifest.files(split).size();
  if (n == 0) throw DataError("split '" + split + "' is empty");
  std::vector<LabelMap> preds(n);
  std::vector<LabelMap> truth(n);
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const Sample s = load_sample(manifest, split, i);
      preds[i] = predict_image(s.image, backbone, bank, alpha);
      truth[i] = s.labels;
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    work(0, n);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    const std::size_t chunk = (n + threads - 1) / threads;
    for (std::size_t t = 0; t < threads; ++t) {
      const std::size_t begin = std::min(n, t * chunk);
      const std::size_t end = std::min(n, begin + chunk);
      pool.emplace_back([&, t, begin, end] {
        try {
          work(begin, end);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  EvalResult out;
  out.confusion = ConfusionMatrix(manifest.spec.classes);
  for (std::size_t i = 0; i < n; ++i) out.confusion.accumulate(preds[i], truth[i]);
  out.metrics = compute_metrics(out.confusion);
  if (keep_predictions) out.predictions = std::move(preds);
  return out;
}

}  // namespace centerseg
