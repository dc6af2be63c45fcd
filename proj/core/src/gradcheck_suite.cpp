#include "centerseg/gradcheck_suite.hpp"

#include <chrono>
#include <cstdio>
#include <functional>

#include "centerseg/classifier.hpp"
#include "centerseg/gradcheck.hpp"
#include "centerseg/losses.hpp"
#include "centerseg/prototype.hpp"

namespace centerseg {

namespace {

constexpr std::size_t kClasses = 2;
constexpr std::size_t kPerClass = 2;
constexpr std::size_t kChannels = 6;
constexpr std::size_t kSide = 8;
constexpr std::size_t kGrid = 2;
constexpr double kAlpha = 0.7;
constexpr double kMargin = 3.0;
constexpr double kStep = 1e-5;

// Labels at twice the feature resolution so the downsampled mask has soft
// (fractional) cells; a diagonal boundary plus a few ignored pixels.
LabelMap instance_labels(Rng& rng) {
  LabelMap labels(2 * kSide, 2 * kSide);
  for (std::size_t y = 0; y < labels.height; ++y) {
    for (std::size_t x = 0; x < labels.width; ++x) {
      labels.at(y, x) = x + y / 2 < 2 * kSide - 3 ? 0 : 1;
      if (rng.uniform() < 0.05) labels.at(y, x) = kIgnoreIndex;
    }
  }
  return labels;
}

struct Instance {
  Tensor<double> features;
  SoftMask<double> mask;
  PrototypeBank<double> bank;
  std::uint64_t assign_seed = 0;
};

Tensor<double> batch_protos(const Tensor<double>& f, const Instance& in) {
  const Patches<double> patches = split_patches(f, in.mask, kSide / kGrid, kSide / kGrid);
  const ClassCenters<double> centers = extract_centers(patches);
  // Fresh generator on every call so each evaluation draws the same noise.
  Rng rng(in.assign_seed);
  AssignmentOptions options;
  // The straight-through gradient is not the derivative of the forward value,
  // so the check holds the one-hot assignment constant.
  options.straight_through = false;
  const auto assignments = assign_centers(centers, in.bank, rng, options);
  const auto batch = batch_prototypes(assignments, kClasses, kPerClass, kChannels);
  return fill_empty_slots(batch, in.bank);
}

}  // namespace

bool GradCheckReport::passed() const {
  for (const auto& t : terms) {
    if (!t.passed) return false;
  }
  return !terms.empty();
}

std::string GradCheckReport::to_text() const {
  std::string out;
  char buf[160];
  for (const auto& t : terms) {
    std::snprintf(buf, sizeof buf, "%-6s max_rel_error=%.3e  %s\n", t.name.c_str(),
                  t.max_relative_error, t.passed ? "ok" : "FAIL");
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "threshold=%.1e  time=%.2fs  %s\n", threshold, seconds,
                passed() ? "PASS" : "FAIL");
  out += buf;
  return out;
}

GradCheckReport run_grad_check(std::uint64_t seed, double threshold, double analytic_scale) {
  const auto start = std::chrono::steady_clock::now();
  Rng rng(Rng::derive(seed, {40}));
  Instance in;
  {
    std::vector<double> f(kChannels * kSide * kSide);
    for (double& v : f) v = rng.normal();
    in.features = Tensor<double>(Shape{kChannels, kSide, kSide}, std::move(f));
  }
  in.mask = downsample_labels<double>(instance_labels(rng), kClasses, 2);
  in.bank = init_bank<double>(kClasses, kPerClass, kChannels, 0.999, rng);
  in.assign_seed = Rng::derive(seed, {41});

  LossWeights weights;
  weights.pp = 0.5;
  weights.fp = 0.5;
  weights.dice = 1.0;
  weights.margin = kMargin;

  auto logits = [&in](const Tensor<double>& f) {
    return class_logits(pairwise_distances(f, in.bank), kAlpha);
  };
  using Fn = std::function<Tensor<double>(const Tensor<double>&)>;
  const std::vector<std::pair<std::string, Fn>> terms = {
      {"ce", [&](const Tensor<double>& f) { return cross_entropy(logits(f), in.mask).loss; }},
      {"dice", [&](const Tensor<double>& f) { return dice_loss(softmax(logits(f), 0), in.mask); }},
      {"pp1", [&](const Tensor<double>& f) { return loss_pp1(batch_protos(f, in)); }},
      {"pp2", [&](const Tensor<double>& f) { return loss_pp2(batch_protos(f, in)); }},
      {"fp1",
       [&](const Tensor<double>& f) { return loss_fp1(pairwise_distances(f, in.bank), in.mask); }},
      {"fp2",
       [&](const Tensor<double>& f) {
         return loss_fp2(pairwise_distances(f, in.bank), in.mask, kMargin);
       }},
      {"total",
       [&](const Tensor<double>& f) {
         LossTerms<double> t;
         const Tensor<double> l = logits(f);
         const DistanceMap<double> d = pairwise_distances(f, in.bank);
         const Tensor<double> p = batch_protos(f, in);
         t.ce = cross_entropy(l, in.mask).loss;
         t.dice = dice_loss(softmax(l, 0), in.mask);
         t.pp1 = loss_pp1(p);
         t.pp2 = loss_pp2(p);
         t.fp1 = loss_fp1(d, in.mask);
         t.fp2 = loss_fp2(d, in.mask, kMargin);
         return total_loss(t, weights).first;
       }},
  };

  GradCheckReport report;
  report.threshold = threshold;
  for (const auto& [name, fn] : terms) {
    const GradCheckResult r = finite_diff_check<double>(fn, in.features, kStep, analytic_scale);
    report.terms.push_back({name, r.max_relative_error, r.analytic, r.numeric,
                            r.max_relative_error <= threshold});
  }
  Tape<double>::local().clear();
  report.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace centerseg
