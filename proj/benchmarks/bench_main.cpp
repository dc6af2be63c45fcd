#include <benchmark/benchmark.h>

#include <filesystem>

#include "centerseg/backbone.hpp"
#include "centerseg/classifier.hpp"
#include "centerseg/losses.hpp"
#include "centerseg/trainer.hpp"

using namespace centerseg;

namespace {

Tensor<float> random_tensor(Rng& rng, const Shape& shape, bool grad = false) {
  std::vector<float> v(element_count(shape));
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return Tensor<float>(shape, std::move(v), grad);
}

void BM_Conv2dForwardBackward(benchmark::State& state) {
  const auto side = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const Tensor<float> x = random_tensor(rng, {16, side, side}, true);
  const Tensor<float> k = random_tensor(rng, {16, 16, 3, 3}, true);
  const Tensor<float> b = random_tensor(rng, {16}, true);
  for (auto _ : state) {
    Tensor<float> y = conv2d(x, k, b, 1, 1);
    sum(y).backward();
    benchmark::DoNotOptimize(k.grad().data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(side * side));
}
BENCHMARK(BM_Conv2dForwardBackward)->Arg(16)->Arg(32)->Arg(64);

void BM_BackboneForward(benchmark::State& state) {
  const auto params = init_params<float>(1, BackboneConfig{});
  Rng rng(2);
  const Tensor<float> image = random_tensor(rng, {3, 64, 64});
  NoGradGuard<float> no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(forward(image, params));
}
BENCHMARK(BM_BackboneForward);

void BM_DistancesAndLogits(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0));
  Rng rng(3);
  const Tensor<float> f = random_tensor(rng, {32, 16, 64});
  const PrototypeBank<float> bank = init_bank<float>(4, m, 32, 0.999f, rng);
  NoGradGuard<float> no_grad;
  for (auto _ : state) {
    benchmark::DoNotOptimize(class_logits(pairwise_distances(f, bank), 1.0));
  }
}
BENCHMARK(BM_DistancesAndLogits)->Arg(1)->Arg(8);

void BM_SubspaceLoss(benchmark::State& state) {
  Rng rng(4);
  const Tensor<float> p = random_tensor(rng, {4, 8, 32}, true);
  for (auto _ : state) {
    loss_pp2(p).backward();
    benchmark::DoNotOptimize(p.grad().data());
  }
}
BENCHMARK(BM_SubspaceLoss);

void BM_TrainStep(benchmark::State& state) {
  const auto root = std::filesystem::temp_directory_path() / "centerseg_bench_data";
  DatasetSpec spec;
  spec.train = 8;
  spec.val = 0;
  spec.test = 0;
  std::filesystem::remove_all(root);
  const Manifest manifest = generate_dataset(spec, root);
  RunConfig config;
  config.dataset = root.string();
  config.prototypes = static_cast<std::size_t>(state.range(0));
  if (config.prototypes == 1) config.baseline = true;
  Trainer trainer(config, manifest);
  const std::vector<std::size_t> batch{0, 1, 2, 3};
  for (auto _ : state) benchmark::DoNotOptimize(trainer.train_step(batch));
  std::filesystem::remove_all(root);
}
BENCHMARK(BM_TrainStep)->Arg(1)->Arg(8)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
