// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include "lgfd/model.hpp"
#include "lgfd/rng.hpp"

namespace {

lgfd::Tensor random_images(int batch, int size, std::uint64_t seed) {
  lgfd::Rng rng(seed);
  std::vector<double> px(static_cast<std::size_t>(batch * size * size));
  for (auto& v : px) v = rng.uniform();
  return lgfd::Tensor::from_data({batch, 1, size, size}, std::move(px));
}

void BM_TrainStep(benchmark::State& state) {
  lgfd::ModelConfig cfg;
  cfg.image_size = static_cast<int>(state.range(0));
  cfg.L = static_cast<int>(state.range(1));
  lgfd::Detector model(cfg, 42);
  const int batch = 16;
  const auto images = random_images(batch, cfg.image_size, 1);
  std::vector<std::string> captions(batch, "an infrared image with one car in the middle center.");
  for (auto _ : state) {
    auto out = model.forward_train(images, captions);
    lgfd::Tensor loss = lgfd::sum(out.prediction.levels[0].objectness);
    loss = lgfd::add(loss, lgfd::sum(out.object_embedding));
    lgfd::backward(loss);
    benchmark::DoNotOptimize(loss.item());
  }
  state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(BM_TrainStep)->Args({128, 32})->Args({64, 32})->Args({128, 16})->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
