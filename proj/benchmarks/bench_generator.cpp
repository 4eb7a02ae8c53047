#include <benchmark/benchmark.h>

#include <random>

#include "rawformer/generator.hpp"

namespace {

rawformer::ImageTensor random_batch(int n, int side) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<float> d(0.f, 1.f);
  rawformer::ImageTensor x(rawformer::nn::Shape{n, 3, side, side});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = d(rng);
  return x;
}

// Forward + backward of one training step, per ablation row.
void BM_GeneratorStep(benchmark::State& state) {
  auto cfg = rawformer::GeneratorConfig::ablation(static_cast<int>(state.range(0)));
  const int batch = static_cast<int>(state.range(1));
  auto g = rawformer::build_generator(cfg);
  const auto x = random_batch(batch, cfg.image_size);
  for (auto _ : state) {
    rawformer::nn::Tape<float> tape;
    auto y = rawformer::generator_forward(cfg, g.params, tape, tape.constant(x));
    auto loss = rawformer::nn::mean(y);
    g.params.zero_grad();
    tape.backward(loss);
    benchmark::DoNotOptimize(loss.value().data());
  }
  state.counters["params"] = static_cast<double>(g.param_count());
  state.SetItemsProcessed(state.iterations() * batch);
}

void BM_GeneratorInference(benchmark::State& state) {
  auto cfg = rawformer::GeneratorConfig::ablation(5);
  auto g = rawformer::build_generator(cfg);
  const int side = static_cast<int>(state.range(0));
  const auto x = random_batch(1, side);
  for (auto _ : state) benchmark::DoNotOptimize(rawformer::generator_apply(g, x).data());
}

BENCHMARK(BM_GeneratorStep)->ArgsProduct({{1, 5}, {1, 16}})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_GeneratorInference)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
