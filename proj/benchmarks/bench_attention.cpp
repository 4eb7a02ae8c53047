// Condensed vs dense attention at growing token counts. The FLOP counters
// come from the tape's ledger, so they match what `rawformer bench` reports.
#include <benchmark/benchmark.h>

#include <random>

#include "rawformer/nn/attention.hpp"

namespace {

using rawformer::nn::Shape;
using rawformer::nn::Tape;
using rawformer::nn::Tensor;

constexpr int kChannels = 32;
constexpr int kHeads = 2;
constexpr int kR = 2;

Tensor<float> random_map(Shape s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d;
  Tensor<float> t(s);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = d(rng);
  return t;
}

struct Inputs {
  Tensor<float> q, k, v, c;
  explicit Inputs(int side)
      : q(random_map({1, kChannels, side, side}, 1)),
        k(random_map({1, kChannels, side, side}, 2)),
        v(random_map({1, kChannels, side, side}, 3)),
        c(random_map({1, kChannels, side / kR, side / kR}, 4)) {}
};

void BM_CondensedAttention(benchmark::State& state) {
  const int side = static_cast<int>(state.range(0));
  const Inputs in(side);
  std::uint64_t flops = 0;
  for (auto _ : state) {
    rawformer::nn::FlopLedger ledger;
    Tape<float> tape;
    tape.flop_ledger = &ledger;
    auto y = rawformer::nn::condensed_attention(tape.constant(in.q), tape.constant(in.k), tape.constant(in.v),
                                                tape.constant(in.c), kHeads);
    benchmark::DoNotOptimize(y.value().data());
    flops = ledger.total("attention.");
  }
  state.counters["tokens"] = side * side;
  state.counters["matmul_flops"] = static_cast<double>(flops);
  state.counters["FLOP/s"] = benchmark::Counter(static_cast<double>(flops), benchmark::Counter::kIsIterationInvariantRate);
}

void BM_DenseAttention(benchmark::State& state) {
  const int side = static_cast<int>(state.range(0));
  const Inputs in(side);
  std::uint64_t flops = 0;
  for (auto _ : state) {
    rawformer::nn::FlopLedger ledger;
    Tape<float> tape;
    tape.flop_ledger = &ledger;
    auto y = rawformer::nn::dense_attention(tape.constant(in.q), tape.constant(in.k), tape.constant(in.v), kHeads);
    benchmark::DoNotOptimize(y.value().data());
    flops = ledger.total("attention.");
  }
  state.counters["tokens"] = side * side;
  state.counters["matmul_flops"] = static_cast<double>(flops);
  state.counters["FLOP/s"] = benchmark::Counter(static_cast<double>(flops), benchmark::Counter::kIsIterationInvariantRate);
}

// N = 256, 1024, 4096
BENCHMARK(BM_CondensedAttention)->Arg(16)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_DenseAttention)->Arg(16)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
