#include <benchmark/benchmark.h>

#include <numeric>
#include <vector>

#include "cadlab/datakit.hpp"
#include "cadlab/trainer.hpp"

using namespace cadlab;

namespace {

const train::TrainingData& bench_data() {
  static const train::TrainingData d = [] {
    data::GeneratorConfig g;
    g.n_pairs = 64;
    g.seed = 5;
    return train::TrainingData::from_pairs(data::generate_cad(g).train);
  }();
  return d;
}

}  // namespace

// One batch of 16 pairs; args are (alpha > 0, beta > 0).
static void BM_TrainStep(benchmark::State& state) {
  const auto& d = bench_data();
  train::TrainConfig c = train::shallow_preset();
  c.alpha = state.range(0) ? 1.6 : 0.0;
  c.beta = state.range(1) ? 0.1 : 0.0;
  const auto params = train::initial_params(c, d);
  std::vector<std::size_t> batch(16);
  std::iota(batch.begin(), batch.end(), 0);
  for (auto _ : state) {
    const auto g = train::evaluate_step(c, d, params, batch);
    benchmark::DoNotOptimize(g.loss.total);
  }
}
BENCHMARK(BM_TrainStep)->ArgsProduct({{0, 1}, {0, 1}})->Unit(benchmark::kMicrosecond);

static void BM_TrainEpochs(benchmark::State& state) {
  const auto& d = bench_data();
  train::TrainConfig c = train::shallow_preset();
  c.epochs = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) {
    const auto r = train::train(c, d);
    benchmark::DoNotOptimize(r.best.train_accuracy);
  }
}
BENCHMARK(BM_TrainEpochs)->Arg(5)->Unit(benchmark::kMillisecond);
