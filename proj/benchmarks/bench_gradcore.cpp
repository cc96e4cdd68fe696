#include <benchmark/benchmark.h>

#include <vector>

#include "cadlab/gradcore.hpp"
#include "cadlab/random.hpp"

using namespace cadlab;

namespace {

std::vector<double> random_point(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-1, 1);
  return v;
}

// sum_j tanh(a . w_j) over a small weight grid; n parameters in total.
grad::Var chain(grad::Tape& tape, std::span<const grad::Var> w, std::size_t width) {
  std::vector<grad::Var> outs;
  for (std::size_t j = 0; j + width <= w.size(); j += width) {
    std::vector<grad::Var> row(w.begin() + j, w.begin() + j + width);
    outs.push_back(grad::tanh(grad::sum(row)));
  }
  (void)tape;
  return grad::log_sum_exp(outs);
}

}  // namespace

static void BM_Forward(benchmark::State& state) {
  const auto point = random_point(state.range(0), 1);
  for (auto _ : state) {
    grad::Tape tape;
    std::vector<grad::Var> w;
    for (double x : point) w.push_back(tape.variable(x));
    benchmark::DoNotOptimize(chain(tape, w, 8).value());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Forward)->Range(64, 8192);

static void BM_Backward(benchmark::State& state) {
  const auto point = random_point(state.range(0), 2);
  for (auto _ : state) {
    grad::Tape tape;
    std::vector<grad::Var> w;
    for (double x : point) w.push_back(tape.variable(x));
    const auto g = grad::gradient(chain(tape, w, 8), w);
    benchmark::DoNotOptimize(g.data());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Backward)->Range(64, 8192);

static void BM_DoubleBackward(benchmark::State& state) {
  const auto point = random_point(state.range(0), 3);
  for (auto _ : state) {
    grad::Tape tape;
    std::vector<grad::Var> w;
    for (double x : point) w.push_back(tape.variable(x));
    const auto g = grad::gradient_graph(chain(tape, w, 8), w);
    const auto gg = grad::gradient(grad::dot(g, g), w);
    benchmark::DoNotOptimize(gg.data());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_DoubleBackward)->Range(64, 8192);
