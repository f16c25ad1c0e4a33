// Batched layer QPs from random reacher states: OpenMP batch solve against
// the serial full-LU reference.

#include <random>
#include <vector>

#include <benchmark/benchmark.h>

#include "safelayer/env.hpp"
#include "safelayer/qp.hpp"
#include "safelayer/safe_rl.hpp"

using namespace safelayer;

namespace {

std::vector<qp::Problem> layer_problems(int count) {
  const safe_rl::OptLayer layer = safe_rl::reacher_layer({}, 0.01);
  env::Reacher2D e(env::EnvConfig{});
  std::mt19937_64 rng(99);
  std::normal_distribution<double> n01;
  std::vector<qp::Problem> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    e.reset(rng);
    const Eigen::Vector2d a(0.1 * n01(rng), 0.1 * n01(rng));
    out.push_back(layer.problem(layer.assemble(e.observation()), a));
  }
  return out;
}

void BM_SolveBatch(benchmark::State& state) {
  const auto problems = layer_problems(static_cast<int>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(qp::solve_batch(problems));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_SolveBatchSerial(benchmark::State& state) {
  const auto problems = layer_problems(static_cast<int>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(qp::solve_batch_serial(problems));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

}  // namespace

BENCHMARK(BM_SolveBatch)->RangeMultiplier(4)->Range(4, 1024)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_SolveBatchSerial)->RangeMultiplier(4)->Range(4, 1024)->Unit(benchmark::kMicrosecond);

BENCHMARK_MAIN();
