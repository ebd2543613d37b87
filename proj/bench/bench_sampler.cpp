/*
 * Copyright 2026 The stmrf Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <benchmark/benchmark.h>

#include <random>

#include "stmrf/sampler.hpp"
#include "stmrf/sim.hpp"

using namespace stmrf;

namespace {

// Expression-model posterior on a B=16, T=13 lattice with `genes` genes.
GibbsModel make_model(int genes, LatentGrid& init) {
  const LatticeShape shape{16, genes, 13};
  std::mt19937_64 rng(11);
  std::normal_distribution<double> evidence(0.0, 2.0);
  std::vector<double> e(shape.cells());
  for (double& v : e) v = evidence(rng);
  init = LatentGrid(shape);
  for (std::size_t i = 0; i < shape.cells(); ++i) init.set_at(i, e[i] > 0);
  return {MrfTopology::expression(shape), {0.08, 0.20, 1.5}, std::move(e)};
}

void BM_SweepReference(benchmark::State& state) {
  LatentGrid grid;
  const GibbsModel model = make_model(static_cast<int>(state.range(0)), grid);
  GeneStreams rng(1, grid.shape().genes);
  for (auto _ : state) {
    gibbs_sweep_reference(grid, model, rng);
    benchmark::ClobberMemory();
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(grid.shape().cells()));
}

void BM_Sweep(benchmark::State& state) {
  LatentGrid grid;
  const GibbsModel model = make_model(static_cast<int>(state.range(0)), grid);
  GeneStreams rng(1, grid.shape().genes);
  for (auto _ : state) {
    gibbs_sweep(grid, model, rng);
    benchmark::ClobberMemory();
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(grid.shape().cells()));
}

void BM_ChainSummary(benchmark::State& state) {
  LatentGrid grid;
  const GibbsModel model = make_model(static_cast<int>(state.range(0)), grid);
  const ChainSchedule sched{50, 150, 3};
  for (auto _ : state) {
    ChainSummary s = run_chain_summary(grid, model, sched, true);
    benchmark::DoNotOptimize(s.marginals.prob_one.data());
  }
  state.SetItemsProcessed(state.iterations() * 200 *
                          static_cast<std::int64_t>(grid.shape().cells()));
}

}  // namespace

BENCHMARK(BM_SweepReference)->Arg(100)->Arg(1000)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Sweep)->Arg(100)->Arg(1000)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ChainSummary)->Arg(100)->Arg(1000)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
