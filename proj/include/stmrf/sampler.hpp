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

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "stmrf/lattice.hpp"
#include "stmrf/mrf.hpp"
#include "stmrf/rng.hpp"

namespace stmrf {

/// Gibbs run length: `burn_in` discarded sweeps followed by `kept`
/// consecutive recorded sweeps.
struct ChainSchedule {
  int burn_in = 0;
  int kept = 1;
  std::uint64_t seed = 0;
};

void validate(const ChainSchedule& schedule);

/// Full conditional target of a sweep: prior couplings plus per-cell
/// evidence log f(obs | 1) - log f(obs | 0). Empty evidence samples the
/// prior alone. Evidence may be +-infinity.
struct GibbsModel {
  MrfTopology topology;
  std::vector<double> coefficients;
  std::vector<double> evidence;
};

GibbsModel prior_model(const MrfTopology& topology, std::vector<double> coef);

/// One engine per gene so that genes can be swept in any order or in
/// parallel with identical results.
class GeneStreams {
 public:
  GeneStreams(std::uint64_t seed, int genes, std::uint64_t tag = 0);
  Engine& operator[](int gene) { return engines_[gene]; }
  int size() const { return static_cast<int>(engines_.size()); }

 private:
  std::vector<Engine> engines_;
};

/// One sequential sweep over every unmasked cell (gene, then region, then
/// time). Genes are processed in parallel when OpenMP is enabled.
void gibbs_sweep(LatentGrid& grid, const GibbsModel& model, GeneStreams& rng);

enum class SweepOrder { raster, reversed };

/// Serial reference: recomputes every neighbor sum from scratch. `reversed`
/// visits each gene's cells last region, last time first.
void gibbs_sweep_reference(LatentGrid& grid, const GibbsModel& model,
                           GeneStreams& rng,
                           SweepOrder order = SweepOrder::raster);

/// Sweeps `burn_in` times, then returns `kept` grids one sweep apart.
std::vector<LatentGrid> run_chain(const LatentGrid& init,
                                  const GibbsModel& model,
                                  const ChainSchedule& schedule);

/// Per-cell probability of state 1 over the kept samples. Masked cells hold
/// NaN.
struct PosteriorGrid {
  LatticeShape shape{};
  std::vector<double> prob_one;
  std::size_t samples = 0;

  bool has(std::size_t i) const { return prob_one[i] == prob_one[i]; }
  /// P(state = 0), the posterior local fdr in the DE model.
  double prob_zero(std::size_t i) const { return 1.0 - prob_one[i]; }
};

/// Streaming chain output: marginals, optional pseudolikelihood statistics
/// of the kept samples, and the final grid.
struct ChainSummary {
  PosteriorGrid marginals;
  PseudoStats stats;
  LatentGrid last;
};

/// Fused equivalent of run_chain that never materializes the samples; each
/// gene runs its whole chain independently. Produces exactly the samples
/// run_chain would.
ChainSummary run_chain_summary(const LatentGrid& init, const GibbsModel& model,
                               const ChainSchedule& schedule,
                               bool collect_stats);

PosteriorGrid posterior_marginals(const LatentGrid& init,
                                  const GibbsModel& model,
                                  const ChainSchedule& schedule);

}  // namespace stmrf
