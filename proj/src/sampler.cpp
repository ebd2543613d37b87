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

#include "stmrf/sampler.hpp"

#include <array>
#include <limits>
#include <stdexcept>
#include <string>

#include "stmrf/error.hpp"

namespace stmrf {

void validate(const ChainSchedule& schedule) {
  if (schedule.burn_in < 0 || schedule.kept < 1) {
    throw InputError("chain schedule needs burn_in >= 0 and kept >= 1, got " +
                     std::to_string(schedule.burn_in) + "/" +
                     std::to_string(schedule.kept));
  }
}

GibbsModel prior_model(const MrfTopology& topology, std::vector<double> coef) {
  return {topology, std::move(coef), {}};
}

GeneStreams::GeneStreams(std::uint64_t seed, int genes, std::uint64_t tag) {
  engines_.reserve(genes);
  for (int g = 0; g < genes; ++g) {
    engines_.push_back(make_stream(seed, {tag, static_cast<std::uint64_t>(g)}));
  }
}

namespace {

void check_model(const LatentGrid& grid, const GibbsModel& model) {
  if (!(grid.shape() == model.topology.shape())) {
    throw std::invalid_argument("grid and model lattices differ");
  }
  if (!model.evidence.empty() && model.evidence.size() != grid.shape().cells()) {
    throw std::invalid_argument("evidence array does not match lattice");
  }
  if (static_cast<int>(model.coefficients.size()) !=
      model.topology.num_coefficients()) {
    throw std::invalid_argument("coefficient count does not match model");
  }
}

inline std::uint8_t draw(double logit, Engine& rng) {
  return uniform01(rng) < conditional_prob(logit) ? 1 : 0;
}

// Signed state sums per (time slot, region group) for one gene.
class SpinSums {
 public:
  SpinSums(const MrfTopology& topo) : groups_(topo.num_groups()) {
    sums_.resize(static_cast<std::size_t>(topo.shape().periods) * groups_);
  }
  void load(const LatentGrid& grid, const MrfTopology& topo, int g) {
    std::fill(sums_.begin(), sums_.end(), 0);
    const LatticeShape& shape = grid.shape();
    for (int b = 0; b < shape.regions; ++b) {
      const int gb = topo.group_of(b);
      for (int t = 0; t < shape.periods; ++t) {
        if (grid.masked(b, g, t)) continue;
        at(t, gb) += 2 * grid.state(b, g, t) - 1;
      }
    }
  }
  int& at(int t, int group) { return sums_[t * groups_ + group]; }

 private:
  int groups_;
  std::vector<int> sums_;
};

// Neighbor summary of lattice cell c (time t, group gb) using the running
// sums instead of a scan over regions.
inline CellSummary summary_from_sums(const LatentGrid& grid,
                                     const MrfTopology& topo, SpinSums& sums,
                                     std::size_t c, int t, int gb) {
  CellSummary sum;
  sum.group = gb;
  sum.same = sums.at(t, gb) - (2 * grid.at(c) - 1);
  if (topo.num_groups() == 2) sum.cross = sums.at(t, 1 - gb);
  if (t > 0 && !grid.masked_at(c - 1)) sum.temporal += 2 * grid.at(c - 1) - 1;
  if (t + 1 < topo.shape().periods && !grid.masked_at(c + 1)) {
    sum.temporal += 2 * grid.at(c + 1) - 1;
  }
  return sum;
}

// Coefficients laid out for the sweep. The logit is accumulated in slot
// order so it matches MrfTopology::logit bit for bit.
struct SweepWeights {
  double bias = 0.0;
  double same[2] = {0.0, 0.0};
  double cross = 0.0;
  double temporal = 0.0;

  SweepWeights(const MrfTopology& topo, std::span<const double> coef) {
    bias = coef[0];
    for (int gb = 0; gb < topo.num_groups(); ++gb) same[gb] = coef[topo.same_slot(gb)];
    if (topo.cross_slot() >= 0) cross = coef[topo.cross_slot()];
    temporal = coef[topo.temporal_slot()];
  }

  double logit(const CellSummary& s) const {
    return bias + same[s.group] * s.same + cross * s.cross + temporal * s.temporal;
  }
};

// Incremental sweep of one gene.
void sweep_gene(LatentGrid& grid, int g, const GibbsModel& model, Engine& rng,
                SpinSums& sums) {
  const MrfTopology& topo = model.topology;
  const LatticeShape& shape = grid.shape();
  const bool has_evidence = !model.evidence.empty();
  const SweepWeights w(topo, model.coefficients);
  sums.load(grid, topo, g);
  for (int b = 0; b < shape.regions; ++b) {
    const int gb = topo.group_of(b);
    const std::size_t base = shape.index(b, g, 0);
    for (int t = 0; t < shape.periods; ++t) {
      const std::size_t c = base + t;
      if (grid.masked_at(c)) continue;
      const std::uint8_t s = grid.at(c);
      const CellSummary sum = summary_from_sums(grid, topo, sums, c, t, gb);
      double logit = w.logit(sum);
      if (has_evidence) logit += model.evidence[c];
      const std::uint8_t next = draw(logit, rng);
      if (next != s) {
        grid.set_at(c, next);
        sums.at(t, gb) += next ? 2 : -2;
      }
    }
  }
}

// Adds the current states of gene g to `stats`; `sums` must be current.
void accumulate_gene(const LatentGrid& grid, int g, const MrfTopology& topo,
                     SpinSums& sums, PseudoStats& stats) {
  const LatticeShape& shape = grid.shape();
  for (int b = 0; b < shape.regions; ++b) {
    const int gb = topo.group_of(b);
    const std::size_t base = shape.index(b, g, 0);
    for (int t = 0; t < shape.periods; ++t) {
      const std::size_t c = base + t;
      if (grid.masked_at(c)) continue;
      const std::uint8_t s = grid.at(c);
      const CellSummary sum = summary_from_sums(grid, topo, sums, c, t, gb);
      stats.add(s, sum);
    }
  }
}

}  // namespace

void gibbs_sweep(LatentGrid& grid, const GibbsModel& model, GeneStreams& rng) {
  check_model(grid, model);
  const int genes = grid.shape().genes;
  if (rng.size() != genes) throw std::invalid_argument("one stream per gene required");
#pragma omp parallel
  {
    SpinSums sums(model.topology);
#pragma omp for schedule(dynamic, 4)
    for (int g = 0; g < genes; ++g) sweep_gene(grid, g, model, rng[g], sums);
  }
}

void gibbs_sweep_reference(LatentGrid& grid, const GibbsModel& model,
                           GeneStreams& rng, SweepOrder order) {
  check_model(grid, model);
  const MrfTopology& topo = model.topology;
  const LatticeShape& shape = grid.shape();
  if (rng.size() != shape.genes) throw std::invalid_argument("one stream per gene required");
  const int n = static_cast<int>(shape.cells_per_gene());
  for (int g = 0; g < shape.genes; ++g) {
    for (int k = 0; k < n; ++k) {
      const int r = order == SweepOrder::raster ? k : n - 1 - k;
      const int b = r / shape.periods;
      const int t = r % shape.periods;
      if (grid.masked(b, g, t)) continue;
      double logit = topo.logit(topo.summarize(grid, b, g, t), model.coefficients);
      if (!model.evidence.empty()) logit += model.evidence[shape.index(b, g, t)];
      grid.set(b, g, t, draw(logit, rng[g]));
    }
  }
}

std::vector<LatentGrid> run_chain(const LatentGrid& init,
                                  const GibbsModel& model,
                                  const ChainSchedule& schedule) {
  validate(schedule);
  LatentGrid grid = init;
  GeneStreams rng(schedule.seed, grid.shape().genes);
  for (int i = 0; i < schedule.burn_in; ++i) gibbs_sweep(grid, model, rng);
  std::vector<LatentGrid> samples;
  samples.reserve(schedule.kept);
  for (int i = 0; i < schedule.kept; ++i) {
    gibbs_sweep(grid, model, rng);
    samples.push_back(grid);
  }
  return samples;
}

ChainSummary run_chain_summary(const LatentGrid& init, const GibbsModel& model,
                               const ChainSchedule& schedule,
                               bool collect_stats) {
  validate(schedule);
  check_model(init, model);
  const LatticeShape& shape = init.shape();
  ChainSummary out;
  out.last = init;
  out.marginals.shape = shape;
  out.marginals.samples = static_cast<std::size_t>(schedule.kept);
  out.marginals.prob_one.assign(shape.cells(), 0.0);
  if (collect_stats) out.stats = PseudoStats(model.topology);
  GeneStreams rng(schedule.seed, shape.genes);
  const std::size_t per_gene = shape.cells_per_gene();
  LatentGrid& grid = out.last;

#pragma omp parallel
  {
    SpinSums sums(model.topology);
    PseudoStats local = collect_stats ? PseudoStats(model.topology) : PseudoStats();
#pragma omp for schedule(dynamic, 1)
    for (int g = 0; g < shape.genes; ++g) {
      for (int i = 0; i < schedule.burn_in; ++i) {
        sweep_gene(grid, g, model, rng[g], sums);
      }
      const std::size_t off = static_cast<std::size_t>(g) * per_gene;
      for (int i = 0; i < schedule.kept; ++i) {
        sweep_gene(grid, g, model, rng[g], sums);
        for (std::size_t c = off; c < off + per_gene; ++c) {
          out.marginals.prob_one[c] += grid.at(c);
        }
        if (collect_stats) accumulate_gene(grid, g, model.topology, sums, local);
      }
    }
    if (collect_stats) {
#pragma omp critical(stmrf_chain_merge)
      out.stats.merge(local);
    }
  }
  if (collect_stats) out.stats.set_samples(static_cast<std::size_t>(schedule.kept));
  const double inv = 1.0 / static_cast<double>(schedule.kept);
  for (std::size_t c = 0; c < shape.cells(); ++c) {
    out.marginals.prob_one[c] = grid.masked_at(c)
                                    ? std::numeric_limits<double>::quiet_NaN()
                                    : out.marginals.prob_one[c] * inv;
  }
  return out;
}

PosteriorGrid posterior_marginals(const LatentGrid& init,
                                  const GibbsModel& model,
                                  const ChainSchedule& schedule) {
  return run_chain_summary(init, model, schedule, false).marginals;
}

}  // namespace stmrf
