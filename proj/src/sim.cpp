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

#include "stmrf/sim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>

#include "stmrf/error.hpp"
#include "stmrf/rng.hpp"
#include "stmrf/sampler.hpp"

namespace stmrf {

std::string to_string(SimSetting s) {
  switch (s) {
    case SimSetting::expr1: return "expr-1";
    case SimSetting::expr2: return "expr-2";
    case SimSetting::de1: return "de-1";
    case SimSetting::de2: return "de-2";
    case SimSetting::de3: return "de-3";
  }
  return "unknown";
}

SimSetting parse_setting(const std::string& name) {
  for (SimSetting s : {SimSetting::expr1, SimSetting::expr2, SimSetting::de1,
                       SimSetting::de2, SimSetting::de3}) {
    if (to_string(s) == name) return s;
  }
  throw InputError("unknown simulation setting '" + name +
                   "' (expected expr-1, expr-2, de-1, de-2 or de-3)");
}

bool is_expression_setting(SimSetting s) {
  return s == SimSetting::expr1 || s == SimSetting::expr2;
}

std::vector<RegionGroup> default_region_groups(int regions) {
  std::vector<RegionGroup> g(regions, RegionGroup::neocortex);
  for (int b = 11; b < regions; ++b) g[b] = RegionGroup::non_neocortex;
  return g;
}

SimSpec SimSpec::defaults(SimSetting setting) {
  SimSpec spec;
  spec.setting = setting;
  if (!is_expression_setting(setting)) spec.shape = {16, 100, 12};
  spec.phi_de.groups = default_region_groups(spec.shape.regions);
  return spec;
}

void validate(const SimSpec& spec) {
  validate(spec.shape);
  auto proportion = [](double p, const char* what) {
    if (!(p >= 0.0 && p <= 1.0)) {
      throw InputError(std::string(what) + " must lie in [0, 1]");
    }
  };
  proportion(spec.transition, "transition probability");
  proportion(spec.flip, "flip proportion");
  proportion(spec.de_start, "initial DE probability");
  proportion(spec.masked_genes, "masked gene proportion");
  proportion(spec.de3_start, "de-3 initial DE probability");
  proportion(spec.de3_churn, "de-3 churn");
  proportion(spec.de3_group_switch, "de-3 group switch");
  if (spec.replicates < 1) throw InputError("replicates must be >= 1");
  if (spec.gibbs_rounds < 0) throw InputError("gibbs rounds must be >= 0");
  for (double v : {spec.phi.gamma, spec.phi.beta_spatial, spec.phi.beta_temporal, spec.mu1,
                   spec.sigma1, spec.mu2, spec.sigma2, spec.sigma0_sq, spec.de_shift}) {
    if (!std::isfinite(v)) throw InputError("simulation parameters must be finite");
  }
  if (spec.sigma1 < 0 || spec.sigma2 < 0 || spec.sigma0_sq < 0) {
    throw InputError("simulation spreads must be nonnegative");
  }
  if (is_expression_setting(spec.setting)) {
    if (spec.shape.periods < 2) throw InputError("expression settings need T >= 2");
  } else {
    if (spec.shape.periods < 1) throw InputError("DE settings need at least one slot");
    if (spec.setting == SimSetting::de2 && spec.replicates < 2) {
      throw InputError("de-2 needs at least two replicates per period");
    }
    if (!spec.phi_de.groups.empty() &&
        spec.phi_de.groups.size() != static_cast<std::size_t>(spec.shape.regions)) {
      throw InputError("region groups do not match region count");
    }
  }
}

namespace {

enum : std::uint64_t { kTagStates = 1, kTagGibbs = 2, kTagValues = 3, kTagMask = 4 };

std::vector<RegionGroup> spec_groups(const SimSpec& spec) {
  return spec.phi_de.groups.empty() ? default_region_groups(spec.shape.regions)
                                    : spec.phi_de.groups;
}

// Picks k distinct indices from `pool`.
std::vector<int> choose(std::vector<int> pool, std::size_t k, Engine& rng) {
  k = std::min(k, pool.size());
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(k);
  return pool;
}

std::size_t rounded(double x) { return static_cast<std::size_t>(std::llround(x)); }

void run_prior_gibbs(LatentGrid& grid, const MrfTopology& topo,
                     std::vector<double> coef, int rounds, std::uint64_t seed) {
  const GibbsModel model = prior_model(topo, std::move(coef));
  GeneStreams streams(seed, grid.shape().genes, kTagGibbs);
  for (int r = 0; r < rounds; ++r) gibbs_sweep(grid, model, streams);
}

ExpressionTensor expression_values(const SimSpec& spec, const LatentGrid& states,
                                   Engine& rng) {
  const LatticeShape& shape = spec.shape;
  ExpressionTensor data(shape, std::vector<int>(
                                   static_cast<std::size_t>(shape.regions) * shape.periods,
                                   spec.replicates));
  std::normal_distribution<double> unit(0.0, 1.0);
  const double sd0 = std::sqrt(spec.sigma0_sq);
  for (int g = 0; g < shape.genes; ++g) {
    for (int b = 0; b < shape.regions; ++b) {
      for (int t = 0; t < shape.periods; ++t) {
        const bool on = states.state(b, g, t);
        const double mu = on ? spec.mu2 + spec.sigma2 * unit(rng)
                             : spec.mu1 + spec.sigma1 * unit(rng);
        for (double& y : data.values(b, g, t)) y = mu + sd0 * unit(rng);
      }
    }
  }
  return data;
}

// Masks a random prefix or suffix of slots, in all regions, for a random
// subset of genes.
void mask_genes(LatentGrid& grid, double proportion, Engine& rng) {
  const LatticeShape& shape = grid.shape();
  std::vector<int> genes(shape.genes);
  std::iota(genes.begin(), genes.end(), 0);
  const auto picked = choose(genes, rounded(proportion * shape.genes), rng);
  std::uniform_int_distribution<int> cut(0, shape.periods - 1);
  std::bernoulli_distribution prefix(0.5);
  for (int g : picked) {
    const int t = cut(rng);
    const bool head = prefix(rng);
    for (int b = 0; b < shape.regions; ++b) {
      for (int s = 0; s < shape.periods; ++s) {
        if (head ? s <= t : s >= t) {
          grid.set(b, g, s, 0);
          grid.set_masked(b, g, s, true);
        }
      }
    }
  }
}

ZScoreGrid mixture_z(const LatentGrid& truth, const SimSpec& spec, Engine& rng) {
  ZScoreGrid z;
  z.shape = truth.shape();
  z.groups = spec_groups(spec);
  z.z.assign(z.shape.cells(), std::numeric_limits<double>::quiet_NaN());
  z.mask.assign(z.shape.cells(), 0);
  z.df.assign(static_cast<std::size_t>(z.shape.regions) * z.shape.periods, 0);
  std::normal_distribution<double> unit(0.0, 1.0);
  std::bernoulli_distribution up(0.5);
  for (std::size_t i = 0; i < z.z.size(); ++i) {
    if (truth.masked_at(i)) {
      z.mask[i] = 1;
      continue;
    }
    double mean = 0.0;
    if (truth.at(i)) mean = up(rng) ? spec.de_shift : -spec.de_shift;
    z.z[i] = mean + unit(rng);
  }
  return z;
}

LatentGrid de_states_gibbs(const SimSpec& spec, std::uint64_t seed) {
  Engine rng = make_stream(seed, {kTagStates});
  LatentGrid grid(spec.shape);
  std::bernoulli_distribution start(spec.de_start);
  for (std::size_t i = 0; i < grid.shape().cells(); ++i) grid.set_at(i, start(rng));
  Engine mask_rng = make_stream(seed, {kTagMask});
  mask_genes(grid, spec.masked_genes, mask_rng);
  const auto groups = spec_groups(spec);
  DeMrfParams phi = spec.phi_de;
  phi.groups = groups;
  run_prior_gibbs(grid, MrfTopology::differential(spec.shape, groups), to_coefficients(phi),
                  spec.gibbs_rounds, seed);
  return grid;
}

LatentGrid de3_states(const SimSpec& spec, std::uint64_t seed) {
  const LatticeShape& shape = spec.shape;
  const auto groups = spec_groups(spec);
  Engine rng = make_stream(seed, {kTagStates});
  std::bernoulli_distribution start(spec.de3_start);

  // Gene-level pattern shared by the neocortex regions; the DE count stays
  // constant over slots.
  std::vector<std::vector<std::uint8_t>> base(shape.periods,
                                              std::vector<std::uint8_t>(shape.genes, 0));
  for (int g = 0; g < shape.genes; ++g) base[0][g] = start(rng);
  for (int t = 1; t < shape.periods; ++t) {
    base[t] = base[t - 1];
    std::vector<int> de, ee;
    for (int g = 0; g < shape.genes; ++g) (base[t - 1][g] ? de : ee).push_back(g);
    const std::size_t k = std::min(rounded(spec.de3_churn * de.size()), ee.size());
    for (int g : choose(de, k, rng)) base[t][g] = 0;
    for (int g : choose(ee, k, rng)) base[t][g] = 1;
  }
  // Non-neocortex pattern: a share of the DE genes switch to EE.
  auto other = base;
  for (int t = 0; t < shape.periods; ++t) {
    std::vector<int> de;
    for (int g = 0; g < shape.genes; ++g) {
      if (base[t][g]) de.push_back(g);
    }
    for (int g : choose(de, rounded(spec.de3_group_switch * de.size()), rng)) other[t][g] = 0;
  }
  LatentGrid grid(shape);
  for (int g = 0; g < shape.genes; ++g) {
    for (int b = 0; b < shape.regions; ++b) {
      const auto& pattern = groups[b] == RegionGroup::neocortex ? base : other;
      for (int t = 0; t < shape.periods; ++t) grid.set(b, g, t, pattern[t][g]);
    }
  }
  // Perturbation: swap equal numbers of DE and EE cells within each slot.
  for (int t = 0; t < shape.periods; ++t) {
    std::vector<int> de, ee;
    for (int g = 0; g < shape.genes; ++g) {
      for (int b = 0; b < shape.regions; ++b) {
        const int id = g * shape.regions + b;
        (grid.state(b, g, t) ? de : ee).push_back(id);
      }
    }
    const std::size_t k = std::min(rounded(spec.flip * de.size()), ee.size());
    for (int id : choose(de, k, rng)) grid.set(id % shape.regions, id / shape.regions, t, 0);
    for (int id : choose(ee, k, rng)) grid.set(id % shape.regions, id / shape.regions, t, 1);
  }
  Engine mask_rng = make_stream(seed, {kTagMask});
  mask_genes(grid, spec.masked_genes, mask_rng);
  return grid;
}

}  // namespace

SimData simulate(const SimSpec& spec, std::uint64_t seed) {
  validate(spec);
  const LatticeShape& shape = spec.shape;
  SimData out;
  Engine value_rng = make_stream(seed, {kTagValues});
  switch (spec.setting) {
    case SimSetting::expr1: {
      Engine rng = make_stream(seed, {kTagStates});
      LatentGrid grid(shape);
      std::bernoulli_distribution fair(0.5);
      for (std::size_t i = 0; i < shape.cells(); ++i) grid.set_at(i, fair(rng));
      run_prior_gibbs(grid, MrfTopology::expression(shape), to_coefficients(spec.phi),
                      spec.gibbs_rounds, seed);
      out.expression = expression_values(spec, grid, value_rng);
      out.truth = std::move(grid);
      break;
    }
    case SimSetting::expr2: {
      Engine rng = make_stream(seed, {kTagStates});
      LatentGrid grid(shape);
      std::bernoulli_distribution fair(0.5);
      std::bernoulli_distribution jump(spec.transition);
      for (int g = 0; g < shape.genes; ++g) {
        std::uint8_t s = fair(rng);
        for (int t = 0; t < shape.periods; ++t) {
          if (t > 0 && jump(rng)) s = 1 - s;
          for (int b = 0; b < shape.regions; ++b) grid.set(b, g, t, s);
        }
      }
      std::vector<int> cells(shape.cells());
      std::iota(cells.begin(), cells.end(), 0);
      for (int c : choose(cells, rounded(spec.flip * shape.cells()), rng)) {
        grid.set_at(c, 1 - grid.at(c));
      }
      out.expression = expression_values(spec, grid, value_rng);
      out.truth = std::move(grid);
      break;
    }
    case SimSetting::de1: {
      out.truth = de_states_gibbs(spec, seed);
      out.z = mixture_z(out.truth, spec, value_rng);
      break;
    }
    case SimSetting::de2: {
      out.truth = de_states_gibbs(spec, seed);
      const LatentGrid& s = out.truth;
      const LatticeShape periods{shape.regions, shape.genes, shape.periods + 1};
      ExpressionTensor data(periods, std::vector<int>(
                                         static_cast<std::size_t>(periods.regions) * periods.periods,
                                         spec.replicates));
      data.region_groups = spec_groups(spec);
      std::normal_distribution<double> unit(0.0, 1.0);
      const double sd0 = std::sqrt(spec.sigma0_sq);
      for (int g = 0; g < shape.genes; ++g) {
        for (int b = 0; b < shape.regions; ++b) {
          double mu = 0.0;
          for (int t = 0; t < periods.periods; ++t) {
            if (t > 0) {
              const double delta = unit(value_rng);
              if (!s.masked(b, g, t - 1) && s.state(b, g, t - 1)) mu += delta;
            }
            for (double& y : data.values(b, g, t)) y = mu + sd0 * unit(value_rng);
          }
        }
      }
      ZScoreGrid z;
      z.shape = shape;
      z.groups = spec_groups(spec);
      z.z.assign(shape.cells(), std::numeric_limits<double>::quiet_NaN());
      z.mask.assign(shape.cells(), 1);
      z.df.assign(static_cast<std::size_t>(shape.regions) * shape.periods, 2 * spec.replicates - 2);
      for (int g = 0; g < shape.genes; ++g) {
        for (int b = 0; b < shape.regions; ++b) {
          for (int t = 0; t < shape.periods; ++t) {
            if (s.masked(b, g, t)) continue;
            try {
              const TTest tt = t_statistic(data.values(b, g, t), data.values(b, g, t + 1));
              const std::size_t c = shape.index(b, g, t);
              z.z[c] = t_to_z(tt.t, tt.df);
              z.mask[c] = 0;
            } catch (const NumericalError&) {
            }
          }
        }
      }
      out.expression = std::move(data);
      out.z = std::move(z);
      break;
    }
    case SimSetting::de3: {
      out.truth = de3_states(spec, seed);
      out.z = mixture_z(out.truth, spec, value_rng);
      break;
    }
  }
  return out;
}

double misclassification_rate(const LatentGrid& estimate, const LatentGrid& truth) {
  if (!(estimate.shape() == truth.shape())) {
    throw InputError("misclassification: grids have different shapes");
  }
  std::size_t n = 0, wrong = 0;
  for (std::size_t i = 0; i < truth.shape().cells(); ++i) {
    if (estimate.masked_at(i) != truth.masked_at(i)) {
      throw InputError("misclassification: grids have different masks");
    }
    if (truth.masked_at(i)) continue;
    ++n;
    if (estimate.at(i) != truth.at(i)) ++wrong;
  }
  return n == 0 ? 0.0 : static_cast<double>(wrong) / static_cast<double>(n);
}

}  // namespace stmrf
