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

#include "stmrf/de.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

#include <boost/math/distributions/binomial.hpp>
#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

#include "stmrf/error.hpp"

namespace stmrf {

std::vector<double> ZScoreGrid::pooled() const {
  std::vector<double> out;
  out.reserve(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (!mask[i]) out.push_back(z[i]);
  }
  return out;
}

LatentGrid ZScoreGrid::latent_grid() const {
  LatentGrid grid(shape);
  grid.set_mask(mask);
  return grid;
}

TTest t_statistic(std::span<const double> prev, std::span<const double> curr) {
  const std::size_t n1 = prev.size();
  const std::size_t n2 = curr.size();
  if (n1 == 0 || n2 == 0 || n1 + n2 < 3) {
    throw InputError("t-test needs two nonempty samples with n1 + n2 >= 3");
  }
  auto mean = [](std::span<const double> v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  };
  const double m1 = mean(prev);
  const double m2 = mean(curr);
  double ss = 0.0;
  for (double v : prev) ss += (v - m1) * (v - m1);
  for (double v : curr) ss += (v - m2) * (v - m2);
  const int df = static_cast<int>(n1 + n2 - 2);
  const double pooled = ss / df;
  if (!(pooled > 0.0)) throw NumericalError("zero pooled variance");
  const double se = std::sqrt(pooled * (1.0 / n1 + 1.0 / n2));
  return {(m2 - m1) / se, df};
}

double t_to_z(double t, int df) {
  if (df < 1) throw std::invalid_argument("t_to_z needs df >= 1");
  if (std::isnan(t)) return t;
  if (t < 0.0) return -t_to_z(-t, df);
  if (t == 0.0) return 0.0;
  if (std::isinf(t)) return kZClamp;
  const boost::math::students_t dist(static_cast<double>(df));
  const double upper = boost::math::cdf(boost::math::complement(dist, t));
  if (upper <= 1e-15) return kZClamp;
  const boost::math::normal normal;
  const double z = boost::math::quantile(boost::math::complement(normal, upper));
  return std::min(z, kZClamp);
}

ZScoreGrid build_zscore_grid(const ExpressionTensor& data,
                             const LatentGrid& expressed,
                             std::vector<MaskedCell>* log) {
  const LatticeShape& shape = data.shape();
  if (!(expressed.shape() == shape)) {
    throw InputError("expression calls do not cover the data lattice");
  }
  if (shape.periods < 2) throw InputError("need at least two periods for transitions");
  ZScoreGrid out;
  out.shape = {shape.regions, shape.genes, shape.periods - 1};
  out.z.assign(out.shape.cells(), std::numeric_limits<double>::quiet_NaN());
  out.mask.assign(out.shape.cells(), 1);
  out.df.assign(static_cast<std::size_t>(shape.regions) * out.shape.periods, 0);
  out.groups = data.region_groups;
  if (out.groups.empty()) out.groups.assign(shape.regions, RegionGroup::neocortex);

  for (int b = 0; b < shape.regions; ++b) {
    for (int t = 0; t + 1 < shape.periods; ++t) {
      const int n1 = data.replicates(b, t);
      const int n2 = data.replicates(b, t + 1);
      if (n1 > 0 && n2 > 0 && n1 + n2 >= 3) {
        out.df[b * out.shape.periods + t] = n1 + n2 - 2;
      }
    }
  }

  std::vector<std::vector<MaskedCell>> notes(shape.genes);
#pragma omp parallel for schedule(static)
  for (int g = 0; g < shape.genes; ++g) {
    for (int b = 0; b < shape.regions; ++b) {
      for (int t = 0; t + 1 < shape.periods; ++t) {
        if (!expressed.state(b, g, t) || !expressed.state(b, g, t + 1)) continue;
        const std::size_t c = out.shape.index(b, g, t);
        if (out.df[b * out.shape.periods + t] == 0) {
          notes[g].push_back({{b, g, t}, "too few replicates"});
          continue;
        }
        try {
          const TTest tt = t_statistic(data.values(b, g, t), data.values(b, g, t + 1));
          out.z[c] = t_to_z(tt.t, tt.df);
          out.mask[c] = 0;
        } catch (const NumericalError&) {
          notes[g].push_back({{b, g, t}, "zero pooled variance"});
        }
      }
    }
  }
  if (log) {
    for (auto& n : notes) log->insert(log->end(), n.begin(), n.end());
  }
  return out;
}

double eb_posterior(double z, const LocalFdrModel& model) {
  if (model.null_only || model.p0 >= 1.0) return 1.0;
  const double f = model.marginal(z);
  if (!(f > 0.0)) return 1.0;
  return std::min(1.0, model.p0 * model.f0(z) / f);
}

FdrResult fdr_threshold(std::span<const double> q, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) {
    throw std::invalid_argument("alpha must lie in (0, 1)");
  }
  std::vector<std::size_t> order(q.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return q[a] < q[b]; });
  FdrResult out;
  out.cutoff = std::numeric_limits<double>::quiet_NaN();
  double running = 0.0;
  for (std::size_t t = 0; t < order.size(); ++t) {
    const double v = q[order[t]];
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("q values must lie in [0, 1]");
    running += v;
    if (running <= alpha * static_cast<double>(t + 1)) out.k = t + 1;
  }
  out.rejected.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(out.k));
  if (out.k > 0) out.cutoff = q[order[out.k - 1]];
  return out;
}

Enrichment gene_set_enrichment(std::span<const std::uint8_t> calls,
                               std::span<const int> gene_set,
                               double background_rate) {
  if (gene_set.empty()) throw std::invalid_argument("gene set is empty");
  if (!(background_rate >= 0.0 && background_rate <= 1.0)) {
    throw std::invalid_argument("background rate must lie in [0, 1]");
  }
  Enrichment out;
  out.set_size = static_cast<int>(gene_set.size());
  for (int g : gene_set) {
    if (g < 0 || static_cast<std::size_t>(g) >= calls.size()) {
      throw std::out_of_range("gene index " + std::to_string(g) + " out of range");
    }
    out.observed += calls[g] ? 1 : 0;
  }
  out.expected = out.set_size * background_rate;
  if (out.observed == 0) {
    out.fold_change = 0.0;
    out.p_value = 1.0;
    return out;
  }
  if (background_rate == 0.0) {
    out.fold_change = std::numeric_limits<double>::infinity();
    out.p_value = 0.0;
    out.degenerate = true;
    return out;
  }
  out.fold_change = out.observed / out.expected;
  if (background_rate == 1.0) {
    out.p_value = 1.0;
    return out;
  }
  const boost::math::binomial dist(out.set_size, background_rate);
  out.p_value = boost::math::cdf(boost::math::complement(dist, out.observed - 1));
  return out;
}

GibbsModel de_gibbs_model(const DeMrfParams& phi, const LocalFdrModel& model,
                          const ZScoreGrid& z) {
  GibbsModel gm{MrfTopology::differential(z.shape, phi.groups),
                to_coefficients(phi),
                std::vector<double>(z.shape.cells(), 0.0)};
  constexpr double kTiny = 1e-300;
  for (std::size_t i = 0; i < z.z.size(); ++i) {
    if (z.masked(i)) continue;
    const double f1 = model.null_only ? 0.0 : model.nonnull(z.z[i]);
    gm.evidence[i] = std::log(std::max(f1, kTiny)) - std::log(std::max(model.f0(z.z[i]), kTiny));
  }
  return gm;
}

LatentGrid eb_states(const ZScoreGrid& z, const LocalFdrModel& model) {
  LatentGrid grid = z.latent_grid();
  for (std::size_t i = 0; i < z.z.size(); ++i) {
    if (!z.masked(i)) grid.set_at(i, 1.0 - eb_posterior(z.z[i], model) >= 0.5);
  }
  return grid;
}

std::vector<double> eb_local_fdr(const ZScoreGrid& z, const LocalFdrModel& model) {
  std::vector<double> q(z.z.size(), std::numeric_limits<double>::quiet_NaN());
  for (std::size_t i = 0; i < z.z.size(); ++i) {
    if (!z.masked(i)) q[i] = eb_posterior(z.z[i], model);
  }
  return q;
}

}  // namespace stmrf
