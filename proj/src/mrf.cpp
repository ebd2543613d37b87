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

#include "stmrf/mrf.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "stmrf/error.hpp"

namespace stmrf {

std::vector<double> to_coefficients(const MrfParams& p) {
  return {p.gamma, p.beta_spatial, p.beta_temporal};
}

std::vector<double> to_coefficients(const DeMrfParams& p) {
  return {p.gamma_de, p.beta_cc, p.beta_nn, p.beta_cn, p.beta_t};
}

MrfParams to_mrf_params(std::span<const double> coef) {
  if (coef.size() != 3) throw std::invalid_argument("expected 3 coefficients");
  return {coef[0], coef[1], coef[2]};
}

DeMrfParams to_de_params(std::span<const double> coef,
                         std::vector<RegionGroup> groups) {
  if (coef.size() != 5) throw std::invalid_argument("expected 5 coefficients");
  return {coef[0], coef[1], coef[2], coef[3], coef[4], std::move(groups)};
}

MrfTopology MrfTopology::expression(const LatticeShape& shape) {
  validate(shape);
  if (shape.regions > 128) throw InputError("at most 128 regions supported");
  MrfTopology topo;
  topo.kind_ = ModelKind::expression;
  topo.shape_ = shape;
  topo.num_groups_ = 1;
  topo.region_group_.assign(shape.regions, 0);
  topo.group_size_ = {shape.regions, 0};
  return topo;
}

MrfTopology MrfTopology::differential(const LatticeShape& shape,
                                      std::span<const RegionGroup> groups) {
  validate(shape);
  if (shape.regions > 128) throw InputError("at most 128 regions supported");
  if (groups.size() != static_cast<std::size_t>(shape.regions)) {
    throw InputError("region group labels (" + std::to_string(groups.size()) +
                     ") do not match region count (" +
                     std::to_string(shape.regions) + ")");
  }
  MrfTopology topo;
  topo.kind_ = ModelKind::differential;
  topo.shape_ = shape;
  topo.num_groups_ = 2;
  topo.region_group_.resize(groups.size());
  for (std::size_t b = 0; b < groups.size(); ++b) {
    topo.region_group_[b] = static_cast<std::uint8_t>(groups[b]);
    ++topo.group_size_[topo.region_group_[b]];
  }
  return topo;
}

int MrfTopology::same_slot(int group) const {
  if (kind_ == ModelKind::expression) return 1;
  return group == 0 ? 1 : 2;
}

int MrfTopology::spatial_slot(int region_a, int region_b) const {
  const int ga = region_group_[region_a];
  const int gb = region_group_[region_b];
  return ga == gb ? same_slot(ga) : cross_slot();
}

CellSummary MrfTopology::summarize(const LatentGrid& grid, int b, int g,
                                   int t) const {
  CellSummary s;
  s.group = region_group_[b];
  for (int b2 = 0; b2 < shape_.regions; ++b2) {
    if (b2 == b || grid.masked(b2, g, t)) continue;
    const int spin = 2 * grid.state(b2, g, t) - 1;
    if (region_group_[b2] == s.group) {
      s.same += spin;
    } else {
      s.cross += spin;
    }
  }
  if (t > 0 && !grid.masked(b, g, t - 1)) s.temporal += 2 * grid.state(b, g, t - 1) - 1;
  if (t + 1 < shape_.periods && !grid.masked(b, g, t + 1)) {
    s.temporal += 2 * grid.state(b, g, t + 1) - 1;
  }
  return s;
}

Features MrfTopology::features(const CellSummary& s) const {
  Features f{};
  f[0] = 1.0;
  f[same_slot(s.group)] += s.same;
  if (cross_slot() >= 0) f[cross_slot()] += s.cross;
  f[temporal_slot()] += s.temporal;
  return f;
}

double MrfTopology::logit(const CellSummary& s,
                          std::span<const double> coef) const {
  const Features f = features(s);
  double F = 0.0;
  for (int i = 0; i < num_coefficients(); ++i) F += coef[i] * f[i];
  return F;
}

namespace {

void check_cell(const LatentGrid& grid, const Cell& c) {
  if (!grid.shape().contains(c.region, c.gene, c.time)) {
    throw std::out_of_range("cell (" + std::to_string(c.region) + "," +
                            std::to_string(c.gene) + "," +
                            std::to_string(c.time) + ") outside lattice");
  }
}

}  // namespace

double conditional_logit_expr(const LatentGrid& grid, const Cell& cell,
                              const MrfParams& phi) {
  check_cell(grid, cell);
  const auto topo = MrfTopology::expression(grid.shape());
  const auto coef = to_coefficients(phi);
  return topo.logit(topo.summarize(grid, cell.region, cell.gene, cell.time),
                    coef);
}

double conditional_logit_de(const LatentGrid& grid, const Cell& cell,
                            const DeMrfParams& phi) {
  check_cell(grid, cell);
  if (grid.masked(cell.region, cell.gene, cell.time)) {
    throw std::invalid_argument("conditional of a masked cell is undefined");
  }
  const auto topo = MrfTopology::differential(grid.shape(), phi.groups);
  const auto coef = to_coefficients(phi);
  return topo.logit(topo.summarize(grid, cell.region, cell.gene, cell.time),
                    coef);
}

double log1p_exp(double x) {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

double joint_log_potential(const LatentGrid& grid, int gene,
                           const MrfTopology& topo,
                           std::span<const double> coef) {
  const LatticeShape& shape = grid.shape();
  double value = 0.0;
  for (int b = 0; b < shape.regions; ++b) {
    for (int t = 0; t < shape.periods; ++t) {
      if (!grid.masked(b, gene, t) && grid.state(b, gene, t)) value += coef[0];
    }
  }
  const EdgeSets edges = build_edges(shape, gene);
  auto agree = [&](const Edge& e) {
    if (grid.masked(e.a.region, gene, e.a.time) ||
        grid.masked(e.b.region, gene, e.b.time)) {
      return false;
    }
    return grid.state(e.a.region, gene, e.a.time) ==
           grid.state(e.b.region, gene, e.b.time);
  };
  for (const Edge& e : edges.spatial) {
    if (agree(e)) value += coef[topo.spatial_slot(e.a.region, e.b.region)];
  }
  for (const Edge& e : edges.temporal) {
    if (agree(e)) value += coef[topo.temporal_slot()];
  }
  return value;
}

PseudoLikelihood log_pseudolikelihood(const LatentGrid& grid,
                                      const MrfTopology& topo,
                                      std::span<const double> coef) {
  const LatticeShape& shape = grid.shape();
  const int k = topo.num_coefficients();
  PseudoLikelihood out;
  out.gradient.assign(k, 0.0);
  for (int g = 0; g < shape.genes; ++g) {
    for (int b = 0; b < shape.regions; ++b) {
      for (int t = 0; t < shape.periods; ++t) {
        if (grid.masked(b, g, t)) continue;
        const CellSummary s = topo.summarize(grid, b, g, t);
        const Features f = topo.features(s);
        const double F = topo.logit(s, coef);
        const int x = grid.state(b, g, t);
        out.value += x * F - log1p_exp(F);
        const double resid = x - conditional_prob(F);
        for (int i = 0; i < k; ++i) out.gradient[i] += resid * f[i];
      }
    }
  }
  return out;
}

PseudoLikelihood log_pseudolikelihood(const LatentGrid& grid,
                                      const MrfParams& phi) {
  return log_pseudolikelihood(grid, MrfTopology::expression(grid.shape()),
                              to_coefficients(phi));
}

PseudoLikelihood log_pseudolikelihood(const LatentGrid& grid,
                                      const DeMrfParams& phi) {
  return log_pseudolikelihood(
      grid, MrfTopology::differential(grid.shape(), phi.groups),
      to_coefficients(phi));
}

// Bins: state x group x same x cross x temporal, with sums offset by
// regions - 1 (spatial) and 2 (temporal).
PseudoStats::PseudoStats(const MrfTopology& topo)
    : topo_(topo), span_(2 * topo.shape().regions - 1) {
  counts_.assign(static_cast<std::size_t>(2) * topo.num_groups() * span_ *
                     span_ * 5,
                 0.0);
}

std::size_t PseudoStats::bin(std::uint8_t state, const CellSummary& s) const {
  const int r = topo_.shape().regions - 1;
  std::size_t i = state;
  i = i * topo_.num_groups() + s.group;
  i = i * span_ + (s.same + r);
  i = i * span_ + (s.cross + r);
  i = i * 5 + (s.temporal + 2);
  return i;
}

void PseudoStats::add(std::uint8_t state, const CellSummary& s, double count) {
  counts_[bin(state, s)] += count;
}

void PseudoStats::add_gene(const LatentGrid& grid, int gene) {
  const LatticeShape& shape = grid.shape();
  for (int b = 0; b < shape.regions; ++b) {
    for (int t = 0; t < shape.periods; ++t) {
      if (grid.masked(b, gene, t)) continue;
      add(grid.state(b, gene, t), topo_.summarize(grid, b, gene, t));
    }
  }
}

void PseudoStats::add_grid(const LatentGrid& grid) {
  for (int g = 0; g < grid.shape().genes; ++g) add_gene(grid, g);
}

void PseudoStats::merge(const PseudoStats& other) {
  if (counts_.empty()) {
    *this = other;
    return;
  }
  if (other.counts_.size() != counts_.size()) {
    throw std::invalid_argument("merging statistics of different topologies");
  }
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  samples_ += other.samples_;
}

bool PseudoStats::empty() const {
  for (double c : counts_) {
    if (c != 0.0) return false;
  }
  return true;
}

PseudoStats::Evaluation PseudoStats::evaluate(std::span<const double> coef,
                                              bool with_hessian) const {
  const int k = topo_.num_coefficients();
  const int r = topo_.shape().regions - 1;
  Evaluation ev;
  ev.gradient.assign(k, 0.0);
  if (with_hessian) ev.hessian.assign(static_cast<std::size_t>(k) * k, 0.0);
  std::size_t i = 0;
  for (int state = 0; state < 2; ++state) {
    for (int group = 0; group < topo_.num_groups(); ++group) {
      for (int same = -r; same <= r; ++same) {
        for (int cross = -r; cross <= r; ++cross) {
          for (int temporal = -2; temporal <= 2; ++temporal, ++i) {
            const double n = counts_[i];
            if (n == 0.0) continue;
            const CellSummary s{group, same, cross, temporal};
            const Features f = topo_.features(s);
            const double F = topo_.logit(s, coef);
            const double p = conditional_prob(F);
            ev.value += n * (state * F - log1p_exp(F));
            const double resid = n * (state - p);
            for (int a = 0; a < k; ++a) ev.gradient[a] += resid * f[a];
            if (with_hessian) {
              const double w = n * p * (1.0 - p);
              for (int a = 0; a < k; ++a) {
                for (int c = 0; c < k; ++c) {
                  ev.hessian[a * k + c] -= w * f[a] * f[c];
                }
              }
            }
          }
        }
      }
    }
  }
  const double m = samples_ == 0 ? 1.0 : static_cast<double>(samples_);
  ev.value /= m;
  for (double& g : ev.gradient) g /= m;
  for (double& h : ev.hessian) h /= m;
  return ev;
}

}  // namespace stmrf
