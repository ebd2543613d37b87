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

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "stmrf/lattice.hpp"

namespace stmrf {

/// Couplings of the expressed/unexpressed prior. gamma is the node bias of
/// state 1 relative to state 0.
struct MrfParams {
  double gamma = 0.0;
  double beta_spatial = 0.0;
  double beta_temporal = 0.0;
};

enum class RegionGroup : std::uint8_t { neocortex = 0, non_neocortex = 1 };

/// Couplings of the differential-expression prior. beta_cn is shared by
/// both directions of a cross-group edge.
struct DeMrfParams {
  double gamma_de = 0.0;
  double beta_cc = 0.0;
  double beta_nn = 0.0;
  double beta_cn = 0.0;
  double beta_t = 0.0;
  std::vector<RegionGroup> groups;
};

enum class ModelKind : std::uint8_t { expression, differential };

// Coefficient vectors are ordered (gamma, beta_spatial, beta_temporal) for
// the expression model and (gamma_de, beta_cc, beta_nn, beta_cn, beta_t)
// for the DE model.
std::vector<double> to_coefficients(const MrfParams& p);
std::vector<double> to_coefficients(const DeMrfParams& p);
MrfParams to_mrf_params(std::span<const double> coef);
DeMrfParams to_de_params(std::span<const double> coef,
                         std::vector<RegionGroup> groups);

/// Neighbor summary of one cell: its region group, the signed sum
/// sum(2s - 1) over unmasked same-group spatial neighbors, the same over
/// other-group spatial neighbors, and over unmasked temporal neighbors.
struct CellSummary {
  int group = 0;
  int same = 0;
  int cross = 0;
  int temporal = 0;
};

inline constexpr int kMaxCoefficients = 5;
using Features = std::array<double, kMaxCoefficients>;

/// Graph structure and coefficient layout shared by both models. The
/// conditional log-odds of a cell is linear in the coefficients:
/// F = coef . features(cell).
class MrfTopology {
 public:
  static MrfTopology expression(const LatticeShape& shape);
  static MrfTopology differential(const LatticeShape& shape,
                                  std::span<const RegionGroup> groups);

  ModelKind kind() const { return kind_; }
  const LatticeShape& shape() const { return shape_; }
  int num_coefficients() const { return kind_ == ModelKind::expression ? 3 : 5; }
  int num_groups() const { return num_groups_; }
  int group_of(int region) const { return region_group_[region]; }
  std::span<const std::uint8_t> region_groups() const { return region_group_; }
  int regions_in_group(int group) const { return group_size_[group]; }

  int same_slot(int group) const;
  int cross_slot() const { return kind_ == ModelKind::expression ? -1 : 3; }
  int temporal_slot() const { return kind_ == ModelKind::expression ? 2 : 4; }
  /// Coefficient index of the spatial edge between two regions.
  int spatial_slot(int region_a, int region_b) const;

  CellSummary summarize(const LatentGrid& grid, int b, int g, int t) const;
  Features features(const CellSummary& s) const;
  double logit(const CellSummary& s, std::span<const double> coef) const;

 private:
  ModelKind kind_ = ModelKind::expression;
  LatticeShape shape_{};
  int num_groups_ = 1;
  std::vector<std::uint8_t> region_group_;
  std::array<int, 2> group_size_{};
};

/// Conditional log-odds of x_bgt = 1 given the rest of the grid.
/// Throws std::out_of_range for a cell outside the lattice.
double conditional_logit_expr(const LatentGrid& grid, const Cell& cell,
                              const MrfParams& phi);

/// As above for the DE model. Throws std::invalid_argument if the target
/// cell is masked.
double conditional_logit_de(const LatentGrid& grid, const Cell& cell,
                            const DeMrfParams& phi);

/// Logistic function, stable for large |logit|.
inline double conditional_prob(double logit) {
  if (logit >= 0.0) return 1.0 / (1.0 + std::exp(-logit));
  const double e = std::exp(logit);
  return e / (1.0 + e);
}

/// log(1 + exp(x)) without overflow.
double log1p_exp(double x);

/// Unnormalized log-probability of one gene's states:
/// gamma * #{s = 1} + sum over edges of coupling * 1{endpoints agree}.
double joint_log_potential(const LatentGrid& grid, int gene,
                           const MrfTopology& topo,
                           std::span<const double> coef);

struct PseudoLikelihood {
  double value = 0.0;
  std::vector<double> gradient;
};

/// Direct cell-by-cell log-pseudolikelihood and its gradient.
PseudoLikelihood log_pseudolikelihood(const LatentGrid& grid,
                                      const MrfTopology& topo,
                                      std::span<const double> coef);

PseudoLikelihood log_pseudolikelihood(const LatentGrid& grid,
                                      const MrfParams& phi);
PseudoLikelihood log_pseudolikelihood(const LatentGrid& grid,
                                      const DeMrfParams& phi);

/// Sufficient statistics of the pseudolikelihood: counts of
/// (state, CellSummary) over any number of grids. The pseudolikelihood of
/// the accumulated grids, averaged over `samples()`, depends on them only
/// through these counts.
class PseudoStats {
 public:
  PseudoStats() = default;
  explicit PseudoStats(const MrfTopology& topo);

  void add(std::uint8_t state, const CellSummary& s, double count = 1.0);
  void add_grid(const LatentGrid& grid);
  void add_gene(const LatentGrid& grid, int gene);
  /// Marks the end of one Monte Carlo sample.
  void finish_sample() { ++samples_; }
  void set_samples(std::size_t m) { samples_ = m; }
  std::size_t samples() const { return samples_; }
  void merge(const PseudoStats& other);
  bool empty() const;

  struct Evaluation {
    double value = 0.0;
    std::vector<double> gradient;
    std::vector<double> hessian;  // row-major, num_coefficients^2
  };
  /// Averaged over samples (a zero sample count is treated as one).
  Evaluation evaluate(std::span<const double> coef, bool with_hessian = true) const;

  const MrfTopology& topology() const { return topo_; }

 private:
  std::size_t bin(std::uint8_t state, const CellSummary& s) const;

  MrfTopology topo_{};
  int span_ = 0;
  std::vector<double> counts_;
  std::size_t samples_ = 0;
};

}  // namespace stmrf
