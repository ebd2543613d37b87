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

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "stmrf/emission.hpp"
#include "stmrf/lattice.hpp"
#include "stmrf/mrf.hpp"
#include "stmrf/sampler.hpp"

namespace stmrf {

/// z-scores of adjacent-period changes: one slot per transition t -> t+1.
/// Masked cells carry NaN.
struct ZScoreGrid {
  LatticeShape shape{};  // periods = number of transition slots
  std::vector<double> z;
  std::vector<std::uint8_t> mask;
  std::vector<int> df;  // per (region, slot), region-major; 0 if untested
  std::vector<RegionGroup> groups;

  bool masked(std::size_t i) const { return mask[i] != 0; }
  std::vector<double> pooled() const;
  /// All-zero latent grid carrying this mask.
  LatentGrid latent_grid() const;
};

struct TTest {
  double t = 0.0;
  int df = 0;
};

/// Pooled-variance two-sample t for the change from `prev` to `curr`.
/// Throws InputError when either side is empty or n1 + n2 < 3, and
/// NumericalError when the pooled variance is zero.
TTest t_statistic(std::span<const double> prev, std::span<const double> curr);

inline constexpr double kZClamp = 8.0;

/// Phi^{-1}(F_df(t)), clamped to +-8 where F_df(t) is within 1e-15 of 0 or 1.
double t_to_z(double t, int df);

struct MaskedCell {
  Cell cell;
  std::string reason;
};

/// Tests every transition whose gene is expressed in both adjacent periods
/// of the region. Untestable cells are masked and listed in `log`.
ZScoreGrid build_zscore_grid(const ExpressionTensor& data,
                             const LatentGrid& expressed,
                             std::vector<MaskedCell>* log = nullptr);

/// Two-group local fdr model with null N(0, 1). f and f1 are tabulated on
/// `grid` and linearly interpolated; values outside the grid take the
/// nearest endpoint.
struct LocalFdrModel {
  std::vector<double> grid;
  std::vector<double> f;
  std::vector<double> f1;
  double p0 = 1.0;
  bool null_only = false;

  double f0(double z) const;
  double marginal(double z) const;
  double nonnull(double z) const;
};

struct LocalFdrOptions {
  int bins = 120;
  int spline_df = 7;
  int table_points = 1201;
};

/// Lindsey's method: Poisson regression of histogram counts on a natural
/// cubic spline basis, then central matching p0 = min(1, f(0) / f0(0)).
/// Throws InputError for fewer than 100 values.
LocalFdrModel fit_local_fdr(std::span<const double> z,
                            const LocalFdrOptions& options = {});

/// p0 f0(z) / f(z), capped at 1.
double eb_posterior(double z, const LocalFdrModel& model);

struct FdrResult {
  std::size_t k = 0;
  double cutoff = 0.0;               // largest rejected q; NaN when k = 0
  std::vector<std::size_t> rejected;  // input indices, ascending q
};

/// Rejects the k smallest q whose running mean stays <= alpha.
FdrResult fdr_threshold(std::span<const double> q, double alpha);

struct Enrichment {
  int observed = 0;
  int set_size = 0;
  double expected = 0.0;
  double fold_change = 0.0;
  double p_value = 1.0;
  bool degenerate = false;
};

/// Upper-tail binomial test of the DE count in `gene_set` (indices into
/// `calls`) against `background_rate`.
Enrichment gene_set_enrichment(std::span<const std::uint8_t> calls,
                               std::span<const int> gene_set,
                               double background_rate);

/// Gibbs target with evidence log f1(z) - log f0(z).
GibbsModel de_gibbs_model(const DeMrfParams& phi, const LocalFdrModel& model,
                          const ZScoreGrid& z);

/// Empirical Bayes states: 1 where 1 - eb_posterior >= 0.5.
LatentGrid eb_states(const ZScoreGrid& z, const LocalFdrModel& model);

/// eb_posterior per cell (NaN for masked cells).
std::vector<double> eb_local_fdr(const ZScoreGrid& z, const LocalFdrModel& model);

}  // namespace stmrf
