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
#include <string>
#include <vector>

#include "stmrf/lattice.hpp"
#include "stmrf/mrf.hpp"

namespace stmrf {

/// Ragged region x gene x period x replicate array of log2 expression.
/// The replicate count n_bt depends on (region, period) only and may be 0
/// for an unsampled pair.
class ExpressionTensor {
 public:
  ExpressionTensor() = default;
  /// `replicates` holds n_bt region-major (index b * T + t).
  ExpressionTensor(LatticeShape shape, std::vector<int> replicates);

  const LatticeShape& shape() const { return shape_; }
  int replicates(int b, int t) const { return replicates_[b * shape_.periods + t]; }
  std::span<const int> replicate_counts() const { return replicates_; }

  std::span<const double> values(int b, int g, int t) const;
  std::span<double> values(int b, int g, int t);
  std::span<const double> all_values() const { return values_; }

  /// Mean over replicates; NaN when n_bt = 0.
  double cell_mean(int b, int g, int t) const;

  std::vector<std::string> region_names;
  std::vector<std::string> period_names;
  std::vector<std::string> gene_names;
  std::vector<RegionGroup> region_groups;

 private:
  std::size_t offset(int b, int g, int t) const {
    return static_cast<std::size_t>(g) * per_gene_ +
           prefix_[b * shape_.periods + t];
  }

  LatticeShape shape_{};
  std::vector<int> replicates_;
  std::vector<std::size_t> prefix_;
  std::size_t per_gene_ = 0;
  std::vector<double> values_;
};

/// How replicates of one cell combine in the emission density.
///  shared_mean: replicates share the latent cell mean mu_bgt, so the joint
///    density is the exact marginal N(ybar; mu_x, sigma_x^2 + sigma0^2 / n)
///    times a within-cell factor that does not depend on x.
///  independent: replicates treated as independent draws from
///    N(mu_x, sigma_x^2 + sigma0^2).
/// The two agree when a cell has one replicate.
enum class ReplicateModel { shared_mean, independent };

/// Per-region two-component emission parameters. Component 1 (index 0) is
/// the unexpressed state and always has the lower mean.
struct GmmEmissionParams {
  std::vector<double> mu1;
  std::vector<double> sigma1;
  std::vector<double> mu2;
  std::vector<double> sigma2;
  double sigma0 = 0.0;
  ReplicateModel replicates = ReplicateModel::shared_mean;

  int regions() const { return static_cast<int>(mu1.size()); }
  double mean(int region, int state) const { return state ? mu2[region] : mu1[region]; }
  double sd(int region, int state) const { return state ? sigma2[region] : sigma1[region]; }
};

inline constexpr double kVarianceFloor = 1e-6;

/// Pooled within-cell variance of replicates. Throws NumericalError when no
/// (region, period) has two or more replicates.
double estimate_replicate_variance(const ExpressionTensor& data);

/// log f(y | x = state) for the replicate vector of one cell, under
/// theta.replicates. With `independent` this is
/// sum_k log N(y_k; mu_x, sigma_x^2 + sigma0^2).
double log_emission(std::span<const double> y, int state,
                    const GmmEmissionParams& theta, int region);

/// log f(y | x = 1) - log f(y | x = 0) for every cell, in lattice order.
/// Cells without replicates get 0.
std::vector<double> emission_log_odds(const ExpressionTensor& data,
                                      const GmmEmissionParams& theta);

/// sum over cells of w * log f(y | 1) + (1 - w) * log f(y | 0).
double expected_emission_loglik(const ExpressionTensor& data,
                                const GmmEmissionParams& theta,
                                std::span<const double> weights);

struct PlainGmmFit {
  GmmEmissionParams params;
  std::vector<double> expressed_fraction;  // per region
  std::vector<double> posterior;           // P(x = 1 | y) per cell
  LatentGrid states;                       // posterior >= 0.5
  int restarts = 0;
  int iterations = 0;
};

/// Independent per-region two-component EM (no spatial or temporal
/// coupling). `sigma0_sq` is the replicate variance from
/// estimate_replicate_variance.
PlainGmmFit fit_plain_gmm(const ExpressionTensor& data, double sigma0_sq,
                          int max_iterations = 500, double tolerance = 1e-10);

struct ThetaUpdate {
  GmmEmissionParams params;
  /// Regions whose component kept its previous value, because its weight
  /// was empty or the label order would have been violated.
  std::vector<int> held_regions;
};

/// Weighted maximum-likelihood update of the per-region components; each
/// cell's weight is its frequency of x = 1. The component variance is the
/// weighted replicate variance minus sigma0^2, floored at kVarianceFloor.
ThetaUpdate update_theta_mle(const ExpressionTensor& data,
                             std::span<const double> weights,
                             const GmmEmissionParams& previous);

/// Same, with weights taken as the mean state over `samples`.
ThetaUpdate update_theta_mle(const ExpressionTensor& data,
                             std::span<const LatentGrid> samples,
                             const GmmEmissionParams& previous);

}  // namespace stmrf
