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
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "stmrf/de.hpp"
#include "stmrf/emission.hpp"
#include "stmrf/mrf.hpp"
#include "stmrf/sampler.hpp"

namespace stmrf {

/// `iterations` MCEM iterations, each E-step running `chain` (its seed is
/// ignored; per-iteration seeds derive from McemConfig::seed).
struct McemStage {
  int iterations = 1;
  ChainSchedule chain;
};

struct McemConfig {
  std::vector<McemStage> stages;
  double optimizer_tolerance = 1e-5;
  double convergence_tolerance = 1e-3;
  int convergence_window = 3;
  double bound = 10.0;
  std::uint64_t seed = 0;
  /// Holds every spatial/temporal coupling at 0; only the node bias moves.
  bool freeze_couplings = false;
  /// Emission replicate model for expression fits.
  ReplicateModel replicates = ReplicateModel::shared_mean;

  int total_iterations() const;

  /// 20 iterations each at 500/1500, 1000/6000 and 1000/10000
  /// (burn-in / total sweeps).
  static McemConfig staged_default();
  /// One stage of `iterations` at burn_in / total sweeps.
  static McemConfig single_stage(int iterations, int burn_in, int total);
};

void validate(const McemConfig& config);

struct McemIteration {
  int stage = 0;
  std::vector<double> coefficients;
  std::optional<GmmEmissionParams> theta;
  double q_before = 0.0;  // Q_m at the previous parameters
  double q_after = 0.0;   // Q_m at the updated parameters
  bool boundary = false;
};

struct McemState {
  ModelKind kind = ModelKind::expression;
  std::vector<double> coefficients;
  std::optional<GmmEmissionParams> theta;
  double sigma0_sq = 0.0;
  LatentGrid grid;
  std::vector<McemIteration> trace;
  int stable_iterations = 0;
  bool converged = false;
  std::uint64_t seed = 0;

  int completed() const { return static_cast<int>(trace.size()); }
};

struct CouplingFit {
  std::vector<double> coefficients;
  double value = 0.0;
  double gradient_norm = 0.0;
  bool boundary = false;
  int iterations = 0;
};

/// Projected Newton ascent with backtracking on the averaged
/// pseudolikelihood in `stats`, inside [-bound, bound]^k. `fixed` marks
/// coefficients held at their initial value. Throws NumericalError on a
/// non-finite objective.
CouplingFit maximize_couplings(const PseudoStats& stats,
                               std::span<const double> init, double bound,
                               double tolerance,
                               std::span<const std::uint8_t> fixed = {});

/// Monte Carlo Q: mean over samples of log-pseudolikelihood plus emission
/// log-likelihood.
double monte_carlo_q(std::span<const LatentGrid> samples, const MrfParams& phi,
                     const GmmEmissionParams& theta,
                     const ExpressionTensor& data);
double monte_carlo_q(std::span<const LatentGrid> samples,
                     const DeMrfParams& phi, const LocalFdrModel& densities,
                     const ZScoreGrid& z);

using IterationCallback = std::function<void(const McemState&)>;

struct ExpressionFit {
  MrfParams phi;
  GmmEmissionParams theta;
  McemState state;
  PlainGmmFit plain;
};

/// Full expression pipeline: replicate variance, plain mixture start,
/// pseudolikelihood start for the couplings, then the staged MCEM loop.
/// With `resume`, continues after resume->completed() iterations; chain
/// seeds then come from the resumed state, not from `config`.
ExpressionFit mcem_fit_expression(const ExpressionTensor& data,
                                  const McemConfig& config,
                                  const IterationCallback& on_iteration = {},
                                  const McemState* resume = nullptr);

struct DeFit {
  DeMrfParams phi;
  McemState state;
};

DeFit mcem_fit_de(const ZScoreGrid& z, const LocalFdrModel& densities,
                  const McemConfig& config,
                  const IterationCallback& on_iteration = {},
                  const McemState* resume = nullptr);

}  // namespace stmrf
