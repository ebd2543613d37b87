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
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stmrf/de.hpp"
#include "stmrf/emission.hpp"
#include "stmrf/lattice.hpp"
#include "stmrf/mcem.hpp"
#include "stmrf/mrf.hpp"

namespace stmrf {

enum class SimSetting { expr1, expr2, de1, de2, de3 };

std::string to_string(SimSetting s);
/// Accepts "expr-1", "expr-2", "de-1", "de-2", "de-3".
SimSetting parse_setting(const std::string& name);
bool is_expression_setting(SimSetting s);

/// First 11 regions neocortex, the remaining ones non-neocortex.
std::vector<RegionGroup> default_region_groups(int regions);

/// Generation protocol and parameters of one simulation setting.
struct SimSpec {
  SimSetting setting = SimSetting::expr1;
  LatticeShape shape{16, 100, 13};
  int replicates = 3;
  int gibbs_rounds = 3;

  // Expression settings.
  MrfParams phi{0.08, 0.20, 1.5};
  double mu1 = 4.5;
  double sigma1 = 0.75;
  double mu2 = 8.0;
  double sigma2 = 1.5;
  double sigma0_sq = 0.25;
  double transition = 0.1;  // expr-2 per-period switching probability
  double flip = 0.1;        // expr-2 flipped proportion; de-3 perturbation

  // DE settings (shape.periods counts transition slots).
  DeMrfParams phi_de{-0.10, 0.31, 0.52, 0.06, 0.14, {}};
  double de_start = 0.4;
  double masked_genes = 0.1;
  double de_shift = 2.0;
  double de3_start = 0.15;
  double de3_churn = 0.7;
  double de3_group_switch = 0.4;

  /// Spec with the defaults for `setting` (DE settings use 12 slots and the
  /// 11/5 region grouping).
  static SimSpec defaults(SimSetting setting);
};

void validate(const SimSpec& spec);

struct SimData {
  LatentGrid truth;
  std::optional<ExpressionTensor> expression;
  std::optional<ZScoreGrid> z;
};

/// Deterministic in (spec, seed).
SimData simulate(const SimSpec& spec, std::uint64_t seed);

/// Fraction of unmasked cells where the grids differ. Throws InputError on
/// shape or mask mismatch.
double misclassification_rate(const LatentGrid& estimate, const LatentGrid& truth);

struct RocPoint {
  double threshold = 0.0;
  double sensitivity = 0.0;
  double specificity = 1.0;
};

struct RocCurve {
  std::vector<RocPoint> points;
  double auc = 0.0;
};

/// ROC of "call state 1 when null probability <= threshold" over the cells
/// of `truth` that are unmasked, have a finite null probability, and lie in
/// `group` (-1 for all regions). Throws InputError if the selection has no
/// positives or no negatives.
RocCurve roc_curve(std::span<const double> null_prob, const LatentGrid& truth,
                   int group = -1,
                   std::span<const RegionGroup> groups = {});

/// Mean sensitivity at `grid_points` equally spaced specificities in [0, 1].
std::vector<RocPoint> average_roc(std::span<const RocCurve> curves,
                                  int grid_points = 101);

struct CompareOptions {
  McemConfig mcem = McemConfig::single_stage(5, 200, 600);
  ChainSchedule posterior{200, 1000, 0};
  LocalFdrOptions fdr;
  int runs = 100;
  std::uint64_t seed = 1;
};

struct MethodSummary {
  std::string method;
  std::string metric;
  double mean = 0.0;
  double sd = 0.0;
  std::vector<double> values;
};

struct RocSummary {
  std::string method;
  std::string group;
  std::vector<RocPoint> points;
};

struct CompareResult {
  SimSetting setting = SimSetting::expr1;
  std::vector<MethodSummary> rows;
  std::vector<RocSummary> curves;
};

/// Summarizes a set of per-run values (sample sd, n - 1).
MethodSummary summarize(std::string method, std::string metric,
                        std::vector<double> values);

/// Outcome of one simulated run for every method.
struct RunOutcome {
  // Expression: misclassification of plain mixture and MRF.
  double plain = 0.0;
  double mrf = 0.0;
  // DE: AUC per method and group (0 = neocortex, 1 = non-neocortex).
  double eb_auc[2] = {0.0, 0.0};
  double mrf_auc[2] = {0.0, 0.0};
  RocCurve eb_roc[2];
  RocCurve mrf_roc[2];
  std::vector<double> coefficients;
};

RunOutcome run_once(const SimSpec& spec, const CompareOptions& options,
                    std::uint64_t run_seed);

/// Independent seeded runs comparing the MRF with the uncoupled baseline
/// (plain mixture for expression settings, empirical Bayes for DE).
CompareResult compare_models(const SimSpec& spec, const CompareOptions& options);

}  // namespace stmrf
