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

#include <algorithm>
#include <cmath>
#include <numeric>

#include "stmrf/error.hpp"
#include "stmrf/rng.hpp"
#include "stmrf/sampler.hpp"
#include "stmrf/sim.hpp"

namespace stmrf {

RocCurve roc_curve(std::span<const double> null_prob, const LatentGrid& truth,
                   int group, std::span<const RegionGroup> groups) {
  const LatticeShape& shape = truth.shape();
  if (null_prob.size() != shape.cells()) {
    throw InputError("posterior and truth grids differ in size");
  }
  if (group >= 0 && groups.size() != static_cast<std::size_t>(shape.regions)) {
    throw InputError("group filter needs one label per region");
  }
  std::vector<std::pair<double, std::uint8_t>> cells;
  cells.reserve(shape.cells());
  for (int g = 0; g < shape.genes; ++g) {
    for (int b = 0; b < shape.regions; ++b) {
      if (group >= 0 && static_cast<int>(groups[b]) != group) continue;
      for (int t = 0; t < shape.periods; ++t) {
        const std::size_t i = shape.index(b, g, t);
        if (truth.masked_at(i) || std::isnan(null_prob[i])) continue;
        cells.emplace_back(null_prob[i], truth.at(i));
      }
    }
  }
  std::size_t pos = 0;
  for (const auto& c : cells) pos += c.second;
  const std::size_t neg = cells.size() - pos;
  if (pos == 0 || neg == 0) {
    throw InputError("ROC undefined: selection has no positives or no negatives");
  }
  std::sort(cells.begin(), cells.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });

  RocCurve curve;
  curve.points.push_back({-std::numeric_limits<double>::infinity(), 0.0, 1.0});
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < cells.size();) {
    const double threshold = cells[i].first;
    for (; i < cells.size() && cells[i].first == threshold; ++i) {
      (cells[i].second ? tp : fp) += 1;
    }
    curve.points.push_back({threshold, static_cast<double>(tp) / pos,
                            1.0 - static_cast<double>(fp) / neg});
  }
  for (std::size_t i = 1; i < curve.points.size(); ++i) {
    const RocPoint& a = curve.points[i - 1];
    const RocPoint& b = curve.points[i];
    curve.auc += (a.specificity - b.specificity) * 0.5 * (a.sensitivity + b.sensitivity);
  }
  return curve;
}

std::vector<RocPoint> average_roc(std::span<const RocCurve> curves, int grid_points) {
  if (grid_points < 2) throw std::invalid_argument("need at least two grid points");
  std::vector<RocPoint> out(grid_points);
  for (int i = 0; i < grid_points; ++i) {
    const double spec = 1.0 - static_cast<double>(i) / (grid_points - 1);
    double total = 0.0;
    for (const RocCurve& c : curves) {
      // Highest sensitivity reachable at specificity >= spec, linearly
      // interpolated along the curve.
      double sens = 0.0;
      const auto& p = c.points;
      for (std::size_t k = 0; k < p.size(); ++k) {
        if (p[k].specificity >= spec) {
          sens = std::max(sens, p[k].sensitivity);
        } else if (k > 0 && p[k - 1].specificity >= spec) {
          const double w = (p[k - 1].specificity - spec) /
                           (p[k - 1].specificity - p[k].specificity);
          sens = std::max(sens, p[k - 1].sensitivity +
                                    w * (p[k].sensitivity - p[k - 1].sensitivity));
        }
      }
      total += sens;
    }
    out[i] = {std::numeric_limits<double>::quiet_NaN(),
              curves.empty() ? 0.0 : total / static_cast<double>(curves.size()), spec};
  }
  return out;
}

MethodSummary summarize(std::string method, std::string metric,
                        std::vector<double> values) {
  MethodSummary s{std::move(method), std::move(metric), 0.0, 0.0, std::move(values)};
  const double n = static_cast<double>(s.values.size());
  if (s.values.empty()) return s;
  s.mean = std::accumulate(s.values.begin(), s.values.end(), 0.0) / n;
  if (s.values.size() > 1) {
    double ss = 0.0;
    for (double v : s.values) ss += (v - s.mean) * (v - s.mean);
    s.sd = std::sqrt(ss / (n - 1.0));
  }
  return s;
}

namespace {

constexpr std::uint64_t kTagRun = 0x52554e;

std::uint64_t derive(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  Engine e = make_stream(seed, {kTagRun, a, b});
  return e();
}

}  // namespace

RunOutcome run_once(const SimSpec& spec, const CompareOptions& options,
                    std::uint64_t run_seed) {
  RunOutcome out;
  const SimData data = simulate(spec, derive(run_seed, 0, 0));
  McemConfig mcem = options.mcem;
  mcem.seed = derive(run_seed, 1, 0);
  ChainSchedule posterior = options.posterior;
  posterior.seed = derive(run_seed, 2, 0);

  if (is_expression_setting(spec.setting)) {
    const ExpressionTensor& y = *data.expression;
    const ExpressionFit fit = mcem_fit_expression(y, mcem);
    const GibbsModel model{MrfTopology::expression(y.shape()), to_coefficients(fit.phi),
                           emission_log_odds(y, fit.theta)};
    const PosteriorGrid post = posterior_marginals(fit.state.grid, model, posterior);
    LatentGrid calls(y.shape());
    for (std::size_t i = 0; i < calls.shape().cells(); ++i) {
      calls.set_at(i, post.prob_one[i] >= 0.5);
    }
    out.plain = misclassification_rate(fit.plain.states, data.truth);
    out.mrf = misclassification_rate(calls, data.truth);
    out.coefficients = to_coefficients(fit.phi);
    return out;
  }

  const ZScoreGrid& z = *data.z;
  const LocalFdrModel densities = fit_local_fdr(z.pooled(), options.fdr);
  const std::vector<double> eb_q = eb_local_fdr(z, densities);
  const DeFit fit = mcem_fit_de(z, densities, mcem);
  const PosteriorGrid post =
      posterior_marginals(fit.state.grid, de_gibbs_model(fit.phi, densities, z), posterior);
  std::vector<double> mrf_q(post.prob_one.size());
  for (std::size_t i = 0; i < mrf_q.size(); ++i) mrf_q[i] = 1.0 - post.prob_one[i];
  // Cells masked in the z-grid but not in the truth (failed tests) are
  // excluded through the NaN null probability.
  for (int grp = 0; grp < 2; ++grp) {
    out.eb_roc[grp] = roc_curve(eb_q, data.truth, grp, z.groups);
    out.mrf_roc[grp] = roc_curve(mrf_q, data.truth, grp, z.groups);
    out.eb_auc[grp] = out.eb_roc[grp].auc;
    out.mrf_auc[grp] = out.mrf_roc[grp].auc;
  }
  out.coefficients = to_coefficients(fit.phi);
  return out;
}

CompareResult compare_models(const SimSpec& spec, const CompareOptions& options) {
  validate(spec);
  if (options.runs < 2) throw InputError("compare needs at least two runs");
  std::vector<RunOutcome> runs(options.runs);
  std::vector<std::string> failures(options.runs);
#pragma omp parallel for schedule(dynamic, 1)
  for (int r = 0; r < options.runs; ++r) {
    try {
      runs[r] = run_once(spec, options, derive(options.seed, 3, static_cast<std::uint64_t>(r)));
    } catch (const std::exception& e) {
      failures[r] = e.what();
    }
  }
  for (int r = 0; r < options.runs; ++r) {
    if (!failures[r].empty()) {
      throw NumericalError("run " + std::to_string(r) + " failed: " + failures[r]);
    }
  }

  CompareResult result;
  result.setting = spec.setting;
  if (is_expression_setting(spec.setting)) {
    std::vector<double> plain, mrf;
    for (const auto& r : runs) {
      plain.push_back(r.plain);
      mrf.push_back(r.mrf);
    }
    result.rows.push_back(summarize("plain", "misclassification", std::move(plain)));
    result.rows.push_back(summarize("mrf", "misclassification", std::move(mrf)));
    return result;
  }
  const char* group_names[2] = {"neocortex", "non_neocortex"};
  for (int grp = 0; grp < 2; ++grp) {
    std::vector<double> eb, mrf;
    std::vector<RocCurve> eb_curves, mrf_curves;
    for (const auto& r : runs) {
      eb.push_back(r.eb_auc[grp]);
      mrf.push_back(r.mrf_auc[grp]);
      eb_curves.push_back(r.eb_roc[grp]);
      mrf_curves.push_back(r.mrf_roc[grp]);
    }
    const std::string metric = std::string("auc_") + group_names[grp];
    result.rows.push_back(summarize("eb", metric, std::move(eb)));
    result.rows.push_back(summarize("mrf", metric, std::move(mrf)));
    result.curves.push_back({"eb", group_names[grp], average_roc(eb_curves)});
    result.curves.push_back({"mrf", group_names[grp], average_roc(mrf_curves)});
  }
  return result;
}

}  // namespace stmrf
