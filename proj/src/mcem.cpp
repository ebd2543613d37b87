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

#include "stmrf/mcem.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>

#include <Eigen/Dense>

#include "stmrf/error.hpp"

namespace stmrf {

int McemConfig::total_iterations() const {
  int n = 0;
  for (const auto& s : stages) n += s.iterations;
  return n;
}

McemConfig McemConfig::staged_default() {
  McemConfig c;
  c.stages = {{20, {500, 1000, 0}}, {20, {1000, 5000, 0}}, {20, {1000, 9000, 0}}};
  return c;
}

McemConfig McemConfig::single_stage(int iterations, int burn_in, int total) {
  McemConfig c;
  c.stages = {{iterations, {burn_in, total - burn_in, 0}}};
  return c;
}

void validate(const McemConfig& config) {
  if (config.stages.empty()) throw InputError("MCEM needs at least one stage");
  for (const auto& s : config.stages) {
    if (s.iterations < 1) throw InputError("MCEM stage needs >= 1 iteration");
    validate(s.chain);
  }
  if (!(config.optimizer_tolerance > 0.0) || !(config.convergence_tolerance > 0.0) ||
      !(config.bound > 0.0) || config.convergence_window < 1) {
    throw InputError("MCEM tolerances and bounds must be positive");
  }
}

CouplingFit maximize_couplings(const PseudoStats& stats,
                               std::span<const double> init, double bound,
                               double tolerance,
                               std::span<const std::uint8_t> fixed) {
  const int k = stats.topology().num_coefficients();
  if (static_cast<int>(init.size()) != k) {
    throw std::invalid_argument("initial coefficient count does not match model");
  }
  if (stats.empty()) throw std::invalid_argument("no samples to fit couplings on");
  auto is_fixed = [&](int i) { return !fixed.empty() && fixed[i]; };
  auto report = [&](const std::vector<double>& x) {
    std::ostringstream os;
    os << "non-finite pseudolikelihood at coefficients (";
    for (int i = 0; i < k; ++i) os << (i ? ", " : "") << x[i];
    os << ")";
    return os.str();
  };

  CouplingFit fit;
  fit.coefficients.assign(init.begin(), init.end());
  std::vector<double>& x = fit.coefficients;
  for (int i = 0; i < k; ++i) {
    if (!is_fixed(i)) x[i] = std::clamp(x[i], -bound, bound);
  }
  auto ev = stats.evaluate(x);
  if (!std::isfinite(ev.value)) throw NumericalError(report(x));

  constexpr int kMaxIterations = 200;
  for (int it = 0; it < kMaxIterations; ++it) {
    fit.iterations = it;
    // Free set: not fixed and not pressed against the box.
    std::vector<int> free;
    for (int i = 0; i < k; ++i) {
      if (is_fixed(i)) continue;
      if (x[i] <= -bound && ev.gradient[i] < 0.0) continue;
      if (x[i] >= bound && ev.gradient[i] > 0.0) continue;
      free.push_back(i);
    }
    double gnorm = 0.0;
    for (int i : free) gnorm += ev.gradient[i] * ev.gradient[i];
    gnorm = std::sqrt(gnorm);
    fit.gradient_norm = gnorm;
    if (free.empty() || gnorm < tolerance) break;

    const int nf = static_cast<int>(free.size());
    Eigen::MatrixXd negh(nf, nf);
    Eigen::VectorXd grad(nf);
    for (int a = 0; a < nf; ++a) {
      grad[a] = ev.gradient[free[a]];
      for (int c = 0; c < nf; ++c) negh(a, c) = -ev.hessian[free[a] * k + free[c]];
    }
    Eigen::VectorXd dir;
    const Eigen::LLT<Eigen::MatrixXd> llt(negh);
    if (llt.info() == Eigen::Success) {
      dir = llt.solve(grad);
    }
    if (dir.size() != nf || !dir.allFinite()) {
      const double scale = std::max(negh.diagonal().cwiseAbs().maxCoeff(), 1.0);
      dir = grad / scale;
    }

    double step = 1.0;
    bool moved = false;
    for (int ls = 0; ls < 60; ++ls, step *= 0.5) {
      std::vector<double> trial = x;
      for (int a = 0; a < nf; ++a) {
        trial[free[a]] = std::clamp(x[free[a]] + step * dir[a], -bound, bound);
      }
      double expected = 0.0;
      for (int a = 0; a < nf; ++a) expected += grad[a] * (trial[free[a]] - x[free[a]]);
      const auto tev = stats.evaluate(trial);
      if (!std::isfinite(tev.value)) continue;
      if (tev.value >= ev.value + 1e-4 * expected && tev.value >= ev.value) {
        moved = tev.value > ev.value || trial != x;
        x = std::move(trial);
        ev = tev;
        break;
      }
    }
    if (!moved) break;
  }
  if (!std::isfinite(ev.value)) throw NumericalError(report(x));
  fit.value = ev.value;
  for (int i = 0; i < k; ++i) {
    if (!is_fixed(i) && std::abs(x[i]) >= bound) fit.boundary = true;
  }
  return fit;
}

double monte_carlo_q(std::span<const LatentGrid> samples, const MrfParams& phi,
                     const GmmEmissionParams& theta,
                     const ExpressionTensor& data) {
  if (samples.empty()) throw std::invalid_argument("no samples");
  const auto topo = MrfTopology::expression(data.shape());
  const auto coef = to_coefficients(phi);
  const LatticeShape& shape = data.shape();
  double total = 0.0;
  for (const LatentGrid& s : samples) {
    total += log_pseudolikelihood(s, topo, coef).value;
    for (int g = 0; g < shape.genes; ++g) {
      for (int b = 0; b < shape.regions; ++b) {
        for (int t = 0; t < shape.periods; ++t) {
          const auto y = data.values(b, g, t);
          if (!y.empty()) total += log_emission(y, s.state(b, g, t), theta, b);
        }
      }
    }
  }
  return total / static_cast<double>(samples.size());
}

double monte_carlo_q(std::span<const LatentGrid> samples,
                     const DeMrfParams& phi, const LocalFdrModel& densities,
                     const ZScoreGrid& z) {
  if (samples.empty()) throw std::invalid_argument("no samples");
  const auto topo = MrfTopology::differential(z.shape, phi.groups);
  const auto coef = to_coefficients(phi);
  double total = 0.0;
  for (const LatentGrid& s : samples) {
    total += log_pseudolikelihood(s, topo, coef).value;
    for (std::size_t i = 0; i < z.z.size(); ++i) {
      if (z.masked(i)) continue;
      const double f = s.at(i) ? densities.nonnull(z.z[i]) : densities.f0(z.z[i]);
      total += std::log(std::max(f, 1e-300));
    }
  }
  return total / static_cast<double>(samples.size());
}

namespace {

constexpr std::uint64_t kEStepTag = 0x45535445ULL;

std::uint64_t chain_seed(std::uint64_t seed, int iteration) {
  Engine e = make_stream(seed, {kEStepTag, static_cast<std::uint64_t>(iteration)});
  return e();
}

int stage_of(const McemConfig& config, int iteration) {
  int acc = 0;
  for (std::size_t s = 0; s < config.stages.size(); ++s) {
    acc += config.stages[s].iterations;
    if (iteration < acc) return static_cast<int>(s);
  }
  return static_cast<int>(config.stages.size()) - 1;
}

double max_relative_change(std::span<const double> before,
                           std::span<const double> after) {
  double worst = 0.0;
  for (std::size_t i = 0; i < before.size(); ++i) {
    const double denom = std::max(std::abs(before[i]), 0.1);
    worst = std::max(worst, std::abs(after[i] - before[i]) / denom);
  }
  return worst;
}

std::vector<double> flatten(const std::vector<double>& coef,
                            const std::optional<GmmEmissionParams>& theta) {
  std::vector<double> v = coef;
  if (theta) {
    for (int b = 0; b < theta->regions(); ++b) {
      v.push_back(theta->mu1[b]);
      v.push_back(theta->sigma1[b]);
      v.push_back(theta->mu2[b]);
      v.push_back(theta->sigma2[b]);
    }
  }
  return v;
}

std::vector<std::uint8_t> frozen_mask(const McemConfig& config, int k) {
  if (!config.freeze_couplings) return {};
  std::vector<std::uint8_t> fixed(k, 1);
  fixed[0] = 0;
  return fixed;
}

// Shared MCEM loop. `evidence` builds the emission log-odds for the current
// state; `update_emission` performs the emission M-step from cell weights
// and returns the emission part of Q before and after the update.
template <class Evidence, class EmissionStep>
void run_mcem(McemState& state, const MrfTopology& topo,
              const McemConfig& config, const IterationCallback& on_iteration,
              Evidence&& evidence, EmissionStep&& update_emission) {
  const auto fixed = frozen_mask(config, topo.num_coefficients());
  const int total = config.total_iterations();
  for (int r = state.completed(); r < total && !state.converged; ++r) {
    const int stage = stage_of(config, r);
    ChainSchedule schedule = config.stages[stage].chain;
    schedule.seed = chain_seed(state.seed, r);

    GibbsModel model{topo, state.coefficients, evidence(state)};
    ChainSummary chain = run_chain_summary(state.grid, model, schedule, true);

    const auto before = flatten(state.coefficients, state.theta);
    McemIteration rec;
    rec.stage = stage;
    const double pl_before = chain.stats.evaluate(state.coefficients, false).value;
    const CouplingFit fit = maximize_couplings(chain.stats, state.coefficients, config.bound,
                                               config.optimizer_tolerance, fixed);
    const auto [em_before, em_after] = update_emission(state, chain.marginals.prob_one);
    rec.q_before = pl_before + em_before;
    rec.q_after = fit.value + em_after;
    rec.boundary = fit.boundary;

    state.coefficients = fit.coefficients;
    rec.coefficients = fit.coefficients;
    rec.theta = state.theta;
    state.grid = std::move(chain.last);

    if (max_relative_change(before, flatten(state.coefficients, state.theta)) <
        config.convergence_tolerance) {
      ++state.stable_iterations;
    } else {
      state.stable_iterations = 0;
    }
    state.trace.push_back(std::move(rec));
    if (state.stable_iterations >= config.convergence_window) state.converged = true;
    if (on_iteration) on_iteration(state);
  }
}

}  // namespace

ExpressionFit mcem_fit_expression(const ExpressionTensor& data,
                                  const McemConfig& config,
                                  const IterationCallback& on_iteration,
                                  const McemState* resume) {
  validate(config);
  const auto topo = MrfTopology::expression(data.shape());
  ExpressionFit out;
  McemState& state = out.state;
  if (resume) {
    if (resume->kind != ModelKind::expression || !resume->theta ||
        !(resume->grid.shape() == data.shape())) {
      throw InputError("checkpoint does not match an expression fit of this data");
    }
    state = *resume;
    out.plain = fit_plain_gmm(data, state.sigma0_sq);
  } else {
    state.kind = ModelKind::expression;
    state.seed = config.seed;
    state.sigma0_sq = estimate_replicate_variance(data);
    out.plain = fit_plain_gmm(data, state.sigma0_sq);
    state.theta = out.plain.params;
    state.theta->replicates = config.replicates;
    state.grid = out.plain.states;
    PseudoStats init(topo);
    init.add_grid(state.grid);
    init.set_samples(1);
    state.coefficients = maximize_couplings(init, std::vector<double>(3, 0.0), config.bound,
                                            config.optimizer_tolerance,
                                            frozen_mask(config, 3))
                             .coefficients;
  }

  run_mcem(
      state, topo, config, on_iteration,
      [&](const McemState& s) { return emission_log_odds(data, *s.theta); },
      [&](McemState& s, const std::vector<double>& w) {
        const double before = expected_emission_loglik(data, *s.theta, w);
        s.theta = update_theta_mle(data, w, *s.theta).params;
        const double after = expected_emission_loglik(data, *s.theta, w);
        return std::pair<double, double>(before, after);
      });

  out.phi = to_mrf_params(state.coefficients);
  out.theta = *state.theta;
  return out;
}

DeFit mcem_fit_de(const ZScoreGrid& z, const LocalFdrModel& densities,
                  const McemConfig& config,
                  const IterationCallback& on_iteration,
                  const McemState* resume) {
  validate(config);
  const auto topo = MrfTopology::differential(z.shape, z.groups);
  DeFit out;
  McemState& state = out.state;
  if (resume) {
    if (resume->kind != ModelKind::differential ||
        !(resume->grid.shape() == z.shape)) {
      throw InputError("checkpoint does not match a DE fit of this z-grid");
    }
    state = *resume;
  } else {
    state.kind = ModelKind::differential;
    state.seed = config.seed;
    state.grid = eb_states(z, densities);
    PseudoStats init(topo);
    init.add_grid(state.grid);
    init.set_samples(1);
    state.coefficients = maximize_couplings(init, std::vector<double>(5, 0.0), config.bound,
                                            config.optimizer_tolerance,
                                            frozen_mask(config, 5))
                             .coefficients;
  }

  const std::vector<double> evidence =
      de_gibbs_model(to_de_params(state.coefficients, z.groups), densities, z).evidence;
  double emission_const = 0.0;  // sum of log f0 over tested cells
  for (std::size_t i = 0; i < z.z.size(); ++i) {
    if (!z.masked(i)) emission_const += std::log(std::max(densities.f0(z.z[i]), 1e-300));
  }
  run_mcem(
      state, topo, config, on_iteration, [&](const McemState&) { return evidence; },
      [&](McemState&, const std::vector<double>& w) {
        double e = emission_const;
        for (std::size_t i = 0; i < w.size(); ++i) {
          if (!z.masked(i)) e += w[i] * evidence[i];
        }
        return std::pair<double, double>(e, e);
      });

  out.phi = to_de_params(state.coefficients, z.groups);
  return out;
}

}  // namespace stmrf
