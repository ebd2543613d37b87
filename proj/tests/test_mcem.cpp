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

#include <doctest.h>

#include <cmath>
#include <random>

#include "oracle.hpp"
#include "stmrf/error.hpp"
#include "stmrf/mcem.hpp"
#include "stmrf/sim.hpp"

using namespace stmrf;

namespace {

SimData small_expression(std::uint64_t seed, int genes = 30, double mu2 = 6.5) {
  SimSpec spec = SimSpec::defaults(SimSetting::expr1);
  spec.shape.genes = genes;
  spec.mu2 = mu2;
  return simulate(spec, seed);
}

SimData small_de(std::uint64_t seed, int genes = 60) {
  SimSpec spec = SimSpec::defaults(SimSetting::de1);
  spec.shape.genes = genes;
  return simulate(spec, seed);
}

double sd(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m += x / v.size();
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / (v.size() - 1));
}

}  // namespace

TEST_CASE("config validation and schedules") {
  McemConfig c;
  CHECK_THROWS_AS(validate(c), InputError);
  c = McemConfig::single_stage(5, 200, 600);
  CHECK_NOTHROW(validate(c));
  CHECK(c.stages[0].chain.burn_in == 200);
  CHECK(c.stages[0].chain.kept == 400);
  const McemConfig d = McemConfig::staged_default();
  CHECK(d.total_iterations() == 60);
  CHECK(d.stages[2].chain.burn_in + d.stages[2].chain.kept == 10000);
  c.convergence_tolerance = 0.0;
  CHECK_THROWS_AS(validate(c), InputError);
}

TEST_CASE("Monte Carlo Q averages complete-data objectives") {
  const SimData sim = small_expression(3, 8);
  const ExpressionTensor& y = *sim.expression;
  const double s0 = estimate_replicate_variance(y);
  const GmmEmissionParams theta = fit_plain_gmm(y, s0).params;
  const MrfParams phi{0.1, 0.2, 1.2};
  std::mt19937_64 rng(5);
  const LatentGrid a = oracle::random_grid(y.shape(), rng);
  const LatentGrid b = oracle::random_grid(y.shape(), rng);

  double direct = log_pseudolikelihood(a, phi).value;
  for (int g = 0; g < y.shape().genes; ++g) {
    for (int r = 0; r < y.shape().regions; ++r) {
      for (int t = 0; t < y.shape().periods; ++t) {
        direct += log_emission(y.values(r, g, t), a.state(r, g, t), theta, r);
      }
    }
  }
  const std::vector<LatentGrid> one{a};
  CHECK(monte_carlo_q(one, phi, theta, y) == doctest::Approx(direct).epsilon(1e-12));

  const std::vector<LatentGrid> pair{a, b};
  const std::vector<LatentGrid> twice{a, b, a, b};
  CHECK(monte_carlo_q(twice, phi, theta, y) ==
        doctest::Approx(monte_carlo_q(pair, phi, theta, y)).epsilon(1e-14));
  CHECK_THROWS(monte_carlo_q(std::span<const LatentGrid>{}, phi, theta, y));
}

TEST_CASE("masked cells do not enter the DE objective") {
  const SimData sim = small_de(7, 40);
  const ZScoreGrid& z = *sim.z;
  const LocalFdrModel model = fit_local_fdr(z.pooled());
  const DeMrfParams phi{-0.1, 0.3, 0.5, 0.06, 0.14, z.groups};
  LatentGrid s = z.latent_grid();
  std::mt19937_64 rng(3);
  for (std::size_t i = 0; i < s.shape().cells(); ++i) {
    if (!s.masked_at(i)) s.set_at(i, rng() & 1);
  }
  const std::vector<LatentGrid> base{s};
  const double q = monte_carlo_q(base, phi, model, z);
  std::size_t touched = 0;
  for (std::size_t i = 0; i < s.shape().cells(); ++i) {
    if (s.masked_at(i)) {
      s.set_at(i, 1);
      ++touched;
    }
  }
  REQUIRE(touched > 0);
  const std::vector<LatentGrid> flipped{s};
  CHECK(monte_carlo_q(flipped, phi, model, z) == q);
}

TEST_CASE("coupling fit on uncoupled data stays near zero") {
  std::mt19937_64 rng(71);
  const LatticeShape shape{16, 500, 13};
  LatentGrid x(shape);
  std::bernoulli_distribution coin(0.4);
  for (std::size_t i = 0; i < shape.cells(); ++i) x.set_at(i, coin(rng));
  for (const MrfTopology& topo :
       {MrfTopology::expression(shape),
        MrfTopology::differential(shape, default_region_groups(16))}) {
    PseudoStats stats(topo);
    stats.add_grid(x);
    stats.set_samples(1);
    const auto fit = maximize_couplings(stats, std::vector<double>(topo.num_coefficients(), 0.0),
                                        10.0, 1e-8);
    CHECK(fit.coefficients[0] == doctest::Approx(std::log(0.4 / 0.6)).epsilon(0.1));
    for (int k = 1; k < topo.num_coefficients(); ++k) {
      CHECK(std::abs(fit.coefficients[k]) < 0.05);
    }
    CHECK_FALSE(fit.boundary);
  }
}

TEST_CASE("coupling fit respects the box and fixed coefficients") {
  // An all-one grid pushes the bias and couplings without limit.
  const LatticeShape shape{3, 4, 3};
  LatentGrid x(shape);
  for (std::size_t i = 0; i < shape.cells(); ++i) x.set_at(i, 1);
  x.set_at(0, 0);
  PseudoStats stats(MrfTopology::expression(shape));
  stats.add_grid(x);
  stats.set_samples(1);
  const auto fit = maximize_couplings(stats, std::vector<double>{0.0, 0.0, 0.0}, 2.0, 1e-10);
  CHECK(fit.boundary);
  for (double c : fit.coefficients) CHECK(std::abs(c) <= 2.0);
  const std::uint8_t fixed[] = {0, 1, 1};
  const auto held =
      maximize_couplings(stats, std::vector<double>{0.0, 0.5, -0.5}, 2.0, 1e-10, fixed);
  CHECK(held.coefficients[1] == 0.5);
  CHECK(held.coefficients[2] == -0.5);
}

TEST_CASE("expression MCEM trace and monotone M-step") {
  const SimData sim = small_expression(11);
  McemConfig config;
  config.stages = {{2, {10, 30, 0}}, {3, {10, 40, 0}}, {1, {10, 50, 0}}};
  config.convergence_tolerance = 1e-12;
  config.seed = 5;
  int calls = 0;
  const ExpressionFit fit =
      mcem_fit_expression(*sim.expression, config, [&](const McemState&) { ++calls; });
  CHECK(fit.state.trace.size() == 6);
  CHECK(calls == 6);
  CHECK(fit.state.trace[0].stage == 0);
  CHECK(fit.state.trace[2].stage == 1);
  CHECK(fit.state.trace[5].stage == 2);
  for (const McemIteration& it : fit.state.trace) {
    CHECK(it.q_after >= it.q_before - 1e-9 * std::abs(it.q_before));
    REQUIRE(it.theta.has_value());
  }
  CHECK(fit.state.coefficients == to_coefficients(fit.phi));
  CHECK_FALSE(fit.state.converged);
}

TEST_CASE("DE MCEM monotone M-step and convergence flag") {
  const SimData sim = small_de(13);
  const LocalFdrModel model = fit_local_fdr(sim.z->pooled());
  McemConfig config = McemConfig::single_stage(40, 20, 80);
  config.convergence_tolerance = 0.05;
  config.seed = 9;
  const DeFit fit = mcem_fit_de(*sim.z, model, config);
  CHECK(fit.state.completed() <= 40);
  for (const McemIteration& it : fit.state.trace) {
    CHECK(it.q_after >= it.q_before - 1e-9 * std::abs(it.q_before));
  }
  if (fit.state.converged) {
    CHECK(fit.state.stable_iterations >= config.convergence_window);
  } else {
    CHECK(fit.state.completed() == 40);
  }
}

TEST_CASE("MCEM is deterministic in its seed") {
  const SimData sim = small_de(17, 40);
  const LocalFdrModel model = fit_local_fdr(sim.z->pooled());
  McemConfig config = McemConfig::single_stage(3, 10, 40);
  config.seed = 21;
  const DeFit a = mcem_fit_de(*sim.z, model, config);
  const DeFit b = mcem_fit_de(*sim.z, model, config);
  CHECK(a.state.coefficients == b.state.coefficients);
  CHECK(a.state.grid == b.state.grid);
}

TEST_CASE("frozen couplings agree with the plain mixture") {
  // With the couplings held at zero the E-step is an independent mixture
  // posterior. It still differs from the plain fit: one shared prior odds
  // instead of per-region proportions, the replicate-level variance update,
  // and Monte Carlo noise in the weights. Calls agree away from the overlap.
  const SimData sim = small_expression(23, 60, 8.0);
  McemConfig config = McemConfig::single_stage(5, 20, 200);
  config.freeze_couplings = true;
  config.seed = 3;
  const ExpressionFit fit = mcem_fit_expression(*sim.expression, config);
  CHECK(fit.phi.beta_spatial == 0.0);
  CHECK(fit.phi.beta_temporal == 0.0);
  const GibbsModel model{MrfTopology::expression(sim.truth.shape()), to_coefficients(fit.phi),
                         emission_log_odds(*sim.expression, fit.theta)};
  const auto post = posterior_marginals(fit.state.grid, model, {50, 2000, 1});
  LatentGrid calls(sim.truth.shape());
  for (std::size_t i = 0; i < calls.shape().cells(); ++i) calls.set_at(i, post.prob_one[i] >= 0.5);
  const double disagreement = misclassification_rate(calls, fit.plain.states);
  MESSAGE("frozen-coupling vs plain disagreement " << disagreement);
  CHECK(disagreement < 0.02);
}

TEST_CASE("more Monte Carlo samples reduce estimate spread") {
  const SimData sim = small_de(29, 60);
  const LocalFdrModel model = fit_local_fdr(sim.z->pooled());
  std::vector<double> small[5], large[5];
  for (int s = 0; s < 20; ++s) {
    McemConfig a = McemConfig::single_stage(3, 20, 30);
    McemConfig b = McemConfig::single_stage(3, 20, 60);
    a.seed = b.seed = 1000 + s;
    const DeFit fa = mcem_fit_de(*sim.z, model, a);
    const DeFit fb = mcem_fit_de(*sim.z, model, b);
    for (int k = 0; k < 5; ++k) {
      small[k].push_back(fa.state.coefficients[k]);
      large[k].push_back(fb.state.coefficients[k]);
    }
  }
  double total_small = 0.0, total_large = 0.0;
  for (int k = 0; k < 5; ++k) {
    total_small += sd(small[k]);
    total_large += sd(large[k]);
  }
  MESSAGE("summed sd m=10: " << total_small << "  m=40: " << total_large);
  CHECK(total_large < total_small);
}

TEST_CASE("resume continues the same sample path") {
  const SimData sim = small_expression(31, 20);
  McemConfig config;
  config.stages = {{3, {10, 30, 0}}, {3, {10, 40, 0}}};
  config.convergence_tolerance = 1e-12;
  config.seed = 77;
  McemState mid;
  const ExpressionFit full = mcem_fit_expression(*sim.expression, config, [&](const McemState& s) {
    if (s.completed() == 4) mid = s;
  });
  REQUIRE(mid.completed() == 4);
  const ExpressionFit resumed = mcem_fit_expression(*sim.expression, config, {}, &mid);
  CHECK(resumed.state.completed() == 6);
  CHECK(resumed.state.coefficients == full.state.coefficients);
  CHECK(resumed.state.grid == full.state.grid);
  CHECK(resumed.theta.mu2 == full.theta.mu2);
}
