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
#include <stdexcept>

#include "oracle.hpp"
#include "stmrf/sampler.hpp"

using namespace stmrf;

namespace {

std::vector<double> random_evidence(std::size_t n, std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> z(0.0, scale);
  std::vector<double> e(n);
  for (auto& v : e) v = z(rng);
  return e;
}

double max_marginal_gap(const PosteriorGrid& post, const std::vector<double>& exact) {
  double worst = 0.0;
  for (std::size_t i = 0; i < exact.size(); ++i) {
    if (std::isnan(exact[i])) {
      CHECK(std::isnan(post.prob_one[i]));
      continue;
    }
    worst = std::max(worst, std::abs(post.prob_one[i] - exact[i]));
  }
  return worst;
}

}  // namespace

TEST_CASE("schedule validation") {
  CHECK_THROWS(validate(ChainSchedule{-1, 1, 0}));
  CHECK_THROWS(validate(ChainSchedule{0, 0, 0}));
  CHECK_NOTHROW(validate(ChainSchedule{0, 1, 0}));
}

TEST_CASE("Gibbs marginals match exact enumeration") {
  std::mt19937_64 rng(41);
  struct Case {
    LatticeShape shape;
    bool de;
    double mask;
  };
  const Case cases[] = {{{2, 1, 2}, false, 0.0}, {{2, 1, 2}, true, 0.0},
                        {{3, 1, 4}, false, 0.0}, {{4, 1, 3}, true, 0.0},
                        {{3, 2, 2}, true, 0.0},  {{4, 1, 3}, true, 0.2}};
  for (const Case& c : cases) {
    const LatentGrid init = oracle::random_grid(c.shape, rng, c.mask);
    const auto groups = oracle::random_groups(c.shape.regions, rng);
    const auto coef = oracle::random_coef(c.de ? 5 : 3, rng, 0.8);
    const auto evidence = random_evidence(c.shape.cells(), rng, 1.0);
    const MrfTopology topo = c.de ? MrfTopology::differential(c.shape, groups)
                                  : MrfTopology::expression(c.shape);
    const auto exact = oracle::marginals(init, coef, c.de ? groups : std::vector<RegionGroup>{},
                                         evidence);
    const PosteriorGrid post =
        posterior_marginals(init, GibbsModel{topo, coef, evidence}, {1000, 100000, 7});
    CHECK(max_marginal_gap(post, exact) < 0.01);
  }
}

TEST_CASE("reference and incremental sweeps draw identical samples") {
  std::mt19937_64 rng(43);
  const LatticeShape shape{7, 9, 5};
  const auto groups = oracle::random_groups(7, rng);
  for (bool de : {false, true}) {
    LatentGrid a = oracle::random_grid(shape, rng, de ? 0.2 : 0.0);
    LatentGrid b = a;
    const MrfTopology topo =
        de ? MrfTopology::differential(shape, groups) : MrfTopology::expression(shape);
    const GibbsModel model{topo, oracle::random_coef(topo.num_coefficients(), rng),
                           random_evidence(shape.cells(), rng, 2.0)};
    GeneStreams ra(99, shape.genes), rb(99, shape.genes);
    for (int i = 0; i < 30; ++i) {
      gibbs_sweep(a, model, ra);
      gibbs_sweep_reference(b, model, rb);
      REQUIRE(a == b);
    }
  }
}

TEST_CASE("fused chain reproduces run_chain") {
  std::mt19937_64 rng(47);
  const LatticeShape shape{5, 6, 4};
  const auto groups = oracle::random_groups(5, rng);
  const MrfTopology topo = MrfTopology::differential(shape, groups);
  const GibbsModel model{topo, oracle::random_coef(5, rng), random_evidence(shape.cells(), rng, 1.0)};
  const LatentGrid init = oracle::random_grid(shape, rng, 0.1);
  const ChainSchedule sched{10, 25, 1234};
  const auto samples = run_chain(init, model, sched);
  const ChainSummary sum = run_chain_summary(init, model, sched, true);
  REQUIRE(samples.size() == 25);
  CHECK(sum.last == samples.back());
  PseudoStats stats(topo);
  std::vector<double> freq(shape.cells(), 0.0);
  for (const auto& s : samples) {
    stats.add_grid(s);
    stats.finish_sample();
    for (std::size_t i = 0; i < freq.size(); ++i) freq[i] += s.at(i);
  }
  for (std::size_t i = 0; i < freq.size(); ++i) {
    if (init.masked_at(i)) {
      CHECK(std::isnan(sum.marginals.prob_one[i]));
    } else {
      CHECK(sum.marginals.prob_one[i] == doctest::Approx(freq[i] / 25).epsilon(1e-15));
    }
  }
  const auto coef = oracle::random_coef(5, rng);
  CHECK(sum.stats.evaluate(coef).value == doctest::Approx(stats.evaluate(coef).value).epsilon(1e-13));
}

TEST_CASE("chain schedule contract") {
  std::mt19937_64 rng(53);
  const LatticeShape shape{3, 4, 3};
  const GibbsModel model = prior_model(MrfTopology::expression(shape), {0.1, 0.3, 0.5});
  const LatentGrid init = oracle::random_grid(shape, rng);

  const auto one = run_chain(init, model, {0, 1, 5});
  REQUIRE(one.size() == 1);
  LatentGrid manual = init;
  GeneStreams streams(5, shape.genes);
  gibbs_sweep(manual, model, streams);
  CHECK(one[0] == manual);

  const auto many = run_chain(init, model, {0, 6, 5});
  REQUIRE(many.size() == 6);
  CHECK(many[0] == manual);
  for (int k = 1; k < 6; ++k) {
    gibbs_sweep(manual, model, streams);
    CHECK(many[k] == manual);
  }
}

TEST_CASE("chains are deterministic in their seed") {
  std::mt19937_64 rng(59);
  const LatticeShape shape{6, 10, 5};
  const GibbsModel model{MrfTopology::expression(shape), {0.1, 0.2, 1.0},
                         random_evidence(shape.cells(), rng, 1.0)};
  const LatentGrid init = oracle::random_grid(shape, rng);
  const auto a = run_chain_summary(init, model, {20, 50, 77}, false);
  const auto b = run_chain_summary(init, model, {20, 50, 77}, false);
  const auto c = run_chain_summary(init, model, {20, 50, 78}, false);
  CHECK(a.last == b.last);
  CHECK(a.marginals.prob_one == b.marginals.prob_one);
  CHECK_FALSE(a.last == c.last);
}

TEST_CASE("zero couplings sample independent Bernoulli cells") {
  const LatticeShape shape{5, 40, 5};
  const double gamma = 0.4;
  const double levels[] = {-2.0, -0.5, 0.0, 0.7, 1.8};
  std::vector<double> evidence(shape.cells());
  for (std::size_t i = 0; i < evidence.size(); ++i) evidence[i] = levels[i % 5];
  const GibbsModel model{MrfTopology::expression(shape), {gamma, 0.0, 0.0}, evidence};
  const int kept = 2000;
  const auto post = posterior_marginals(LatentGrid(shape), model, {0, kept, 61});
  for (int l = 0; l < 5; ++l) {
    const double p = conditional_prob(gamma + levels[l]);
    double sum = 0.0;
    double n = 0.0;
    for (std::size_t i = l; i < evidence.size(); i += 5) {
      sum += post.prob_one[i];
      n += 1.0;
    }
    const double se = std::sqrt(p * (1 - p) / (n * kept));
    CHECK(std::abs(sum / n - p) < 3.0 * se);
  }
}

TEST_CASE("marginals do not depend on the sweep order") {
  std::mt19937_64 rng(67);
  const LatticeShape shape{4, 3, 5};
  const auto groups = oracle::random_groups(4, rng);
  const GibbsModel model{MrfTopology::differential(shape, groups), {-0.2, 0.4, 0.3, 0.2, 0.8},
                         random_evidence(shape.cells(), rng, 1.0)};
  LatentGrid fwd = oracle::random_grid(shape, rng, 0.1);
  LatentGrid rev = fwd;
  GeneStreams ra(1, shape.genes), rb(2, shape.genes);
  std::vector<double> pf(shape.cells(), 0.0), pr(shape.cells(), 0.0);
  const int burn = 500, kept = 40000;
  for (int i = 0; i < burn + kept; ++i) {
    gibbs_sweep_reference(fwd, model, ra, SweepOrder::raster);
    gibbs_sweep_reference(rev, model, rb, SweepOrder::reversed);
    if (i < burn) continue;
    for (std::size_t c = 0; c < shape.cells(); ++c) {
      pf[c] += fwd.at(c);
      pr[c] += rev.at(c);
    }
  }
  for (std::size_t c = 0; c < shape.cells(); ++c) {
    if (fwd.masked_at(c)) continue;
    CHECK(std::abs(pf[c] - pr[c]) / kept < 0.02);
  }
}

TEST_CASE("infinite evidence pins the marginals") {
  const LatticeShape shape{3, 4, 3};
  std::vector<double> evidence(shape.cells());
  for (std::size_t i = 0; i < evidence.size(); ++i) evidence[i] = i % 3 ? INFINITY : -INFINITY;
  const GibbsModel model{MrfTopology::expression(shape), {0.5, 2.0, 3.0}, evidence};
  LatentGrid init(shape);
  init.set_masked(1, 1, 1, true);
  const auto post = posterior_marginals(init, model, {5, 50, 3});
  for (std::size_t i = 0; i < evidence.size(); ++i) {
    if (i == shape.index(1, 1, 1)) {
      CHECK(std::isnan(post.prob_one[i]));
      CHECK_FALSE(post.has(i));
    } else {
      CHECK(post.prob_one[i] == (i % 3 ? 1.0 : 0.0));
    }
  }
}

TEST_CASE("sampler input checks") {
  const LatticeShape shape{2, 2, 2};
  LatentGrid x(shape);
  GeneStreams rng(1, 2);
  GibbsModel bad{MrfTopology::expression({2, 3, 2}), {0, 0, 0}, {}};
  CHECK_THROWS_AS(gibbs_sweep(x, bad, rng), std::invalid_argument);
  GibbsModel short_coef{MrfTopology::expression(shape), {0, 0}, {}};
  CHECK_THROWS_AS(gibbs_sweep(x, short_coef, rng), std::invalid_argument);
  GibbsModel ok = prior_model(MrfTopology::expression(shape), {0, 0, 0});
  GeneStreams few(1, 1);
  CHECK_THROWS_AS(gibbs_sweep(x, ok, few), std::invalid_argument);
}
