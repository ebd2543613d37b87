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
#include "stmrf/mrf.hpp"

using namespace stmrf;

namespace {

LatentGrid filled(LatticeShape shape, std::uint8_t v) {
  LatentGrid x(shape);
  for (std::size_t i = 0; i < shape.cells(); ++i) x.set_at(i, v);
  return x;
}

}  // namespace

TEST_CASE("edge counts") {
  auto count = [](LatticeShape s) {
    const EdgeSets e = build_edges(s);
    return std::pair{e.spatial.size(), e.temporal.size()};
  };
  CHECK(count({16, 1, 13}) == std::pair<std::size_t, std::size_t>{1560, 192});
  CHECK(count({2, 1, 2}) == std::pair<std::size_t, std::size_t>{2, 2});
  CHECK(count({1, 1, 5}) == std::pair<std::size_t, std::size_t>{0, 4});
}

TEST_CASE("lattice validation") {
  CHECK_THROWS_AS(validate(LatticeShape{0, 1, 2}), InputError);
  CHECK_NOTHROW(validate(LatticeShape{1, 1, 2}));
}

TEST_CASE("expression conditional logit") {
  const LatticeShape shape{16, 2, 13};
  LatentGrid x = filled(shape, 1);
  CHECK(conditional_logit_expr(x, {3, 1, 6}, {0.0, 0.0, 0.0}) == 0.0);

  const double f = conditional_logit_expr(x, {3, 1, 6}, {0.30, 0.22, 6.44});
  CHECK(f == doctest::Approx(0.30 + 0.22 * 15 + 6.44 * 2).epsilon(1e-14));
  CHECK(f == doctest::Approx(16.48).epsilon(1e-12));

  // Boundary slot: only one temporal neighbor.
  CHECK(conditional_logit_expr(x, {3, 1, 0}, {0.30, 0.22, 6.44}) ==
        doctest::Approx(0.30 + 0.22 * 15 + 6.44).epsilon(1e-14));

  CHECK_THROWS_AS(conditional_logit_expr(x, {16, 0, 0}, {}), std::out_of_range);
  CHECK_THROWS_AS(conditional_logit_expr(x, {0, 2, 0}, {}), std::out_of_range);
}

TEST_CASE("conditional probability") {
  CHECK(conditional_prob(0.0) == 0.5);
  const double p = conditional_prob(16.48);
  CHECK(1.0 - p == doctest::Approx(6.95e-8).epsilon(1e-3));
  CHECK(conditional_prob(-1e308) == 0.0);
  CHECK(conditional_prob(-INFINITY) == 0.0);
  CHECK(conditional_prob(INFINITY) == 1.0);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-40, 40);
  for (int i = 0; i < 1000; ++i) {
    const double f = u(rng);
    CHECK(conditional_prob(f) + conditional_prob(-f) == doctest::Approx(1.0).epsilon(1e-15));
  }
}

TEST_CASE("DE conditional logit") {
  const LatticeShape shape{16, 1, 12};
  DeMrfParams phi{-0.10, 0.32, 0.53, 0.06, 0.15, {}};
  for (int b = 0; b < 16; ++b) {
    phi.groups.push_back(b < 11 ? RegionGroup::neocortex : RegionGroup::non_neocortex);
  }
  LatentGrid x(shape);
  for (int b = 0; b < 11; ++b) {
    for (int t = 0; t < 12; ++t) x.set(b, 0, t, 1);
  }
  const double f = conditional_logit_de(x, {0, 0, 5}, phi);
  CHECK(f == doctest::Approx(-0.10 + 3.20 - 0.30 + 0.30).epsilon(1e-14));
  CHECK(f == doctest::Approx(3.10).epsilon(1e-12));

  DeMrfParams zero = phi;
  zero.gamma_de = zero.beta_cc = zero.beta_nn = zero.beta_cn = zero.beta_t = 0.0;
  CHECK(conditional_logit_de(x, {0, 0, 5}, zero) == 0.0);

  x.set_masked(0, 0, 6, true);
  CHECK(conditional_logit_de(x, {0, 0, 5}, phi) ==
        doctest::Approx(-0.10 + 3.20 - 0.30 + 0.15).epsilon(1e-14));
  CHECK_THROWS_AS(conditional_logit_de(x, {0, 0, 6}, phi), std::invalid_argument);
}

TEST_CASE("joint potential of constant grids") {
  const LatticeShape shape{16, 1, 13};
  const auto topo = MrfTopology::expression(shape);
  const std::vector<double> coef{0.7, 0.22, 1.3};
  CHECK(joint_log_potential(filled(shape, 0), 0, topo, coef) ==
        doctest::Approx(0.22 * 1560 + 1.3 * 192).epsilon(1e-12));
  CHECK(joint_log_potential(filled(shape, 1), 0, topo, coef) ==
        doctest::Approx(0.7 * 208 + 0.22 * 1560 + 1.3 * 192).epsilon(1e-12));
}

TEST_CASE("joint potential matches the oracle") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const LatticeShape shape{4, 1, 3};
    const LatentGrid x = oracle::random_grid(shape, rng, 0.2);
    const auto groups = oracle::random_groups(4, rng);
    const auto c3 = oracle::random_coef(3, rng);
    const auto c5 = oracle::random_coef(5, rng);
    CHECK(joint_log_potential(x, 0, MrfTopology::expression(shape), c3) ==
          doctest::Approx(oracle::potential(x, c3, {})).epsilon(1e-12));
    CHECK(joint_log_potential(x, 0, MrfTopology::differential(shape, groups), c5) ==
          doctest::Approx(oracle::potential(x, c5, groups)).epsilon(1e-12));
  }
}

TEST_CASE("conditionals equal enumerated joint ratios") {
  std::mt19937_64 rng(5);
  const LatticeShape shapes[] = {{2, 1, 2}, {3, 1, 4}, {4, 1, 3}, {6, 1, 2}, {1, 2, 6}};
  for (const LatticeShape& shape : shapes) {
    for (int trial = 0; trial < 20; ++trial) {
      const LatentGrid x = oracle::random_grid(shape, rng, 0.15);
      const auto groups = oracle::random_groups(shape.regions, rng);
      const auto c3 = oracle::random_coef(3, rng, 3.0);
      const auto c5 = oracle::random_coef(5, rng, 3.0);
      const MrfParams phi = to_mrf_params(c3);
      const DeMrfParams de = to_de_params(c5, groups);
      for (int g = 0; g < shape.genes; ++g) {
        for (int b = 0; b < shape.regions; ++b) {
          for (int t = 0; t < shape.periods; ++t) {
            const std::size_t i = shape.index(b, g, t);
            if (x.masked_at(i)) continue;
            const double pe = conditional_prob(conditional_logit_expr(x, {b, g, t}, phi));
            CHECK(std::abs(pe - oracle::conditional(x, i, c3, {})) < 1e-12);
            const double pd = conditional_prob(conditional_logit_de(x, {b, g, t}, de));
            CHECK(std::abs(pd - oracle::conditional(x, i, c5, groups)) < 1e-12);
          }
        }
      }
    }
  }
}

TEST_CASE("pseudolikelihood gradient against finite differences") {
  std::mt19937_64 rng(17);
  int checked = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const LatticeShape shape{5, 3, 4};
    const LatentGrid x = oracle::random_grid(shape, rng, 0.1);
    const auto groups = oracle::random_groups(5, rng);
    for (const MrfTopology& topo :
         {MrfTopology::expression(shape), MrfTopology::differential(shape, groups)}) {
      const auto coef = oracle::random_coef(topo.num_coefficients(), rng);
      const PseudoLikelihood pl = log_pseudolikelihood(x, topo, coef);
      for (int k = 0; k < topo.num_coefficients(); ++k) {
        const double h = 1e-5;
        auto up = coef, dn = coef;
        up[k] += h;
        dn[k] -= h;
        const double fd = (log_pseudolikelihood(x, topo, up).value -
                           log_pseudolikelihood(x, topo, dn).value) /
                          (2 * h);
        CHECK(std::abs(pl.gradient[k] - fd) <= 1e-6 * std::max(1.0, std::abs(fd)));
        ++checked;
      }
    }
  }
  CHECK(checked == 800);
}

TEST_CASE("pseudolikelihood with zero couplings is a Bernoulli likelihood") {
  std::mt19937_64 rng(23);
  const LatticeShape shape{6, 4, 5};
  const LatentGrid x = oracle::random_grid(shape, rng, 0.2);
  const double n = static_cast<double>(x.active_cells());
  const double ones = static_cast<double>(x.ones());
  for (double gamma : {-1.3, 0.0, 0.4}) {
    const double p = 1.0 / (1.0 + std::exp(-gamma));
    const double expect = ones * std::log(p) + (n - ones) * std::log(1.0 - p);
    CHECK(log_pseudolikelihood(x, MrfParams{gamma, 0.0, 0.0}).value ==
          doctest::Approx(expect).epsilon(1e-12));
    DeMrfParams de{gamma, 0, 0, 0, 0, oracle::random_groups(6, rng)};
    CHECK(log_pseudolikelihood(x, de).value == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("pseudolikelihood is invariant to gene relabeling") {
  std::mt19937_64 rng(29);
  const LatticeShape shape{4, 5, 3};
  const LatentGrid x = oracle::random_grid(shape, rng, 0.1);
  LatentGrid y(shape);
  const int perm[] = {3, 0, 4, 1, 2};
  std::vector<std::uint8_t> mask(shape.cells());
  for (int g = 0; g < 5; ++g) {
    for (int b = 0; b < 4; ++b) {
      for (int t = 0; t < 3; ++t) {
        y.set(b, perm[g], t, x.state(b, g, t));
        mask[shape.index(b, perm[g], t)] = x.masked(b, g, t);
      }
    }
  }
  y.set_mask(mask);
  const MrfParams phi{0.3, -0.4, 0.9};
  CHECK(log_pseudolikelihood(y, phi).value ==
        doctest::Approx(log_pseudolikelihood(x, phi).value).epsilon(1e-13));
}

TEST_CASE("flipping states and negating the bias mirrors conditionals") {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    const LatticeShape shape{4, 1, 3};
    const LatentGrid x = oracle::random_grid(shape, rng, 0.1);
    LatentGrid flipped = x;
    for (std::size_t i = 0; i < shape.cells(); ++i) flipped.set_at(i, !x.at(i));
    const auto topo = MrfTopology::expression(shape);
    auto coef = oracle::random_coef(3, rng);
    auto neg = coef;
    neg[0] = -coef[0];
    // Potential differs by gamma times the active cell count only.
    const double n = static_cast<double>(x.active_cells());
    CHECK(joint_log_potential(flipped, 0, topo, neg) + coef[0] * n ==
          doctest::Approx(joint_log_potential(x, 0, topo, coef)).epsilon(1e-12));
    for (int b = 0; b < 4; ++b) {
      for (int t = 0; t < 3; ++t) {
        if (x.masked(b, 0, t)) continue;
        const double p = conditional_prob(conditional_logit_expr(x, {b, 0, t}, to_mrf_params(coef)));
        const double q = conditional_prob(conditional_logit_expr(flipped, {b, 0, t}, to_mrf_params(neg)));
        CHECK(p + q == doctest::Approx(1.0).epsilon(1e-14));
      }
    }
  }
}

TEST_CASE("pseudo statistics reproduce the direct pseudolikelihood") {
  std::mt19937_64 rng(37);
  const LatticeShape shape{5, 6, 4};
  const auto groups = oracle::random_groups(5, rng);
  const auto topo = MrfTopology::differential(shape, groups);
  PseudoStats stats(topo);
  double direct = 0.0;
  std::vector<double> grad(5, 0.0);
  const auto coef = oracle::random_coef(5, rng);
  for (int m = 0; m < 3; ++m) {
    const LatentGrid x = oracle::random_grid(shape, rng, 0.1);
    stats.add_grid(x);
    stats.finish_sample();
    const auto pl = log_pseudolikelihood(x, topo, coef);
    direct += pl.value / 3;
    for (int k = 0; k < 5; ++k) grad[k] += pl.gradient[k] / 3;
  }
  const auto ev = stats.evaluate(coef);
  CHECK(ev.value == doctest::Approx(direct).epsilon(1e-12));
  for (int k = 0; k < 5; ++k) CHECK(ev.gradient[k] == doctest::Approx(grad[k]).epsilon(1e-10));
}

TEST_CASE("coefficient conversions round-trip") {
  const MrfParams p{0.1, 0.2, 0.3};
  const auto c = to_coefficients(p);
  CHECK(c == std::vector<double>{0.1, 0.2, 0.3});
  const DeMrfParams d{-0.1, 0.31, 0.52, 0.06, 0.14, {RegionGroup::neocortex}};
  const DeMrfParams back = to_de_params(to_coefficients(d), d.groups);
  CHECK(back.beta_cn == 0.06);
  CHECK(back.beta_t == 0.14);
}
