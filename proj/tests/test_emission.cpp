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

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <cmath>
#include <numbers>
#include <random>

#include "stmrf/emission.hpp"
#include "stmrf/error.hpp"
#include "stmrf/sim.hpp"

using namespace stmrf;

namespace {

GmmEmissionParams one_region(double mu1, double s1, double mu2, double s2, double s0) {
  GmmEmissionParams p;
  p.mu1 = {mu1};
  p.sigma1 = {s1};
  p.mu2 = {mu2};
  p.sigma2 = {s2};
  p.sigma0 = s0;
  return p;
}

// Two-component data with known states; n replicates per cell sharing a
// cell mean drawn from the state's component.
struct Synthetic {
  ExpressionTensor data;
  LatentGrid truth;
};

Synthetic synthetic(LatticeShape shape, int n, double mu1, double s1, double mu2,
                    double s2, double s0, double p1, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(p1);
  std::normal_distribution<double> z;
  Synthetic out{ExpressionTensor(shape, std::vector<int>(shape.regions * shape.periods, n)),
                LatentGrid(shape)};
  for (int g = 0; g < shape.genes; ++g) {
    for (int b = 0; b < shape.regions; ++b) {
      for (int t = 0; t < shape.periods; ++t) {
        const bool x = coin(rng);
        out.truth.set(b, g, t, x);
        const double m = x ? mu2 + s2 * z(rng) : mu1 + s1 * z(rng);
        for (double& v : out.data.values(b, g, t)) v = m + s0 * z(rng);
      }
    }
  }
  return out;
}

double normal_pdf(double x, double mean, double var) {
  return std::exp(-0.5 * (x - mean) * (x - mean) / var) /
         std::sqrt(2.0 * std::numbers::pi * var);
}

}  // namespace

TEST_CASE("replicate variance") {
  ExpressionTensor y(LatticeShape{1, 1, 1}, {3});
  auto v = y.values(0, 0, 0);
  v[0] = 1;
  v[1] = 2;
  v[2] = 3;
  CHECK(estimate_replicate_variance(y) == doctest::Approx(1.0).epsilon(1e-15));

  for (double& x : v) x = 5.5;
  CHECK(estimate_replicate_variance(y) == 0.0);

  ExpressionTensor single(LatticeShape{2, 3, 2}, {1, 1, 1, 1});
  CHECK_THROWS_AS(estimate_replicate_variance(single), NumericalError);
}

TEST_CASE("replicate variance ignores per-cell shifts") {
  auto s = synthetic({3, 20, 4}, 3, 4.5, 0.75, 8, 1.5, 0.5, 0.5, 1);
  const double before = estimate_replicate_variance(s.data);
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> shift(-50, 50);
  for (int g = 0; g < 20; ++g) {
    for (int b = 0; b < 3; ++b) {
      for (int t = 0; t < 4; ++t) {
        const double c = shift(rng);
        for (double& v : s.data.values(b, g, t)) v += c;
      }
    }
  }
  CHECK(estimate_replicate_variance(s.data) == doctest::Approx(before).epsilon(1e-9));
}

TEST_CASE("log emission at the component mean") {
  const auto theta = one_region(4.5, 0.75, 8.0, 1.5, 0.5);
  const double y[] = {4.5};
  const double expect = -0.5 * std::log(2 * std::numbers::pi * (0.75 * 0.75 + 0.25));
  CHECK(log_emission(y, 0, theta, 0) == doctest::Approx(expect).epsilon(1e-14));
  auto indep = theta;
  indep.replicates = ReplicateModel::independent;
  CHECK(log_emission(y, 0, indep, 0) == doctest::Approx(expect).epsilon(1e-14));
  CHECK_THROWS_AS(log_emission(std::span<const double>{}, 0, theta, 0), std::invalid_argument);
}

TEST_CASE("log emission with equal components") {
  const auto theta = one_region(6, 1.1, 6, 1.1, 0.4);
  const double y[] = {5.1, 6.3, 7.2};
  CHECK(log_emission(y, 0, theta, 0) == log_emission(y, 1, theta, 0));
}

TEST_CASE("independent replicate model is the product of marginals") {
  auto theta = one_region(4.5, 0.75, 8.0, 1.5, 0.5);
  theta.replicates = ReplicateModel::independent;
  const double y[] = {7.1, 8.4, 6.9};
  double expect = 0.0;
  for (double v : y) expect += std::log(normal_pdf(v, 8.0, 1.5 * 1.5 + 0.25));
  CHECK(log_emission(y, 1, theta, 0) == doctest::Approx(expect).epsilon(1e-13));
}

TEST_CASE("shared-mean emission equals the integral over the cell mean") {
  const auto theta = one_region(4.5, 0.75, 8.0, 1.5, 0.5);
  const std::vector<std::vector<double>> cases = {
      {4.1}, {7.1, 8.4, 6.9}, {5.0, 5.2}, {3.0, 6.0, 4.4, 5.1}};
  for (const auto& y : cases) {
    for (int x = 0; x < 2; ++x) {
      const double mu = theta.mean(0, x);
      const double var = theta.sd(0, x) * theta.sd(0, x);
      auto integrand = [&](double m) {
        double d = normal_pdf(m, mu, var);
        for (double v : y) d *= normal_pdf(v, m, 0.25);
        return d;
      };
      const double val = boost::math::quadrature::gauss_kronrod<double, 61>::integrate(
          integrand, mu - 15.0, mu + 15.0, 12, 1e-14);
      CHECK(log_emission(y, x, theta, 0) == doctest::Approx(std::log(val)).epsilon(1e-9));
    }
  }
}

TEST_CASE("log emission decreases away from the mean") {
  const auto theta = one_region(4.5, 0.75, 8.0, 1.5, 0.5);
  const double spread[] = {-0.3, 0.1, 0.2};
  double last = INFINITY;
  for (double d = 0.0; d < 6.0; d += 0.25) {
    double y[3];
    for (int k = 0; k < 3; ++k) y[k] = 8.0 + d + spread[k];
    const double l = log_emission(y, 1, theta, 0);
    double yl[3];
    for (int k = 0; k < 3; ++k) yl[k] = 8.0 - d + spread[k];
    CHECK(l < last);
    CHECK(log_emission(yl, 1, theta, 0) == doctest::Approx(l).epsilon(1e-12));
    last = l;
  }
}

TEST_CASE("plain mixture separates point masses") {
  const LatticeShape shape{2, 40, 3};
  ExpressionTensor y(shape, std::vector<int>(6, 2));
  LatentGrid truth(shape);
  for (int g = 0; g < 40; ++g) {
    for (int b = 0; b < 2; ++b) {
      for (int t = 0; t < 3; ++t) {
        const bool x = (g + t) % 3 == 0;
        truth.set(b, g, t, x);
        auto v = y.values(b, g, t);
        v[0] = x ? 9.0 : 3.0;
        v[1] = v[0] + (g % 2 ? 0.01 : -0.01);
      }
    }
  }
  const PlainGmmFit fit = fit_plain_gmm(y, estimate_replicate_variance(y));
  CHECK(misclassification_rate(fit.states, truth) == 0.0);
  for (int b = 0; b < 2; ++b) {
    CHECK(fit.params.mu1[b] == doctest::Approx(3.0).epsilon(1e-6));
    CHECK(fit.params.mu2[b] == doctest::Approx(9.0).epsilon(1e-6));
  }
}

TEST_CASE("plain mixture recovers separated components") {
  auto s = synthetic({2, 5000, 2}, 3, 4.6, 0.7, 7.8, 1.2, 0.5, 0.45, 7);
  const PlainGmmFit fit = fit_plain_gmm(s.data, estimate_replicate_variance(s.data));
  for (int b = 0; b < 2; ++b) {
    CHECK(std::abs(fit.params.mu1[b] - 4.6) < 0.2);
    CHECK(std::abs(fit.params.mu2[b] - 7.8) < 0.2);
    CHECK(fit.params.mu1[b] < fit.params.mu2[b]);
  }
}

TEST_CASE("plain mixture is invariant to swapping the initial labels") {
  // Negating the data swaps which component each quantile start seeds.
  auto s = synthetic({3, 300, 4}, 3, 4.5, 0.75, 7.5, 1.5, 0.5, 0.5, 9);
  ExpressionTensor neg = s.data;
  for (int g = 0; g < 300; ++g) {
    for (int b = 0; b < 3; ++b) {
      for (int t = 0; t < 4; ++t) {
        for (double& v : neg.values(b, g, t)) v = -v;
      }
    }
  }
  const double s0 = estimate_replicate_variance(s.data);
  const PlainGmmFit a = fit_plain_gmm(s.data, s0);
  const PlainGmmFit b = fit_plain_gmm(neg, s0);
  for (int r = 0; r < 3; ++r) {
    // Equal up to the EM stopping tolerance.
    CHECK(a.params.mu1[r] == doctest::Approx(-b.params.mu2[r]).epsilon(1e-4));
    CHECK(a.params.mu2[r] == doctest::Approx(-b.params.mu1[r]).epsilon(1e-4));
    CHECK(a.params.sigma1[r] == doctest::Approx(b.params.sigma2[r]).epsilon(1e-4));
  }
  std::size_t mirrored = 0;
  for (std::size_t i = 0; i < a.states.shape().cells(); ++i) {
    mirrored += a.states.at(i) != b.states.at(i);
  }
  CHECK(mirrored >= a.states.shape().cells() - 2);
}

TEST_CASE("theta update with known states") {
  auto s = synthetic({2, 200, 3}, 1, 4.5, 0.75, 8, 1.5, 0.0, 0.5, 13);
  std::vector<double> w(s.truth.shape().cells());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = s.truth.at(i);
  GmmEmissionParams prev = one_region(0, 1, 1, 1, 0.0);
  prev.mu1.assign(2, 0.0);
  prev.mu2.assign(2, 1.0);
  prev.sigma1.assign(2, 1.0);
  prev.sigma2.assign(2, 1.0);
  const ThetaUpdate up = update_theta_mle(s.data, w, prev);
  CHECK(up.held_regions.empty());
  for (int b = 0; b < 2; ++b) {
    double m[2] = {0, 0}, n[2] = {0, 0};
    for (int g = 0; g < 200; ++g) {
      for (int t = 0; t < 3; ++t) {
        const int x = s.truth.state(b, g, t);
        m[x] += s.data.cell_mean(b, g, t);
        n[x] += 1;
      }
    }
    CHECK(up.params.mu1[b] == doctest::Approx(m[0] / n[0]).epsilon(1e-12));
    CHECK(up.params.mu2[b] == doctest::Approx(m[1] / n[1]).epsilon(1e-12));
  }
}

TEST_CASE("theta update equals a classic EM M-step on cell means") {
  // Independent EM step: responsibilities from the current mixture, then
  // weighted moments of the cell means. With one replicate per cell and no
  // replicate variance the two updates coincide.
  auto s = synthetic({2, 150, 3}, 1, 4.5, 0.75, 7.0, 1.5, 0.0, 0.4, 17);
  GmmEmissionParams prev;
  prev.mu1 = {4.0, 4.2};
  prev.mu2 = {7.5, 7.1};
  prev.sigma1 = {1.0, 0.9};
  prev.sigma2 = {1.3, 1.6};
  prev.sigma0 = 0.0;
  const double pi = 0.4;
  std::vector<double> w(s.truth.shape().cells());
  const LatticeShape& shape = s.truth.shape();
  for (int g = 0; g < 150; ++g) {
    for (int b = 0; b < 2; ++b) {
      for (int t = 0; t < 3; ++t) {
        const double y = s.data.cell_mean(b, g, t);
        const double a = pi * normal_pdf(y, prev.mu2[b], prev.sigma2[b] * prev.sigma2[b]);
        const double c = (1 - pi) * normal_pdf(y, prev.mu1[b], prev.sigma1[b] * prev.sigma1[b]);
        w[shape.index(b, g, t)] = a / (a + c);
      }
    }
  }
  const ThetaUpdate up = update_theta_mle(s.data, w, prev);
  for (int b = 0; b < 2; ++b) {
    double sw[2] = {0, 0}, sm[2] = {0, 0};
    for (int g = 0; g < 150; ++g) {
      for (int t = 0; t < 3; ++t) {
        const double r = w[shape.index(b, g, t)];
        const double y = s.data.cell_mean(b, g, t);
        sw[1] += r;
        sm[1] += r * y;
        sw[0] += 1 - r;
        sm[0] += (1 - r) * y;
      }
    }
    const double m0 = sm[0] / sw[0], m1 = sm[1] / sw[1];
    double v0 = 0, v1 = 0;
    for (int g = 0; g < 150; ++g) {
      for (int t = 0; t < 3; ++t) {
        const double r = w[shape.index(b, g, t)];
        const double y = s.data.cell_mean(b, g, t);
        v1 += r * (y - m1) * (y - m1);
        v0 += (1 - r) * (y - m0) * (y - m0);
      }
    }
    CHECK(up.params.mu1[b] == doctest::Approx(m0).epsilon(1e-8));
    CHECK(up.params.mu2[b] == doctest::Approx(m1).epsilon(1e-8));
    CHECK(up.params.sigma1[b] == doctest::Approx(std::sqrt(v0 / sw[0])).epsilon(1e-8));
    CHECK(up.params.sigma2[b] == doctest::Approx(std::sqrt(v1 / sw[1])).epsilon(1e-8));
  }
}

TEST_CASE("theta update holds a region with one-sided weights") {
  auto s = synthetic({2, 20, 2}, 2, 4.5, 0.75, 8, 1.5, 0.5, 0.5, 19);
  std::vector<double> w(s.truth.shape().cells(), 0.0);
  for (int g = 0; g < 20; ++g) {
    for (int t = 0; t < 2; ++t) w[s.truth.shape().index(1, g, t)] = s.truth.state(1, g, t);
  }
  GmmEmissionParams prev;
  prev.mu1 = {4, 4};
  prev.mu2 = {8, 8};
  prev.sigma1 = {1, 1};
  prev.sigma2 = {1.5, 1.5};
  prev.sigma0 = 0.5;
  const ThetaUpdate up = update_theta_mle(s.data, w, prev);
  REQUIRE(up.held_regions.size() == 1);
  CHECK(up.held_regions[0] == 0);
  CHECK(up.params.mu2[0] == 8.0);
  CHECK(up.params.sigma2[0] == 1.5);
}
