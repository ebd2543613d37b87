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

#include "stmrf/emission.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

#include "stmrf/error.hpp"

namespace stmrf {

ExpressionTensor::ExpressionTensor(LatticeShape shape,
                                   std::vector<int> replicates)
    : shape_(shape), replicates_(std::move(replicates)) {
  validate(shape);
  const std::size_t bt = static_cast<std::size_t>(shape.regions) * shape.periods;
  if (replicates_.size() != bt) {
    throw InputError("replicate count table has " +
                     std::to_string(replicates_.size()) + " entries, expected " +
                     std::to_string(bt));
  }
  prefix_.resize(bt);
  for (std::size_t i = 0; i < bt; ++i) {
    if (replicates_[i] < 0) throw InputError("negative replicate count");
    prefix_[i] = per_gene_;
    per_gene_ += static_cast<std::size_t>(replicates_[i]);
  }
  values_.assign(per_gene_ * shape.genes, 0.0);
}

std::span<const double> ExpressionTensor::values(int b, int g, int t) const {
  return {values_.data() + offset(b, g, t),
          static_cast<std::size_t>(replicates(b, t))};
}

std::span<double> ExpressionTensor::values(int b, int g, int t) {
  return {values_.data() + offset(b, g, t),
          static_cast<std::size_t>(replicates(b, t))};
}

double ExpressionTensor::cell_mean(int b, int g, int t) const {
  const auto y = values(b, g, t);
  if (y.empty()) return std::numeric_limits<double>::quiet_NaN();
  double s = 0.0;
  for (double v : y) s += v;
  return s / static_cast<double>(y.size());
}

double estimate_replicate_variance(const ExpressionTensor& data) {
  const LatticeShape& shape = data.shape();
  long long df_per_gene = 0;
  for (int b = 0; b < shape.regions; ++b) {
    for (int t = 0; t < shape.periods; ++t) {
      if (data.replicates(b, t) >= 2) df_per_gene += data.replicates(b, t) - 1;
    }
  }
  if (df_per_gene == 0) {
    throw NumericalError(
        "replicate variance is not estimable: every (region, period) has at "
        "most one replicate");
  }
  double ss = 0.0;
#pragma omp parallel for reduction(+ : ss) schedule(static)
  for (int g = 0; g < shape.genes; ++g) {
    for (int b = 0; b < shape.regions; ++b) {
      for (int t = 0; t < shape.periods; ++t) {
        const auto y = data.values(b, g, t);
        if (y.size() < 2) continue;
        const double mean = data.cell_mean(b, g, t);
        for (double v : y) ss += (v - mean) * (v - mean);
      }
    }
  }
  return ss / (static_cast<double>(shape.genes) * static_cast<double>(df_per_gene));
}

double log_emission(std::span<const double> y, int state,
                    const GmmEmissionParams& theta, int region) {
  if (y.empty()) throw std::invalid_argument("empty replicate vector");
  const double mu = theta.mean(region, state);
  const double sd = theta.sd(region, state);
  const double s0 = theta.sigma0 * theta.sigma0;
  constexpr double kLog2Pi = 1.8378770664093454836;
  if (theta.replicates == ReplicateModel::independent || y.size() == 1) {
    const double var = sd * sd + s0;
    double ll = 0.0;
    for (double v : y) {
      const double d = v - mu;
      ll += -0.5 * (kLog2Pi + std::log(var)) - 0.5 * d * d / var;
    }
    return ll;
  }
  const double n = static_cast<double>(y.size());
  double mean = 0.0;
  for (double v : y) mean += v;
  mean /= n;
  double within = 0.0;
  for (double v : y) within += (v - mean) * (v - mean);
  const double s0f = std::max(s0, kVarianceFloor);
  const double var = sd * sd + s0f / n;
  const double d = mean - mu;
  // Density of ybar plus the residual factor of the replicates about ybar.
  return -0.5 * (kLog2Pi + std::log(var)) - 0.5 * d * d / var -
         0.5 * (n - 1.0) * (kLog2Pi + std::log(s0f)) - 0.5 * std::log(n) -
         0.5 * within / s0f;
}

std::vector<double> emission_log_odds(const ExpressionTensor& data,
                                      const GmmEmissionParams& theta) {
  const LatticeShape& shape = data.shape();
  std::vector<double> odds(shape.cells(), 0.0);
#pragma omp parallel for schedule(static)
  for (int g = 0; g < shape.genes; ++g) {
    for (int b = 0; b < shape.regions; ++b) {
      for (int t = 0; t < shape.periods; ++t) {
        const auto y = data.values(b, g, t);
        if (y.empty()) continue;
        odds[shape.index(b, g, t)] =
            log_emission(y, 1, theta, b) - log_emission(y, 0, theta, b);
      }
    }
  }
  return odds;
}

double expected_emission_loglik(const ExpressionTensor& data,
                                const GmmEmissionParams& theta,
                                std::span<const double> weights) {
  const LatticeShape& shape = data.shape();
  double total = 0.0;
#pragma omp parallel for reduction(+ : total) schedule(static)
  for (int g = 0; g < shape.genes; ++g) {
    for (int b = 0; b < shape.regions; ++b) {
      for (int t = 0; t < shape.periods; ++t) {
        const auto y = data.values(b, g, t);
        if (y.empty()) continue;
        const double w = weights[shape.index(b, g, t)];
        if (w > 0.0) total += w * log_emission(y, 1, theta, b);
        if (w < 1.0) total += (1.0 - w) * log_emission(y, 0, theta, b);
      }
    }
  }
  return total;
}

namespace {

struct ComponentFit {
  double mean = 0.0;
  double var = 0.0;       // component variance after removing sigma0^2
  double weight = 0.0;    // sum of cell weights
  bool valid = false;
};

// Weighted replicate-level moments for one region; `state` selects w or
// 1 - w as the cell weight.
ComponentFit fit_component(const ExpressionTensor& data, int b,
                           std::span<const double> w1, int state,
                           double sigma0_sq) {
  const LatticeShape& shape = data.shape();
  double sw = 0.0, swn = 0.0, swy = 0.0;
  for (int g = 0; g < shape.genes; ++g) {
    for (int t = 0; t < shape.periods; ++t) {
      const auto y = data.values(b, g, t);
      if (y.empty()) continue;
      const double p = w1[shape.index(b, g, t)];
      const double w = state ? p : 1.0 - p;
      if (w <= 0.0) continue;
      double sy = 0.0;
      for (double v : y) sy += v;
      sw += w;
      swn += w * static_cast<double>(y.size());
      swy += w * sy;
    }
  }
  ComponentFit fit;
  fit.weight = sw;
  if (swn <= 0.0) return fit;
  fit.mean = swy / swn;
  double ss = 0.0;
  for (int g = 0; g < shape.genes; ++g) {
    for (int t = 0; t < shape.periods; ++t) {
      const auto y = data.values(b, g, t);
      if (y.empty()) continue;
      const double p = w1[shape.index(b, g, t)];
      const double w = state ? p : 1.0 - p;
      if (w <= 0.0) continue;
      for (double v : y) ss += w * (v - fit.mean) * (v - fit.mean);
    }
  }
  fit.var = std::max(ss / swn - sigma0_sq, kVarianceFloor);
  fit.valid = std::isfinite(fit.mean) && std::isfinite(fit.var);
  return fit;
}

double normal_logpdf(double x, double mean, double var) {
  const double d = x - mean;
  return -0.5 * (std::log(2.0 * std::numbers::pi * var) + d * d / var);
}

double quantile_of(std::vector<double> v, double q) {
  const std::size_t k = std::min(
      v.size() - 1, static_cast<std::size_t>(q * static_cast<double>(v.size() - 1)));
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), v.end());
  return v[k];
}

}  // namespace

PlainGmmFit fit_plain_gmm(const ExpressionTensor& data, double sigma0_sq,
                          int max_iterations, double tolerance) {
  const LatticeShape& shape = data.shape();
  const int nb = shape.regions;
  PlainGmmFit out;
  out.params.sigma0 = std::sqrt(std::max(sigma0_sq, 0.0));
  out.params.mu1.assign(nb, 0.0);
  out.params.sigma1.assign(nb, 1.0);
  out.params.mu2.assign(nb, 0.0);
  out.params.sigma2.assign(nb, 1.0);
  out.expressed_fraction.assign(nb, 0.5);
  out.posterior.assign(shape.cells(), 0.0);
  out.states = LatentGrid(shape);

  constexpr int kMaxAttempts = 5;
  // Starting quantile pairs for the low and high component.
  constexpr double kStarts[kMaxAttempts][2] = {
      {0.25, 0.75}, {0.10, 0.90}, {0.40, 0.60}, {0.05, 0.50}, {0.50, 0.95}};

  for (int b = 0; b < nb; ++b) {
    std::vector<double> means;
    for (int g = 0; g < shape.genes; ++g) {
      for (int t = 0; t < shape.periods; ++t) {
        const double m = data.cell_mean(b, g, t);
        if (!std::isnan(m)) means.push_back(m);
      }
    }
    if (means.size() < 2) {
      throw InputError("region " + std::to_string(b) +
                       " has fewer than two observed cells");
    }
    double overall = 0.0;
    for (double m : means) overall += m;
    overall /= static_cast<double>(means.size());
    double spread = 0.0;
    for (double m : means) spread += (m - overall) * (m - overall);
    spread = std::max(spread / static_cast<double>(means.size()), kVarianceFloor);

    // Cell index for each entry of `means`.
    std::vector<std::size_t> cells;
    cells.reserve(means.size());
    for (int g = 0; g < shape.genes; ++g) {
      for (int t = 0; t < shape.periods; ++t) {
        if (!std::isnan(data.cell_mean(b, g, t))) cells.push_back(shape.index(b, g, t));
      }
    }
    const std::size_t n = means.size();
    std::vector<double> post(n, 0.5);

    bool ok = false;
    for (int attempt = 0; attempt < kMaxAttempts && !ok; ++attempt) {
      double m1 = quantile_of(means, kStarts[attempt][0]);
      double m2 = quantile_of(means, kStarts[attempt][1]);
      double v1 = spread / 4.0, v2 = spread / 4.0;
      double pi = 0.5;
      double prev_ll = -std::numeric_limits<double>::infinity();
      bool degenerate = false;
      int it = 0;
      for (; it < max_iterations; ++it) {
        double ll = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double l1 = std::log(pi) + normal_logpdf(means[i], m2, v2);
          const double l0 = std::log1p(-pi) + normal_logpdf(means[i], m1, v1);
          const double mx = std::max(l0, l1);
          ll += mx + std::log(std::exp(l0 - mx) + std::exp(l1 - mx));
          post[i] = conditional_prob(l1 - l0);
        }
        double w0 = 0.0, w1 = 0.0, s0 = 0.0, s1 = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          w1 += post[i];
          w0 += 1.0 - post[i];
          s1 += post[i] * means[i];
          s0 += (1.0 - post[i]) * means[i];
        }
        if (w0 < 1.0 || w1 < 1.0 || !std::isfinite(ll)) {
          degenerate = true;
          break;
        }
        m1 = s0 / w0;
        m2 = s1 / w1;
        double q0 = 0.0, q1 = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          q1 += post[i] * (means[i] - m2) * (means[i] - m2);
          q0 += (1.0 - post[i]) * (means[i] - m1) * (means[i] - m1);
        }
        v1 = std::max(q0 / w0, kVarianceFloor);
        v2 = std::max(q1 / w1, kVarianceFloor);
        pi = w1 / (w0 + w1);
        if (std::abs(ll - prev_ll) <= tolerance * (1.0 + std::abs(ll))) break;
        prev_ll = ll;
      }
      out.iterations = std::max(out.iterations, it + 1);
      if (degenerate) {
        ++out.restarts;
        continue;
      }
      if (m1 > m2) {
        std::swap(m1, m2);
        std::swap(v1, v2);
        pi = 1.0 - pi;
      }
      GmmEmissionParams& th = out.params;
      th.mu1[b] = m1;
      th.sigma1[b] = std::sqrt(v1);
      th.mu2[b] = m2;
      th.sigma2[b] = std::sqrt(v2);
      // Final posteriors under the converged parameters; empty cells get pi.
      for (int g = 0; g < shape.genes; ++g) {
        for (int t = 0; t < shape.periods; ++t) {
          const std::size_t c = shape.index(b, g, t);
          out.posterior[c] = pi;
        }
      }
      for (std::size_t i = 0; i < n; ++i) {
        const double l1 = std::log(pi) + normal_logpdf(means[i], m2, v2);
        const double l0 = std::log1p(-pi) + normal_logpdf(means[i], m1, v1);
        out.posterior[cells[i]] = conditional_prob(l1 - l0);
      }
      for (int g = 0; g < shape.genes; ++g) {
        for (int t = 0; t < shape.periods; ++t) {
          const std::size_t c = shape.index(b, g, t);
          out.states.set_at(c, out.posterior[c] >= 0.5);
        }
      }
      out.expressed_fraction[b] = pi;
      ok = true;
    }
    if (!ok) {
      throw NumericalError("mixture fit for region " + std::to_string(b) +
                           " collapsed in " + std::to_string(kMaxAttempts) +
                           " attempts");
    }
  }
  return out;
}

ThetaUpdate update_theta_mle(const ExpressionTensor& data,
                             std::span<const double> weights,
                             const GmmEmissionParams& previous) {
  const LatticeShape& shape = data.shape();
  if (weights.size() != shape.cells()) {
    throw std::invalid_argument("weight array does not match lattice");
  }
  ThetaUpdate out{previous, {}};
  const double s0 = previous.sigma0 * previous.sigma0;
  for (int b = 0; b < shape.regions; ++b) {
    const ComponentFit low = fit_component(data, b, weights, 0, s0);
    const ComponentFit high = fit_component(data, b, weights, 1, s0);
    const double mu1 = low.valid ? low.mean : previous.mu1[b];
    const double sd1 = low.valid ? std::sqrt(low.var) : previous.sigma1[b];
    const double mu2 = high.valid ? high.mean : previous.mu2[b];
    const double sd2 = high.valid ? std::sqrt(high.var) : previous.sigma2[b];
    if (!(mu1 < mu2)) {
      out.held_regions.push_back(b);
      continue;
    }
    if (!low.valid || !high.valid) out.held_regions.push_back(b);
    out.params.mu1[b] = mu1;
    out.params.sigma1[b] = sd1;
    out.params.mu2[b] = mu2;
    out.params.sigma2[b] = sd2;
  }
  return out;
}

ThetaUpdate update_theta_mle(const ExpressionTensor& data,
                             std::span<const LatentGrid> samples,
                             const GmmEmissionParams& previous) {
  if (samples.empty()) throw std::invalid_argument("no latent samples");
  const LatticeShape& shape = data.shape();
  std::vector<double> w(shape.cells(), 0.0);
  for (const LatentGrid& s : samples) {
    if (!(s.shape() == shape)) throw std::invalid_argument("sample shape mismatch");
    for (std::size_t i = 0; i < w.size(); ++i) w[i] += s.at(i);
  }
  for (double& v : w) v /= static_cast<double>(samples.size());
  return update_theta_mle(data, w, previous);
}

}  // namespace stmrf
