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
#include <numbers>
#include <string>

#include <Eigen/Dense>

#include "stmrf/de.hpp"
#include "stmrf/error.hpp"

namespace stmrf {

namespace {

// Natural cubic spline basis with intercept on knots xi_1 < ... < xi_K:
// 1, x, and d_k(x) - d_{K-1}(x) for k = 1..K-2, where
// d_k(x) = ((x - xi_k)_+^3 - (x - xi_K)_+^3) / (xi_K - xi_k).
class NaturalSplineBasis {
 public:
  explicit NaturalSplineBasis(std::vector<double> knots) : knots_(std::move(knots)) {}

  int size() const { return static_cast<int>(knots_.size()); }

  void evaluate(double x, double* out) const {
    const int k = size();
    out[0] = 1.0;
    out[1] = x;
    const double last = knots_[k - 1];
    auto d = [&](int j) {
      const double a = std::max(x - knots_[j], 0.0);
      const double b = std::max(x - last, 0.0);
      return (a * a * a - b * b * b) / (last - knots_[j]);
    };
    const double d_prev = d(k - 2);
    for (int j = 0; j + 2 < k; ++j) out[j + 2] = d(j) - d_prev;
  }

 private:
  std::vector<double> knots_;
};

double normal_pdf(double z) {
  return std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
}

double interpolate(const std::vector<double>& xs, const std::vector<double>& ys,
                   double x) {
  if (xs.empty()) return 0.0;
  if (x <= xs.front()) return ys.front();
  if (x >= xs.back()) return ys.back();
  const auto it = std::upper_bound(xs.begin(), xs.end(), x);
  const std::size_t hi = static_cast<std::size_t>(it - xs.begin());
  const std::size_t lo = hi - 1;
  const double w = (x - xs[lo]) / (xs[hi] - xs[lo]);
  return ys[lo] + w * (ys[hi] - ys[lo]);
}

}  // namespace

double LocalFdrModel::f0(double z) const { return normal_pdf(z); }

double LocalFdrModel::marginal(double z) const { return interpolate(grid, f, z); }

double LocalFdrModel::nonnull(double z) const {
  if (null_only) return 0.0;
  return interpolate(grid, f1, z);
}

LocalFdrModel fit_local_fdr(std::span<const double> z,
                            const LocalFdrOptions& options) {
  if (z.size() < 100) {
    throw InputError("local fdr needs at least 100 z-values, got " +
                     std::to_string(z.size()));
  }
  if (options.bins < 10 || options.spline_df < 2 || options.table_points < 2) {
    throw InputError("invalid local fdr options");
  }
  const auto [min_it, max_it] = std::minmax_element(z.begin(), z.end());
  const double lo = *min_it - 0.1;
  const double hi = *max_it + 0.1;
  const int nbins = options.bins;
  const double width = (hi - lo) / nbins;

  std::vector<double> counts(nbins, 0.0);
  for (double v : z) {
    const int j = std::clamp(static_cast<int>((v - lo) / width), 0, nbins - 1);
    counts[j] += 1.0;
  }

  // Work on a unit scale so the cubic terms stay well conditioned.
  auto unit = [&](double v) { return (v - lo) / (hi - lo); };
  std::vector<double> centers(nbins);
  for (int j = 0; j < nbins; ++j) centers[j] = unit(lo + (j + 0.5) * width);

  const int nknots = options.spline_df + 1;
  std::vector<double> knots(nknots);
  for (int k = 0; k < nknots; ++k) {
    // Knots at equally spaced quantiles of the bin centers.
    const double pos = static_cast<double>(k) / (nknots - 1) * (nbins - 1);
    const int i = static_cast<int>(pos);
    const double frac = pos - i;
    knots[k] = i + 1 < nbins ? centers[i] + frac * (centers[i + 1] - centers[i])
                             : centers[nbins - 1];
  }
  const NaturalSplineBasis basis(knots);
  const int p = basis.size();

  Eigen::MatrixXd X(nbins, p);
  {
    std::vector<double> row(p);
    for (int j = 0; j < nbins; ++j) {
      basis.evaluate(centers[j], row.data());
      for (int c = 0; c < p; ++c) X(j, c) = row[c];
    }
  }
  const Eigen::Map<const Eigen::VectorXd> y(counts.data(), nbins);

  // Poisson regression by iteratively reweighted least squares, started
  // from a least-squares fit to log(y + 1).
  Eigen::VectorXd beta =
      X.colPivHouseholderQr().solve((y.array() + 1.0).log().matrix());
  double prev_dev = std::numeric_limits<double>::infinity();
  for (int it = 0; it < 100; ++it) {
    const Eigen::VectorXd eta = X * beta;
    const Eigen::VectorXd mu = eta.array().exp();
    const Eigen::VectorXd work = eta.array() + (y - mu).array() / mu.array();
    const Eigen::MatrixXd XtW = X.transpose() * mu.asDiagonal();
    const Eigen::VectorXd next = (XtW * X).ldlt().solve(XtW * work);
    if (!next.allFinite()) throw NumericalError("local fdr density fit diverged");
    beta = next;
    double dev = 0.0;
    const Eigen::VectorXd mu2 = (X * beta).array().exp();
    for (int j = 0; j < nbins; ++j) {
      if (y[j] > 0) dev += y[j] * std::log(y[j] / mu2[j]);
      dev -= y[j] - mu2[j];
    }
    if (std::abs(prev_dev - dev) < 1e-10 * (1.0 + std::abs(dev))) break;
    prev_dev = dev;
  }

  LocalFdrModel model;
  const double scale = static_cast<double>(z.size()) * width;
  const int npts = options.table_points;
  model.grid.resize(npts);
  model.f.resize(npts);
  std::vector<double> row(p);
  auto density = [&](double v) {
    basis.evaluate(unit(v), row.data());
    double eta = 0.0;
    for (int c = 0; c < p; ++c) eta += row[c] * beta[c];
    return std::exp(eta) / scale;
  };
  for (int i = 0; i < npts; ++i) {
    model.grid[i] = lo + (hi - lo) * i / (npts - 1);
    model.f[i] = density(model.grid[i]);
  }

  // Central matching at z = 0; outside the observed range the null is
  // matched at the closest point.
  const double anchor = std::clamp(0.0, lo, hi);
  model.p0 = std::min(1.0, density(anchor) / normal_pdf(anchor));
  model.f1.assign(npts, 0.0);
  if (model.p0 >= 1.0 - 1e-6) {
    model.p0 = 1.0;
    model.null_only = true;
    return model;
  }
  for (int i = 0; i < npts; ++i) {
    model.f1[i] = std::max(0.0, model.f[i] - model.p0 * normal_pdf(model.grid[i])) /
                  (1.0 - model.p0);
  }
  double mass = 0.0;
  for (int i = 0; i + 1 < npts; ++i) {
    mass += 0.5 * (model.f1[i] + model.f1[i + 1]) * (model.grid[i + 1] - model.grid[i]);
  }
  if (!(mass > 0.0)) {
    model.null_only = true;
    return model;
  }
  for (double& v : model.f1) v /= mass;
  return model;
}

}  // namespace stmrf
