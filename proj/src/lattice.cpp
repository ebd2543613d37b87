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

#include "stmrf/lattice.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "stmrf/error.hpp"

namespace stmrf {

void validate(const LatticeShape& shape) {
  if (shape.regions < 1 || shape.genes < 1 || shape.periods < 1) {
    throw InputError("lattice shape must have positive dimensions, got B=" +
                     std::to_string(shape.regions) +
                     " G=" + std::to_string(shape.genes) +
                     " T=" + std::to_string(shape.periods));
  }
}

LatentGrid::LatentGrid(LatticeShape shape)
    : shape_(shape), states_(shape.cells(), 0) {
  validate(shape);
}

void LatentGrid::set_masked(int b, int g, int t, bool excluded) {
  if (mask_.empty()) {
    if (!excluded) return;
    mask_.assign(shape_.cells(), 0);
  }
  mask_[shape_.index(b, g, t)] = excluded ? 1 : 0;
}

void LatentGrid::set_mask(std::span<const std::uint8_t> mask) {
  if (mask.empty()) {
    mask_.clear();
    return;
  }
  if (mask.size() != shape_.cells()) {
    throw InputError("mask size does not match lattice");
  }
  mask_.assign(mask.begin(), mask.end());
  for (auto& m : mask_) m = m ? 1 : 0;
}

std::size_t LatentGrid::active_cells() const {
  if (mask_.empty()) return states_.size();
  return static_cast<std::size_t>(
      std::count(mask_.begin(), mask_.end(), std::uint8_t{0}));
}

std::size_t LatentGrid::ones() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < states_.size(); ++i) {
    if (!masked_at(i) && states_[i]) ++n;
  }
  return n;
}

LatentGrid LatentGrid::gene_slice(int g) const {
  LatticeShape s = shape_;
  s.genes = 1;
  LatentGrid out(s);
  const std::size_t n = shape_.cells_per_gene();
  const std::size_t off = static_cast<std::size_t>(g) * n;
  std::copy_n(states_.begin() + off, n, out.states_.begin());
  if (!mask_.empty()) {
    out.mask_.assign(mask_.begin() + off, mask_.begin() + off + n);
  }
  return out;
}

EdgeSets build_edges(const LatticeShape& shape, int gene) {
  EdgeSets edges;
  const int nb = shape.regions;
  const int nt = shape.periods;
  edges.spatial.reserve(static_cast<std::size_t>(nt) * nb * (nb - 1) / 2);
  edges.temporal.reserve(static_cast<std::size_t>(nb) * std::max(nt - 1, 0));
  for (int t = 0; t < nt; ++t) {
    for (int b = 0; b < nb; ++b) {
      for (int b2 = b + 1; b2 < nb; ++b2) {
        edges.spatial.push_back({{b, gene, t}, {b2, gene, t}});
      }
    }
  }
  for (int b = 0; b < nb; ++b) {
    for (int t = 0; t + 1 < nt; ++t) {
      edges.temporal.push_back({{b, gene, t}, {b, gene, t + 1}});
    }
  }
  return edges;
}

}  // namespace stmrf
