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

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace stmrf {

/// Dimensions of a region x gene x time lattice. For the differential
/// expression model `periods` counts transition slots, not periods.
struct LatticeShape {
  int regions = 0;
  int genes = 0;
  int periods = 0;

  std::size_t cells() const {
    return static_cast<std::size_t>(regions) * genes * periods;
  }
  std::size_t cells_per_gene() const {
    return static_cast<std::size_t>(regions) * periods;
  }
  // Storage is gene-major, then region, then time, which is also the Gibbs
  // raster order.
  std::size_t index(int b, int g, int t) const {
    return (static_cast<std::size_t>(g) * regions + b) * periods + t;
  }
  bool contains(int b, int g, int t) const {
    return b >= 0 && b < regions && g >= 0 && g < genes && t >= 0 &&
           t < periods;
  }
  friend bool operator==(const LatticeShape&, const LatticeShape&) = default;
};

/// Throws InputError unless regions, genes, periods >= 1.
void validate(const LatticeShape& shape);

struct Cell {
  int region = 0;
  int gene = 0;
  int time = 0;
};

/// Binary latent states over a lattice with an optional exclusion mask.
/// Masked cells take part in no node or edge term.
class LatentGrid {
 public:
  LatentGrid() = default;
  explicit LatentGrid(LatticeShape shape);

  const LatticeShape& shape() const { return shape_; }

  std::uint8_t state(int b, int g, int t) const {
    return states_[shape_.index(b, g, t)];
  }
  void set(int b, int g, int t, std::uint8_t value) {
    states_[shape_.index(b, g, t)] = value ? 1 : 0;
  }
  std::uint8_t at(std::size_t i) const { return states_[i]; }
  void set_at(std::size_t i, std::uint8_t value) { states_[i] = value ? 1 : 0; }

  bool has_mask() const { return !mask_.empty(); }
  bool masked(int b, int g, int t) const {
    return !mask_.empty() && mask_[shape_.index(b, g, t)] != 0;
  }
  bool masked_at(std::size_t i) const { return !mask_.empty() && mask_[i] != 0; }
  void set_masked(int b, int g, int t, bool excluded);
  /// Replaces the mask wholesale; an empty span clears it.
  void set_mask(std::span<const std::uint8_t> mask);
  std::span<const std::uint8_t> mask() const { return mask_; }

  std::span<const std::uint8_t> states() const { return states_; }
  std::span<std::uint8_t> states() { return states_; }

  std::size_t active_cells() const;
  std::size_t ones() const;

  /// Copy holding only gene `g`, with shape.genes == 1.
  LatentGrid gene_slice(int g) const;

  friend bool operator==(const LatentGrid&, const LatentGrid&) = default;

 private:
  LatticeShape shape_{};
  std::vector<std::uint8_t> states_;
  std::vector<std::uint8_t> mask_;
};

struct Edge {
  Cell a;
  Cell b;
};

struct EdgeSets {
  std::vector<Edge> spatial;
  std::vector<Edge> temporal;
};

/// Edges of one gene's graph: all region pairs within a time slot, and
/// same-region adjacent time slots.
EdgeSets build_edges(const LatticeShape& shape, int gene = 0);

}  // namespace stmrf
