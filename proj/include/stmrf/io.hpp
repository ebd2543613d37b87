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

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "stmrf/de.hpp"
#include "stmrf/emission.hpp"
#include "stmrf/mcem.hpp"

namespace stmrf {

namespace fs = std::filesystem;

/// Reads a long-format tab-separated table with header
/// `gene region period replicate value` (any column order) and a JSON
/// sidecar declaring the vocabularies:
///
///   {"regions": [{"name": "A1C", "group": "neocortex"}, ...],
///    "periods": ["P3", "P4", ...]}
///
/// Genes are numbered by first appearance. Replicates within a cell keep
/// file order. Every gene must carry the same replicate count for a given
/// (region, period). Errors are InputError naming file, line and field.
ExpressionTensor load_dataset(const fs::path& table, const fs::path& metadata);

/// Writes `data` in the format load_dataset reads. Values use the shortest
/// decimal form that parses back to the same double.
void write_dataset(const ExpressionTensor& data, const fs::path& table,
                   const fs::path& metadata);

/// z-score grid with the labels it was read or written with. `slots` name
/// the transition slots.
struct ZScoreTable {
  ZScoreGrid grid;
  std::vector<std::string> regions;
  std::vector<std::string> slots;
  std::vector<std::string> genes;
};

/// Tab-separated `gene region slot z` (plus optional `df`), with a sidecar
/// in the load_dataset format whose "periods" list names the slots. Missing
/// rows and "nan" values are masked.
ZScoreTable load_zscores(const fs::path& table, const fs::path& metadata);
void write_zscores(const ZScoreTable& z, const fs::path& table,
                   const fs::path& metadata);

/// Shortest round-trip decimal; "nan", "inf" and "-inf" for non-finite.
std::string format_number(double value);

/// Tab-separated table; throws ResourceError when the file cannot be
/// written.
void write_table(const fs::path& path, const std::vector<std::string>& header,
                 const std::vector<std::vector<std::string>>& rows);

/// Lowercase hex SHA-256.
std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const fs::path& path);

/// Writes `contents` to a sibling temporary file and renames it over
/// `path`, so readers never see a partial file.
void write_file_atomic(const fs::path& path, std::string_view contents);
std::string read_file(const fs::path& path);

/// Run manifest: command, config, seed, library version and the SHA-256 of
/// every input file.
nlohmann::json make_manifest(const std::string& command,
                             const nlohmann::json& config, std::uint64_t seed,
                             const std::vector<fs::path>& inputs);

/// "shared_mean" or "independent".
ReplicateModel parse_replicate_model(const std::string& name);

/// "N@B/T[,N@B/T...]": N iterations at burn-in B and T total sweeps.
std::vector<McemStage> parse_stages(const std::string& text);
std::string format_stages(const std::vector<McemStage>& stages);

nlohmann::json to_json(const McemConfig& config);
/// Unknown keys are rejected. Missing keys keep the values of `base`.
McemConfig mcem_config_from_json(const nlohmann::json& j, McemConfig base);

nlohmann::json to_json(const GmmEmissionParams& theta);
GmmEmissionParams emission_params_from_json(const nlohmann::json& j);

void save_local_fdr(const fs::path& path, const LocalFdrModel& model);
LocalFdrModel load_local_fdr(const fs::path& path);

/// Checkpoint of an MCEM run, written atomically with a SHA-256 of its
/// payload. `config` is stored verbatim for provenance.
void save_checkpoint(const fs::path& path, const McemState& state,
                     const nlohmann::json& config = {});

/// Refuses (InputError) a file whose checksum, format version or fields do
/// not verify, and one whose lattice differs from `expected`. The stored
/// config is copied to `config` when given.
McemState load_checkpoint(const fs::path& path, const LatticeShape& expected,
                          nlohmann::json* config = nullptr);

/// Same without a shape check.
McemState load_checkpoint(const fs::path& path, nlohmann::json* config = nullptr);

}  // namespace stmrf
