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
#include "stmrf/io.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>
#include <system_error>
#include <tuple>
#include <unordered_map>

#include "stmrf/error.hpp"
#include "stmrf/version.hpp"

namespace stmrf {

namespace {

using nlohmann::json;

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    if (tab == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
}

[[noreturn]] void fail_at(const fs::path& file, std::size_t line,
                          const std::string& field, const std::string& what) {
  std::string msg = file.string();
  if (line > 0) msg += ":" + std::to_string(line);
  if (!field.empty()) msg += ": field '" + field + "'";
  throw InputError(msg + ": " + what);
}

RegionGroup parse_group(const std::string& name, const fs::path& file) {
  if (name == "neocortex") return RegionGroup::neocortex;
  if (name == "non_neocortex" || name == "non-neocortex") {
    return RegionGroup::non_neocortex;
  }
  fail_at(file, 0, "group", "unknown region group '" + name + "'");
}

const char* group_name(RegionGroup g) {
  return g == RegionGroup::neocortex ? "neocortex" : "non_neocortex";
}

struct Metadata {
  std::vector<std::string> regions;
  std::vector<RegionGroup> groups;
  std::vector<std::string> periods;
};

Metadata read_metadata(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    fail_at(path, 0, "", std::string("invalid JSON: ") + e.what());
  }
  if (!j.is_object() || !j.contains("regions") || !j.contains("periods")) {
    fail_at(path, 0, "", "expected an object with 'regions' and 'periods'");
  }
  Metadata m;
  if (!j["regions"].is_array()) fail_at(path, 0, "regions", "expected an array");
  for (const json& r : j["regions"]) {
    if (r.is_string()) {
      m.regions.push_back(r.get<std::string>());
      m.groups.push_back(RegionGroup::neocortex);
    } else if (r.is_object() && r.contains("name") && r["name"].is_string()) {
      m.regions.push_back(r["name"].get<std::string>());
      const std::string g = r.value("group", std::string("neocortex"));
      m.groups.push_back(parse_group(g, path));
    } else {
      fail_at(path, 0, "regions", "entries must be names or {name, group}");
    }
  }
  if (!j["periods"].is_array()) fail_at(path, 0, "periods", "expected an array");
  for (const json& p : j["periods"]) {
    if (!p.is_string()) fail_at(path, 0, "periods", "entries must be strings");
    m.periods.push_back(p.get<std::string>());
  }
  if (m.regions.empty() || m.periods.empty()) {
    fail_at(path, 0, "", "no regions or no periods declared");
  }
  return m;
}

template <typename Map>
void check_unique(const std::vector<std::string>& names, Map& index,
                  const fs::path& path, const char* field) {
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (!index.emplace(names[i], static_cast<int>(i)).second) {
      fail_at(path, 0, field, "duplicate name '" + names[i] + "'");
    }
  }
}

struct TsvReader {
  fs::path path;
  std::ifstream in;
  std::vector<std::string> header;
  std::size_t lineno = 0;

  TsvReader(const fs::path& p, std::initializer_list<const char*> required)
      : path(p), in(p) {
    if (!in) throw InputError(path.string() + ": cannot open for reading");
    std::string line;
    if (!std::getline(in, line)) fail_at(path, 1, "", "missing header");
    lineno = 1;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    for (auto f : split_tabs(line)) header.emplace_back(f);
    for (const char* name : required) column(name);
  }

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return i;
    }
    fail_at(path, 1, name, "column missing from header");
  }

  bool has(const std::string& name) const {
    return std::find(header.begin(), header.end(), name) != header.end();
  }

  /// Next non-empty row, split; false at end of file.
  bool next(std::string& line, std::vector<std::string_view>& fields) {
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      fields = split_tabs(line);
      if (fields.size() != header.size()) {
        fail_at(path, lineno, "", "expected " + std::to_string(header.size()) +
                                      " fields, found " + std::to_string(fields.size()));
      }
      return true;
    }
    return false;
  }
};

double parse_real(std::string_view text, const fs::path& path, std::size_t line,
                  const char* field, bool allow_nan) {
  if (allow_nan && (text == "nan" || text == "NaN" || text == "NA" || text.empty())) {
    return std::numeric_limits<double>::quiet_NaN();
  }
  double v = 0.0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size() || !std::isfinite(v)) {
    fail_at(path, line, field, "not a finite number '" + std::string(text) + "'");
  }
  return v;
}

}  // namespace

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError(path.string() + ": cannot open for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const fs::path& path, std::string_view contents) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ResourceError(tmp.string() + ": cannot open for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    out.flush();
    if (!out) throw ResourceError(tmp.string() + ": write failed");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw ResourceError(path.string() + ": rename failed");
  }
}

std::string format_number(double value) {
  if (std::isnan(value)) return "nan";
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  std::array<char, 32> buf{};
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), value);
  return std::string(buf.data(), res.ptr);
}

ExpressionTensor load_dataset(const fs::path& table, const fs::path& metadata) {
  const Metadata meta = read_metadata(metadata);
  std::unordered_map<std::string, int> region_index, period_index;
  check_unique(meta.regions, region_index, metadata, "regions");
  check_unique(meta.periods, period_index, metadata, "periods");
  const int nb = static_cast<int>(meta.regions.size());
  const int nt = static_cast<int>(meta.periods.size());

  TsvReader reader(table, {"gene", "region", "period", "replicate", "value"});
  const std::size_t c_gene = reader.column("gene");
  const std::size_t c_region = reader.column("region");
  const std::size_t c_period = reader.column("period");
  const std::size_t c_rep = reader.column("replicate");
  const std::size_t c_value = reader.column("value");

  std::vector<std::string> genes;
  std::unordered_map<std::string, int> gene_index;
  // (gene, region, period) -> values in file order.
  std::map<std::tuple<int, int, int>, std::vector<double>> cells;
  std::map<std::tuple<int, int, int, std::string>, std::size_t> seen;

  std::string line;
  std::vector<std::string_view> fields;
  while (reader.next(line, fields)) {
    const std::size_t lineno = reader.lineno;
    const std::string gene(fields[c_gene]);
    const std::string region(fields[c_region]);
    const std::string period(fields[c_period]);
    const std::string replicate(fields[c_rep]);
    if (gene.empty()) fail_at(table, lineno, "gene", "empty gene name");
    const auto r = region_index.find(region);
    if (r == region_index.end()) {
      fail_at(table, lineno, "region", "unknown region '" + region + "'");
    }
    const auto p = period_index.find(period);
    if (p == period_index.end()) {
      fail_at(table, lineno, "period", "unknown period '" + period + "'");
    }
    const double v = parse_real(fields[c_value], table, lineno, "value", false);
    auto [git, inserted] = gene_index.emplace(gene, static_cast<int>(genes.size()));
    if (inserted) genes.push_back(gene);
    const int g = git->second;
    const auto key = std::make_tuple(g, r->second, p->second, replicate);
    const auto [sit, fresh] = seen.emplace(key, lineno);
    if (!fresh) {
      fail_at(table, lineno, "replicate",
              "duplicate key (" + gene + ", " + region + ", " + period + ", " +
                  replicate + "), first seen on line " + std::to_string(sit->second));
    }
    cells[{g, r->second, p->second}].push_back(v);
  }
  if (genes.empty()) fail_at(table, reader.lineno, "", "no data rows");

  const int ng = static_cast<int>(genes.size());
  std::vector<int> counts(static_cast<std::size_t>(nb) * nt, -1);
  for (int g = 0; g < ng; ++g) {
    for (int b = 0; b < nb; ++b) {
      for (int t = 0; t < nt; ++t) {
        const auto it = cells.find({g, b, t});
        const int n = it == cells.end() ? 0 : static_cast<int>(it->second.size());
        int& c = counts[static_cast<std::size_t>(b) * nt + t];
        if (c < 0) {
          c = n;
        } else if (c != n) {
          fail_at(table, 0, "replicate",
                  "gene '" + genes[g] + "' has " + std::to_string(n) +
                      " replicates for (" + meta.regions[b] + ", " + meta.periods[t] +
                      "), other genes have " + std::to_string(c));
        }
      }
    }
  }

  ExpressionTensor data(LatticeShape{nb, ng, nt}, counts);
  for (const auto& [key, values] : cells) {
    const auto [g, b, t] = key;
    auto dst = data.values(b, g, t);
    std::copy(values.begin(), values.end(), dst.begin());
  }
  data.region_names = meta.regions;
  data.period_names = meta.periods;
  data.gene_names = genes;
  data.region_groups = meta.groups;
  return data;
}

void write_dataset(const ExpressionTensor& data, const fs::path& table,
                   const fs::path& metadata) {
  const LatticeShape& s = data.shape();
  auto name = [](const std::vector<std::string>& names, int i, const char* prefix) {
    return i < static_cast<int>(names.size()) ? names[i]
                                              : prefix + std::to_string(i + 1);
  };
  json meta;
  meta["regions"] = json::array();
  for (int b = 0; b < s.regions; ++b) {
    const RegionGroup grp = b < static_cast<int>(data.region_groups.size())
                                ? data.region_groups[b]
                                : RegionGroup::neocortex;
    meta["regions"].push_back({{"name", name(data.region_names, b, "R")},
                               {"group", group_name(grp)}});
  }
  meta["periods"] = json::array();
  for (int t = 0; t < s.periods; ++t) {
    meta["periods"].push_back(name(data.period_names, t, "P"));
  }
  write_file_atomic(metadata, meta.dump(2) + "\n");

  std::string out = "gene\tregion\tperiod\treplicate\tvalue\n";
  for (int g = 0; g < s.genes; ++g) {
    const std::string gname = name(data.gene_names, g, "G");
    for (int b = 0; b < s.regions; ++b) {
      const std::string rname = name(data.region_names, b, "R");
      for (int t = 0; t < s.periods; ++t) {
        const std::string pname = name(data.period_names, t, "P");
        const auto y = data.values(b, g, t);
        for (std::size_t k = 0; k < y.size(); ++k) {
          out += gname + '\t' + rname + '\t' + pname + '\t' +
                 std::to_string(k + 1) + '\t' + format_number(y[k]) + '\n';
        }
      }
    }
  }
  write_file_atomic(table, out);
}

ZScoreTable load_zscores(const fs::path& table, const fs::path& metadata) {
  const Metadata meta = read_metadata(metadata);
  std::unordered_map<std::string, int> region_index, slot_index;
  check_unique(meta.regions, region_index, metadata, "regions");
  check_unique(meta.periods, slot_index, metadata, "periods");
  TsvReader reader(table, {"gene", "region", "slot", "z"});
  const std::size_t c_gene = reader.column("gene");
  const std::size_t c_region = reader.column("region");
  const std::size_t c_slot = reader.column("slot");
  const std::size_t c_z = reader.column("z");
  const bool has_df = reader.has("df");
  const std::size_t c_df = has_df ? reader.column("df") : 0;

  struct Row {
    int g, b, t;
    double z;
  };
  std::vector<Row> rows;
  std::vector<std::string> genes;
  std::unordered_map<std::string, int> gene_index;
  std::map<std::tuple<int, int, int>, std::size_t> seen;
  const int nb = static_cast<int>(meta.regions.size());
  const int nt = static_cast<int>(meta.periods.size());
  std::vector<int> df(static_cast<std::size_t>(nb) * nt, 0);

  std::string line;
  std::vector<std::string_view> fields;
  while (reader.next(line, fields)) {
    const std::size_t lineno = reader.lineno;
    const std::string gene(fields[c_gene]);
    if (gene.empty()) fail_at(table, lineno, "gene", "empty gene name");
    const auto r = region_index.find(std::string(fields[c_region]));
    if (r == region_index.end()) {
      fail_at(table, lineno, "region", "unknown region '" + std::string(fields[c_region]) + "'");
    }
    const auto t = slot_index.find(std::string(fields[c_slot]));
    if (t == slot_index.end()) {
      fail_at(table, lineno, "slot", "unknown slot '" + std::string(fields[c_slot]) + "'");
    }
    const double z = parse_real(fields[c_z], table, lineno, "z", true);
    auto [git, inserted] = gene_index.emplace(gene, static_cast<int>(genes.size()));
    if (inserted) genes.push_back(gene);
    const auto [sit, fresh] = seen.emplace(std::make_tuple(git->second, r->second, t->second), lineno);
    if (!fresh) {
      fail_at(table, lineno, "slot", "duplicate (gene, region, slot), first seen on line " +
                                         std::to_string(sit->second));
    }
    if (has_df) {
      const double d = parse_real(fields[c_df], table, lineno, "df", false);
      df[static_cast<std::size_t>(r->second) * nt + t->second] = static_cast<int>(d);
    }
    rows.push_back({git->second, r->second, t->second, z});
  }
  if (genes.empty()) fail_at(table, reader.lineno, "", "no data rows");

  ZScoreTable out;
  ZScoreGrid& grid = out.grid;
  grid.shape = LatticeShape{nb, static_cast<int>(genes.size()), nt};
  grid.z.assign(grid.shape.cells(), std::numeric_limits<double>::quiet_NaN());
  grid.mask.assign(grid.shape.cells(), 1);
  grid.df = std::move(df);
  grid.groups = meta.groups;
  for (const Row& row : rows) {
    if (std::isnan(row.z)) continue;
    const std::size_t i = grid.shape.index(row.b, row.g, row.t);
    grid.z[i] = row.z;
    grid.mask[i] = 0;
  }
  out.regions = meta.regions;
  out.slots = meta.periods;
  out.genes = std::move(genes);
  return out;
}

void write_zscores(const ZScoreTable& zt, const fs::path& table,
                   const fs::path& metadata) {
  const ZScoreGrid& z = zt.grid;
  const LatticeShape& s = z.shape;
  auto name = [](const std::vector<std::string>& names, int i, const char* prefix) {
    return i < static_cast<int>(names.size()) ? names[i]
                                              : prefix + std::to_string(i + 1);
  };
  json meta;
  meta["regions"] = json::array();
  for (int b = 0; b < s.regions; ++b) {
    const RegionGroup grp = b < static_cast<int>(z.groups.size()) ? z.groups[b]
                                                                  : RegionGroup::neocortex;
    meta["regions"].push_back({{"name", name(zt.regions, b, "R")}, {"group", group_name(grp)}});
  }
  meta["periods"] = json::array();
  for (int t = 0; t < s.periods; ++t) meta["periods"].push_back(name(zt.slots, t, "S"));
  write_file_atomic(metadata, meta.dump(2) + "\n");

  const bool with_df = z.df.size() == static_cast<std::size_t>(s.regions) * s.periods;
  std::string out = with_df ? "gene\tregion\tslot\tz\tdf\n" : "gene\tregion\tslot\tz\n";
  for (int g = 0; g < s.genes; ++g) {
    for (int b = 0; b < s.regions; ++b) {
      for (int t = 0; t < s.periods; ++t) {
        const std::size_t i = s.index(b, g, t);
        out += name(zt.genes, g, "G") + '\t' + name(zt.regions, b, "R") + '\t' +
               name(zt.slots, t, "S") + '\t' +
               format_number(z.masked(i) ? std::numeric_limits<double>::quiet_NaN() : z.z[i]);
        if (with_df) out += '\t' + std::to_string(z.df[static_cast<std::size_t>(b) * s.periods + t]);
        out += '\n';
      }
    }
  }
  write_file_atomic(table, out);
}

void write_table(const fs::path& path, const std::vector<std::string>& header,
                 const std::vector<std::vector<std::string>>& rows) {
  std::string out;
  auto append = [&out](const std::vector<std::string>& row) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) out += '\t';
      out += row[i];
    }
    out += '\n';
  };
  append(header);
  for (const auto& row : rows) {
    if (row.size() != header.size()) {
      throw std::invalid_argument("row width does not match header");
    }
    append(row);
  }
  write_file_atomic(path, out);
}

std::string sha256_hex(std::string_view bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(),
                 nullptr) != 1) {
    throw ResourceError("SHA-256 digest failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out += kHex[md[i] >> 4];
    out += kHex[md[i] & 0xf];
  }
  return out;
}

std::string sha256_file(const fs::path& path) { return sha256_hex(read_file(path)); }

json make_manifest(const std::string& command, const json& config,
                   std::uint64_t seed, const std::vector<fs::path>& inputs) {
  json m;
  m["command"] = command;
  m["version"] = kVersion;
  m["seed"] = seed;
  m["config"] = config;
  m["inputs"] = json::array();
  for (const fs::path& p : inputs) {
    m["inputs"].push_back({{"path", p.string()}, {"sha256", sha256_file(p)}});
  }
  return m;
}

ReplicateModel parse_replicate_model(const std::string& name) {
  if (name == "shared_mean") return ReplicateModel::shared_mean;
  if (name == "independent") return ReplicateModel::independent;
  throw InputError("unknown replicate model '" + name +
                   "' (expected shared_mean or independent)");
}

std::vector<McemStage> parse_stages(const std::string& text) {
  std::vector<McemStage> stages;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    int n = 0, burn = 0, total = 0;
    char at = 0, slash = 0;
    std::istringstream is(item);
    if (!(is >> n >> at >> burn >> slash >> total) || at != '@' || slash != '/' ||
        !(is >> std::ws).eof()) {
      throw InputError("stage '" + item + "' is not of the form N@BURN/TOTAL");
    }
    if (n < 1 || burn < 0 || total <= burn) {
      throw InputError("stage '" + item + "' needs N >= 1 and TOTAL > BURN >= 0");
    }
    stages.push_back({n, ChainSchedule{burn, total - burn, 0}});
  }
  if (stages.empty()) throw InputError("empty stage schedule");
  return stages;
}

std::string format_stages(const std::vector<McemStage>& stages) {
  std::string out;
  for (const McemStage& s : stages) {
    if (!out.empty()) out += ',';
    out += std::to_string(s.iterations) + '@' + std::to_string(s.chain.burn_in) +
           '/' + std::to_string(s.chain.burn_in + s.chain.kept);
  }
  return out;
}

json to_json(const McemConfig& c) {
  return {{"stages", format_stages(c.stages)},
          {"optimizer_tolerance", c.optimizer_tolerance},
          {"convergence_tolerance", c.convergence_tolerance},
          {"convergence_window", c.convergence_window},
          {"bound", c.bound},
          {"seed", c.seed},
          {"freeze_couplings", c.freeze_couplings},
          {"replicates", c.replicates == ReplicateModel::shared_mean ? "shared_mean"
                                                                      : "independent"}};
}

McemConfig mcem_config_from_json(const json& j, McemConfig c) {
  if (!j.is_object()) throw InputError("MCEM config must be a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "stages") {
        c.stages = parse_stages(v.get<std::string>());
      } else if (key == "optimizer_tolerance") {
        c.optimizer_tolerance = v.get<double>();
      } else if (key == "convergence_tolerance") {
        c.convergence_tolerance = v.get<double>();
      } else if (key == "convergence_window") {
        c.convergence_window = v.get<int>();
      } else if (key == "bound") {
        c.bound = v.get<double>();
      } else if (key == "seed") {
        c.seed = v.get<std::uint64_t>();
      } else if (key == "freeze_couplings") {
        c.freeze_couplings = v.get<bool>();
      } else if (key == "replicates") {
        c.replicates = parse_replicate_model(v.get<std::string>());
      } else {
        throw InputError("unknown MCEM config key '" + key + "'");
      }
    }
  } catch (const json::type_error& e) {
    throw InputError(std::string("MCEM config: ") + e.what());
  }
  return c;
}

json to_json(const GmmEmissionParams& th) {
  return {{"mu1", th.mu1},
          {"sigma1", th.sigma1},
          {"mu2", th.mu2},
          {"sigma2", th.sigma2},
          {"sigma0", th.sigma0},
          {"replicates", th.replicates == ReplicateModel::shared_mean
                             ? "shared_mean"
                             : "independent"}};
}

GmmEmissionParams emission_params_from_json(const json& j) {
  GmmEmissionParams th;
  th.mu1 = j.at("mu1").get<std::vector<double>>();
  th.sigma1 = j.at("sigma1").get<std::vector<double>>();
  th.mu2 = j.at("mu2").get<std::vector<double>>();
  th.sigma2 = j.at("sigma2").get<std::vector<double>>();
  th.sigma0 = j.at("sigma0").get<double>();
  th.replicates =
      parse_replicate_model(j.value("replicates", std::string("shared_mean")));
  const std::size_t n = th.mu1.size();
  if (th.sigma1.size() != n || th.mu2.size() != n || th.sigma2.size() != n) {
    throw InputError("emission parameter vectors differ in length");
  }
  return th;
}

void save_local_fdr(const fs::path& path, const LocalFdrModel& m) {
  const json j = {{"grid", m.grid}, {"f", m.f},           {"f1", m.f1},
                  {"p0", m.p0},     {"null_only", m.null_only}};
  write_file_atomic(path, j.dump() + "\n");
}

LocalFdrModel load_local_fdr(const fs::path& path) {
  LocalFdrModel m;
  try {
    const json j = json::parse(read_file(path));
    m.grid = j.at("grid").get<std::vector<double>>();
    m.f = j.at("f").get<std::vector<double>>();
    m.f1 = j.at("f1").get<std::vector<double>>();
    m.p0 = j.at("p0").get<double>();
    m.null_only = j.at("null_only").get<bool>();
  } catch (const json::exception& e) {
    throw InputError(path.string() + ": " + e.what());
  }
  if (m.grid.size() < 2 || m.f.size() != m.grid.size() ||
      m.f1.size() != m.grid.size()) {
    throw InputError(path.string() + ": density table is malformed");
  }
  return m;
}

}  // namespace stmrf
