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
#include <string>

#include "stmrf/error.hpp"
#include "stmrf/io.hpp"

namespace stmrf {

namespace {

using nlohmann::json;

constexpr const char* kFormat = "stmrf-checkpoint";
constexpr int kFormatVersion = 1;

std::string bits(std::span<const std::uint8_t> v) {
  std::string s(v.size(), '0');
  for (std::size_t i = 0; i < v.size(); ++i) s[i] = v[i] ? '1' : '0';
  return s;
}

std::vector<std::uint8_t> unbits(const std::string& s, std::size_t expected,
                                 const char* field) {
  if (s.size() != expected) {
    throw InputError(std::string("checkpoint field '") + field + "' has " +
                     std::to_string(s.size()) + " cells, expected " +
                     std::to_string(expected));
  }
  std::vector<std::uint8_t> v(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '0' && s[i] != '1') {
      throw InputError(std::string("checkpoint field '") + field +
                       "' holds a non-binary cell");
    }
    v[i] = s[i] == '1';
  }
  return v;
}

json payload_of(const McemState& st, const json& config) {
  const LatticeShape& s = st.grid.shape();
  json trace = json::array();
  for (const McemIteration& it : st.trace) {
    json e = {{"stage", it.stage},
              {"coefficients", it.coefficients},
              {"q_before", it.q_before},
              {"q_after", it.q_after},
              {"boundary", it.boundary}};
    if (it.theta) e["theta"] = to_json(*it.theta);
    trace.push_back(std::move(e));
  }
  json p = {{"kind", st.kind == ModelKind::expression ? "expression" : "differential"},
            {"coefficients", st.coefficients},
            {"sigma0_sq", st.sigma0_sq},
            {"shape", {s.regions, s.genes, s.periods}},
            {"states", bits(st.grid.states())},
            {"mask", bits(st.grid.mask())},
            {"trace", std::move(trace)},
            {"stable_iterations", st.stable_iterations},
            {"converged", st.converged},
            {"seed", st.seed},
            {"config", config}};
  if (st.theta) p["theta"] = to_json(*st.theta);
  return p;
}

McemState state_of(const json& p) {
  McemState st;
  const std::string kind = p.at("kind").get<std::string>();
  if (kind == "expression") {
    st.kind = ModelKind::expression;
  } else if (kind == "differential") {
    st.kind = ModelKind::differential;
  } else {
    throw InputError("checkpoint has unknown model kind '" + kind + "'");
  }
  st.coefficients = p.at("coefficients").get<std::vector<double>>();
  st.sigma0_sq = p.at("sigma0_sq").get<double>();
  const auto dims = p.at("shape").get<std::vector<int>>();
  if (dims.size() != 3) throw InputError("checkpoint shape must have 3 entries");
  const LatticeShape shape{dims[0], dims[1], dims[2]};
  validate(shape);
  st.grid = LatentGrid(shape);
  const auto states = unbits(p.at("states").get<std::string>(), shape.cells(), "states");
  std::copy(states.begin(), states.end(), st.grid.states().begin());
  const std::string mask = p.at("mask").get<std::string>();
  if (!mask.empty()) st.grid.set_mask(unbits(mask, shape.cells(), "mask"));
  for (const json& e : p.at("trace")) {
    McemIteration it;
    it.stage = e.at("stage").get<int>();
    it.coefficients = e.at("coefficients").get<std::vector<double>>();
    it.q_before = e.at("q_before").get<double>();
    it.q_after = e.at("q_after").get<double>();
    it.boundary = e.at("boundary").get<bool>();
    if (e.contains("theta")) it.theta = emission_params_from_json(e["theta"]);
    st.trace.push_back(std::move(it));
  }
  st.stable_iterations = p.at("stable_iterations").get<int>();
  st.converged = p.at("converged").get<bool>();
  st.seed = p.at("seed").get<std::uint64_t>();
  if (p.contains("theta")) st.theta = emission_params_from_json(p["theta"]);
  const std::size_t k = st.kind == ModelKind::expression ? 3 : 5;
  if (st.coefficients.size() != k) {
    throw InputError("checkpoint coefficient vector has the wrong length");
  }
  if (st.kind == ModelKind::expression && !st.theta) {
    throw InputError("expression checkpoint lacks emission parameters");
  }
  return st;
}

}  // namespace

void save_checkpoint(const fs::path& path, const McemState& state,
                     const json& config) {
  const json payload = payload_of(state, config);
  const json doc = {{"format", kFormat},
                    {"version", kFormatVersion},
                    {"sha256", sha256_hex(payload.dump())},
                    {"payload", payload}};
  write_file_atomic(path, doc.dump() + "\n");
}

McemState load_checkpoint(const fs::path& path, json* config) {
  const std::string where = path.string() + ": ";
  json doc;
  try {
    doc = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw InputError(where + "corrupt checkpoint (" + e.what() + ")");
  }
  try {
    if (doc.at("format").get<std::string>() != kFormat) {
      throw InputError(where + "not a checkpoint file");
    }
    if (doc.at("version").get<int>() != kFormatVersion) {
      throw InputError(where + "unsupported checkpoint version");
    }
    const json& payload = doc.at("payload");
    if (sha256_hex(payload.dump()) != doc.at("sha256").get<std::string>()) {
      throw InputError(where + "checkpoint checksum mismatch");
    }
    McemState st = state_of(payload);
    if (config) *config = payload.at("config");
    return st;
  } catch (const json::exception& e) {
    throw InputError(where + "corrupt checkpoint (" + e.what() + ")");
  } catch (const std::invalid_argument& e) {
    throw InputError(where + "corrupt checkpoint (" + e.what() + ")");
  } catch (const InputError& e) {
    const std::string msg = e.what();
    throw InputError(msg.rfind(where, 0) == 0 ? msg : where + msg);
  }
}

McemState load_checkpoint(const fs::path& path, const LatticeShape& expected,
                          json* config) {
  McemState st = load_checkpoint(path, config);
  const LatticeShape& s = st.grid.shape();
  if (!(s == expected)) {
    throw InputError(path.string() + ": checkpoint lattice " +
                     std::to_string(s.regions) + "x" + std::to_string(s.genes) + "x" +
                     std::to_string(s.periods) + " does not match data " +
                     std::to_string(expected.regions) + "x" +
                     std::to_string(expected.genes) + "x" +
                     std::to_string(expected.periods));
  }
  return st;
}

}  // namespace stmrf
