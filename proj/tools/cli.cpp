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
#include "cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <new>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "stmrf/de.hpp"
#include "stmrf/error.hpp"
#include "stmrf/io.hpp"
#include "stmrf/mcem.hpp"
#include "stmrf/rng.hpp"
#include "stmrf/sampler.hpp"
#include "stmrf/sim.hpp"
#include "stmrf/version.hpp"

namespace stmrf::cli {

namespace {

using nlohmann::json;

constexpr std::uint64_t kPosteriorTag = 0x504f5354ULL;

struct Settings {
  std::string input;
  std::string metadata;
  std::string zscores;
  std::string calls;
  std::string gene_set;
  std::string config;
  std::string checkpoint;
  std::string out = ".";
  std::string stages;
  std::string posterior;
  std::string replicates = "shared_mean";
  std::string setting = "expr-1";
  std::uint64_t seed = 1;
  double alpha = 0.05;
  double cutoff = 0.5;
  double rate = -1.0;
  double mu2 = std::numeric_limits<double>::quiet_NaN();
  double flip = std::numeric_limits<double>::quiet_NaN();
  int runs = 100;
  int threads = 0;
  bool resume = false;
  LocalFdrOptions fdr;
  json mcem = json::object();  // "mcem" block of the config file
};

std::string label(const std::vector<std::string>& names, int i, const char* prefix) {
  return i < static_cast<int>(names.size()) ? names[i] : prefix + std::to_string(i + 1);
}

std::string fmt(double v) { return format_number(v); }

// ---------------------------------------------------------------------------
// Configuration

// Applies config-file keys whose command-line option was not given.
void apply_config(Settings& s, const CLI::App& sub) {
  if (s.config.empty()) return;
  json j;
  try {
    j = json::parse(read_file(s.config));
  } catch (const json::parse_error& e) {
    throw InputError(s.config + ": invalid JSON: " + e.what());
  }
  if (!j.is_object()) throw InputError(s.config + ": config must be a JSON object");
  auto given = [&](const char* flag) {
    const CLI::Option* opt = sub.get_option_no_throw(flag);
    return opt != nullptr && opt->count() > 0;
  };
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "seed") {
        if (!given("--seed")) s.seed = v.get<std::uint64_t>();
      } else if (key == "alpha") {
        if (!given("--alpha")) s.alpha = v.get<double>();
      } else if (key == "cutoff") {
        if (!given("--cutoff")) s.cutoff = v.get<double>();
      } else if (key == "stages") {
        if (!given("--stages")) s.stages = v.get<std::string>();
      } else if (key == "posterior") {
        if (!given("--posterior")) s.posterior = v.get<std::string>();
      } else if (key == "replicates") {
        if (!given("--replicates")) s.replicates = v.get<std::string>();
      } else if (key == "runs") {
        if (!given("--runs")) s.runs = v.get<int>();
      } else if (key == "threads") {
        if (!given("--threads")) s.threads = v.get<int>();
      } else if (key == "mu2") {
        if (!given("--mu2")) s.mu2 = v.get<double>();
      } else if (key == "flip") {
        if (!given("--flip")) s.flip = v.get<double>();
      } else if (key == "setting") {
        if (!given("--setting")) s.setting = v.get<std::string>();
      } else if (key == "mcem") {
        s.mcem = v;
      } else if (key == "local_fdr") {
        for (const auto& [k, x] : v.items()) {
          if (k == "bins") {
            s.fdr.bins = x.get<int>();
          } else if (k == "spline_df") {
            s.fdr.spline_df = x.get<int>();
          } else if (k == "table_points") {
            s.fdr.table_points = x.get<int>();
          } else {
            throw InputError(s.config + ": unknown local_fdr key '" + k + "'");
          }
        }
      } else {
        throw InputError(s.config + ": unknown config key '" + key + "'");
      }
    }
  } catch (const json::type_error& e) {
    throw InputError(s.config + ": " + e.what());
  }
}

McemConfig mcem_config(const Settings& s, McemConfig base) {
  McemConfig c = mcem_config_from_json(s.mcem, std::move(base));
  if (!s.stages.empty()) c.stages = parse_stages(s.stages);
  c.seed = s.seed;
  c.replicates = parse_replicate_model(s.replicates);
  validate(c);
  return c;
}

ChainSchedule posterior_schedule(const Settings& s, const McemConfig& c,
                                 std::uint64_t seed) {
  ChainSchedule sched = c.stages.back().chain;
  if (!s.posterior.empty()) {
    int burn = 0, total = 0;
    char slash = 0;
    std::istringstream is(s.posterior);
    if (!(is >> burn >> slash >> total) || slash != '/' || !(is >> std::ws).eof() ||
        burn < 0 || total <= burn) {
      throw InputError("--posterior expects BURN/TOTAL with TOTAL > BURN >= 0");
    }
    sched = ChainSchedule{burn, total - burn, 0};
  }
  Engine e = make_stream(seed, {kPosteriorTag});
  sched.seed = e();
  return sched;
}

json settings_json(const Settings& s, const McemConfig* c) {
  json j = {{"seed", s.seed},     {"alpha", s.alpha},   {"cutoff", s.cutoff},
            {"threads", s.threads}, {"replicates", s.replicates},
            {"local_fdr",
             {{"bins", s.fdr.bins},
              {"spline_df", s.fdr.spline_df},
              {"table_points", s.fdr.table_points}}}};
  if (!s.posterior.empty()) j["posterior"] = s.posterior;
  if (c) j["mcem"] = to_json(*c);
  return j;
}

void set_threads(const Settings& s) {
  int n = s.threads;
  if (n <= 0) {
    if (const char* env = std::getenv("STMRF_THREADS")) {
      try {
        n = std::stoi(env);
      } catch (const std::exception&) {
        throw InputError(std::string("STMRF_THREADS is not an integer: '") + env + "'");
      }
    }
  }
  if (n < 0) throw InputError("thread count must be positive");
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
#endif
}

fs::path out_dir(const Settings& s) {
  const fs::path dir(s.out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw ResourceError(dir.string() + ": cannot create output directory");
  }
  return dir;
}

void write_manifest(const fs::path& dir, const std::string& command, const json& config,
                    std::uint64_t seed, const std::vector<fs::path>& inputs) {
  write_file_atomic(dir / "manifest.json",
                    make_manifest(command, config, seed, inputs).dump(2) + "\n");
}

std::vector<fs::path> existing(std::initializer_list<std::string> paths) {
  std::vector<fs::path> out;
  for (const std::string& p : paths) {
    if (!p.empty()) out.emplace_back(p);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shared writers

std::vector<std::string> coefficient_names(ModelKind kind) {
  if (kind == ModelKind::expression) return {"gamma", "beta_spatial", "beta_temporal"};
  return {"gamma_de", "beta_cc", "beta_nn", "beta_cn", "beta_t"};
}

void write_phi(const fs::path& path, ModelKind kind, const std::vector<double>& coef) {
  const auto names = coefficient_names(kind);
  std::vector<std::vector<std::string>> rows;
  for (std::size_t i = 0; i < coef.size(); ++i) rows.push_back({names[i], fmt(coef[i])});
  write_table(path, {"parameter", "value"}, rows);
}

void write_trace(const fs::path& path, const McemState& st) {
  std::vector<std::string> header = {"iteration", "stage", "q_before", "q_after", "boundary"};
  for (const auto& n : coefficient_names(st.kind)) header.push_back(n);
  std::vector<std::vector<std::string>> rows;
  for (std::size_t r = 0; r < st.trace.size(); ++r) {
    const McemIteration& it = st.trace[r];
    std::vector<std::string> row = {std::to_string(r + 1), std::to_string(it.stage + 1),
                                    fmt(it.q_before), fmt(it.q_after),
                                    it.boundary ? "1" : "0"};
    for (double c : it.coefficients) row.push_back(fmt(c));
    rows.push_back(std::move(row));
  }
  write_table(path, header, rows);
}

IterationCallback checkpointer(const Settings& s, const json& config, std::ostream& out) {
  return [&s, config, &out](const McemState& st) {
    if (!s.checkpoint.empty()) save_checkpoint(s.checkpoint, st, config);
    out << "iteration " << st.completed();
    for (double c : st.coefficients) out << ' ' << fmt(c);
    out << '\n';
  };
}

std::optional<McemState> maybe_resume(const Settings& s, const LatticeShape& shape) {
  if (!s.resume) return std::nullopt;
  if (s.checkpoint.empty()) throw InputError("--resume requires --checkpoint");
  if (!fs::exists(s.checkpoint)) return std::nullopt;
  return load_checkpoint(s.checkpoint, shape);
}

// ---------------------------------------------------------------------------
// Expression pipeline

int fit_expression(const Settings& s, const McemConfig& cfg, std::optional<McemState> resume,
                   const std::string& command, std::ostream& out) {
  const ExpressionTensor data = load_dataset(s.input, s.metadata);
  if (resume && !(resume->grid.shape() == data.shape())) {
    throw InputError(s.checkpoint + ": checkpoint lattice does not match the data");
  }
  const json config = settings_json(s, &cfg);
  const ExpressionFit fit = mcem_fit_expression(data, cfg, checkpointer(s, config, out),
                                                resume ? &*resume : nullptr);
  const ChainSchedule sched = posterior_schedule(s, cfg, fit.state.seed);
  const GibbsModel model{MrfTopology::expression(data.shape()), to_coefficients(fit.phi),
                         emission_log_odds(data, fit.theta)};
  const PosteriorGrid post = posterior_marginals(fit.state.grid, model, sched);

  const fs::path dir = out_dir(s);
  write_phi(dir / "phi.tsv", ModelKind::expression, to_coefficients(fit.phi));
  {
    std::vector<std::vector<std::string>> rows;
    for (int b = 0; b < data.shape().regions; ++b) {
      rows.push_back({label(data.region_names, b, "R"), fmt(fit.theta.mu1[b]),
                      fmt(fit.theta.sigma1[b]), fmt(fit.theta.mu2[b]),
                      fmt(fit.theta.sigma2[b]), fmt(fit.theta.sigma0)});
    }
    write_table(dir / "theta.tsv", {"region", "mu1", "sigma1", "mu2", "sigma2", "sigma0"},
                rows);
  }
  const LatticeShape& sh = data.shape();
  std::vector<std::vector<std::string>> prob_rows, call_rows;
  std::size_t expressed = 0;
  for (int g = 0; g < sh.genes; ++g) {
    for (int b = 0; b < sh.regions; ++b) {
      for (int t = 0; t < sh.periods; ++t) {
        const double p = post.prob_one[sh.index(b, g, t)];
        const bool call = p >= s.cutoff;
        expressed += call;
        std::vector<std::string> key = {label(data.gene_names, g, "G"),
                                        label(data.region_names, b, "R"),
                                        label(data.period_names, t, "P")};
        prob_rows.push_back(key);
        prob_rows.back().push_back(fmt(p));
        call_rows.push_back(std::move(key));
        call_rows.back().push_back(call ? "1" : "0");
      }
    }
  }
  write_table(dir / "posterior.tsv", {"gene", "region", "period", "prob_expressed"}, prob_rows);
  write_table(dir / "calls.tsv", {"gene", "region", "period", "expressed"}, call_rows);
  write_trace(dir / "trace.tsv", fit.state);
  json manifest_config = config;
  manifest_config["posterior_chain"] = {{"burn_in", sched.burn_in}, {"kept", sched.kept}};
  manifest_config["iterations_completed"] = fit.state.completed();
  manifest_config["converged"] = fit.state.converged;
  write_manifest(dir, command, manifest_config, fit.state.seed,
                 existing({s.input, s.metadata, s.config}));
  out << "phi";
  for (double c : to_coefficients(fit.phi)) out << ' ' << fmt(c);
  out << "\nexpressed " << expressed << " of " << sh.cells() << " cells\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// DE pipeline

LatentGrid read_calls(const fs::path& path, const ExpressionTensor& data) {
  std::unordered_map<std::string, int> genes, regions, periods;
  for (int g = 0; g < data.shape().genes; ++g) genes[label(data.gene_names, g, "G")] = g;
  for (int b = 0; b < data.shape().regions; ++b) regions[label(data.region_names, b, "R")] = b;
  for (int t = 0; t < data.shape().periods; ++t) periods[label(data.period_names, t, "P")] = t;
  std::ifstream in(path);
  if (!in) throw InputError(path.string() + ": cannot open for reading");
  std::string line;
  std::getline(in, line);
  if (line != "gene\tregion\tperiod\texpressed") {
    throw InputError(path.string() + ":1: expected header gene, region, period, expressed");
  }
  LatentGrid grid(data.shape());
  std::vector<std::uint8_t> seen(data.shape().cells(), 0);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream is(line);
    std::string g, b, t, v;
    std::getline(is, g, '\t');
    std::getline(is, b, '\t');
    std::getline(is, t, '\t');
    std::getline(is, v, '\t');
    const auto gi = genes.find(g), bi = regions.find(b), ti = periods.find(t);
    if (gi == genes.end() || bi == regions.end() || ti == periods.end()) {
      throw InputError(path.string() + ":" + std::to_string(lineno) +
                       ": unknown gene, region or period");
    }
    if (v != "0" && v != "1") {
      throw InputError(path.string() + ":" + std::to_string(lineno) +
                       ": field 'expressed' must be 0 or 1");
    }
    const std::size_t i = data.shape().index(bi->second, gi->second, ti->second);
    grid.set_at(i, v == "1");
    seen[i] = 1;
  }
  for (std::size_t i = 0; i < seen.size(); ++i) {
    if (!seen[i]) throw InputError(path.string() + ": calls do not cover every cell");
  }
  return grid;
}

int fit_de(const Settings& s, const McemConfig& cfg, std::optional<McemState> resume,
           const std::string& command, std::ostream& out) {
  ZScoreTable zt;
  std::vector<MaskedCell> masked;
  if (!s.zscores.empty()) {
    zt = load_zscores(s.zscores, s.metadata);
  } else {
    if (s.input.empty()) throw InputError("fit-de needs --input or --zscores");
    const ExpressionTensor data = load_dataset(s.input, s.metadata);
    const LatentGrid expressed =
        s.calls.empty()
            ? fit_plain_gmm(data, estimate_replicate_variance(data)).states
            : read_calls(s.calls, data);
    zt.grid = build_zscore_grid(data, expressed, &masked);
    zt.grid.groups = data.region_groups;
    zt.regions = data.region_names;
    zt.genes = data.gene_names;
    for (int t = 0; t + 1 < data.shape().periods; ++t) {
      zt.slots.push_back(label(data.period_names, t, "P") + "-" +
                         label(data.period_names, t + 1, "P"));
    }
  }
  const ZScoreGrid& z = zt.grid;
  if (resume && !(resume->grid.shape() == z.shape)) {
    throw InputError(s.checkpoint + ": checkpoint lattice does not match the z-grid");
  }
  const LocalFdrModel densities = fit_local_fdr(z.pooled(), s.fdr);
  const json config = settings_json(s, &cfg);
  const DeFit fit = mcem_fit_de(z, densities, cfg, checkpointer(s, config, out),
                                resume ? &*resume : nullptr);
  const ChainSchedule sched = posterior_schedule(s, cfg, fit.state.seed);
  const PosteriorGrid post =
      posterior_marginals(fit.state.grid, de_gibbs_model(fit.phi, densities, z), sched);
  const std::vector<double> q_eb = eb_local_fdr(z, densities);

  std::vector<double> q_mrf;
  std::vector<std::size_t> cell_of;
  for (std::size_t i = 0; i < z.z.size(); ++i) {
    if (z.masked(i)) continue;
    q_mrf.push_back(std::clamp(1.0 - post.prob_one[i], 0.0, 1.0));
    cell_of.push_back(i);
  }
  const FdrResult calls = fdr_threshold(q_mrf, s.alpha);
  std::vector<std::uint8_t> de(z.z.size(), 0);
  for (std::size_t r : calls.rejected) de[cell_of[r]] = 1;

  const fs::path dir = out_dir(s);
  write_zscores(zt, dir / "zscores.tsv", dir / "zscores.json");
  save_local_fdr(dir / "density.json", densities);
  write_phi(dir / "phi.tsv", ModelKind::differential, to_coefficients(fit.phi));
  write_trace(dir / "trace.tsv", fit.state);
  {
    std::vector<std::vector<std::string>> rows;
    for (const MaskedCell& m : masked) {
      rows.push_back({label(zt.genes, m.cell.gene, "G"), label(zt.regions, m.cell.region, "R"),
                      label(zt.slots, m.cell.time, "S"), m.reason});
    }
    write_table(dir / "masked.tsv", {"gene", "region", "slot", "reason"}, rows);
  }
  std::vector<std::vector<std::string>> rows, call_rows;
  const LatticeShape& sh = z.shape;
  for (int g = 0; g < sh.genes; ++g) {
    for (int b = 0; b < sh.regions; ++b) {
      for (int t = 0; t < sh.periods; ++t) {
        const std::size_t i = sh.index(b, g, t);
        if (z.masked(i)) continue;
        std::vector<std::string> key = {label(zt.genes, g, "G"), label(zt.regions, b, "R"),
                                        label(zt.slots, t, "S")};
        rows.push_back(key);
        rows.back().insert(rows.back().end(),
                           {fmt(z.z[i]), fmt(q_eb[i]), fmt(1.0 - post.prob_one[i])});
        call_rows.push_back(std::move(key));
        call_rows.back().insert(call_rows.back().end(),
                                {fmt(1.0 - post.prob_one[i]), de[i] ? "1" : "0"});
      }
    }
  }
  write_table(dir / "local_fdr.tsv", {"gene", "region", "slot", "z", "q_eb", "q"}, rows);
  write_table(dir / "de_calls.tsv", {"gene", "region", "slot", "q", "de"}, call_rows);
  json manifest_config = config;
  manifest_config["posterior_chain"] = {{"burn_in", sched.burn_in}, {"kept", sched.kept}};
  manifest_config["iterations_completed"] = fit.state.completed();
  manifest_config["converged"] = fit.state.converged;
  manifest_config["p0"] = densities.p0;
  write_manifest(dir, command, manifest_config, fit.state.seed,
                 existing({s.input, s.metadata, s.zscores, s.calls, s.config}));
  out << "phi";
  for (double c : to_coefficients(fit.phi)) out << ' ' << fmt(c);
  out << "\np0 " << fmt(densities.p0) << "\nde " << calls.k << " of " << q_mrf.size()
      << " tested cells at alpha " << fmt(s.alpha) << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// Other subcommands

int cmd_fdr(const Settings& s, std::ostream& out) {
  if (s.input.empty()) throw InputError("fdr needs --input");
  std::ifstream in(s.input);
  if (!in) throw InputError(s.input + ": cannot open for reading");
  std::string line;
  if (!std::getline(in, line)) throw InputError(s.input + ":1: missing header");
  std::vector<std::string> header;
  {
    std::istringstream is(line);
    std::string f;
    while (std::getline(is, f, '\t')) header.push_back(f);
  }
  const auto qcol = std::find(header.begin(), header.end(), "q");
  if (qcol == header.end()) throw InputError(s.input + ":1: field 'q': column missing");
  const std::size_t qi = static_cast<std::size_t>(qcol - header.begin());
  std::vector<std::vector<std::string>> rows;
  std::vector<double> q;
  std::vector<std::size_t> row_of;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::istringstream is(line);
    std::string f;
    while (std::getline(is, f, '\t')) fields.push_back(f);
    if (fields.size() != header.size()) {
      throw InputError(s.input + ":" + std::to_string(lineno) + ": expected " +
                       std::to_string(header.size()) + " fields");
    }
    const std::string& text = fields[qi];
    if (text != "nan" && !text.empty()) {
      char* end = nullptr;
      const double v = std::strtod(text.c_str(), &end);
      if (end != text.c_str() + text.size() || !(v >= 0.0 && v <= 1.0)) {
        throw InputError(s.input + ":" + std::to_string(lineno) +
                         ": field 'q': expected a value in [0, 1], got '" + text + "'");
      }
      q.push_back(v);
      row_of.push_back(rows.size());
    }
    rows.push_back(std::move(fields));
  }
  const FdrResult res = fdr_threshold(q, s.alpha);
  std::vector<std::uint8_t> rejected(rows.size(), 0);
  for (std::size_t r : res.rejected) rejected[row_of[r]] = 1;
  for (std::size_t r = 0; r < rows.size(); ++r) rows[r].push_back(rejected[r] ? "1" : "0");
  header.push_back("rejected");
  const fs::path dir = out_dir(s);
  write_table(dir / "fdr.tsv", header, rows);
  write_manifest(dir, "fdr", settings_json(s, nullptr), s.seed, existing({s.input, s.config}));
  out << "k " << res.k << "\ncutoff " << fmt(res.cutoff) << '\n';
  return kExitOk;
}

SimSpec sim_spec(const Settings& s) {
  SimSpec spec = SimSpec::defaults(parse_setting(s.setting));
  if (!std::isnan(s.mu2)) spec.mu2 = s.mu2;
  if (!std::isnan(s.flip)) spec.flip = s.flip;
  validate(spec);
  return spec;
}

int cmd_simulate(const Settings& s, std::ostream& out) {
  const SimSpec spec = sim_spec(s);
  const SimData data = simulate(spec, s.seed);
  const fs::path dir = out_dir(s);
  const LatticeShape& sh = data.truth.shape();
  std::vector<std::string> regions, periods, genes;
  for (int b = 0; b < sh.regions; ++b) regions.push_back("R" + std::to_string(b + 1));
  for (int g = 0; g < sh.genes; ++g) genes.push_back("G" + std::to_string(g + 1));
  const bool expr = is_expression_setting(spec.setting);
  for (int t = 0; t < sh.periods; ++t) {
    periods.push_back((expr ? "P" : "S") + std::to_string(t + 1));
  }
  if (data.expression) {
    ExpressionTensor y = *data.expression;
    y.region_names = regions;
    y.gene_names = genes;
    y.region_groups = default_region_groups(sh.regions);
    y.period_names.clear();
    for (int t = 0; t < y.shape().periods; ++t) y.period_names.push_back("P" + std::to_string(t + 1));
    write_dataset(y, dir / "data.tsv", dir / "metadata.json");
  }
  if (data.z) {
    ZScoreTable zt{*data.z, regions, periods, genes};
    write_zscores(zt, dir / "zscores.tsv", dir / "zscores.json");
  }
  std::vector<std::vector<std::string>> rows;
  for (int g = 0; g < sh.genes; ++g) {
    for (int b = 0; b < sh.regions; ++b) {
      for (int t = 0; t < sh.periods; ++t) {
        rows.push_back({genes[g], regions[b], periods[t],
                        std::to_string(data.truth.state(b, g, t)),
                        data.truth.masked(b, g, t) ? "1" : "0"});
      }
    }
  }
  write_table(dir / "truth.tsv", {"gene", "region", expr ? "period" : "slot", "state", "masked"},
              rows);
  json config = settings_json(s, nullptr);
  config["setting"] = to_string(spec.setting);
  config["mu2"] = spec.mu2;
  config["flip"] = spec.flip;
  write_manifest(dir, "simulate", config, s.seed, existing({s.config}));
  out << "simulated " << to_string(spec.setting) << ' ' << sh.regions << 'x' << sh.genes
      << 'x' << sh.periods << '\n';
  return kExitOk;
}

int cmd_compare(const Settings& s, std::ostream& out) {
  const SimSpec spec = sim_spec(s);
  CompareOptions opt;
  opt.mcem = mcem_config(s, McemConfig::single_stage(5, 200, 600));
  opt.runs = s.runs;
  opt.seed = s.seed;
  opt.fdr = s.fdr;
  if (!s.posterior.empty()) opt.posterior = posterior_schedule(s, opt.mcem, s.seed);
  const CompareResult res = compare_models(spec, opt);
  const fs::path dir = out_dir(s);
  std::vector<std::vector<std::string>> summary, runs, roc;
  for (const MethodSummary& m : res.rows) {
    summary.push_back({m.method, m.metric, fmt(m.mean), fmt(m.sd),
                       std::to_string(m.values.size())});
    for (std::size_t r = 0; r < m.values.size(); ++r) {
      runs.push_back({std::to_string(r + 1), m.method, m.metric, fmt(m.values[r])});
    }
  }
  for (const RocSummary& c : res.curves) {
    for (const RocPoint& p : c.points) {
      roc.push_back({c.method, c.group, fmt(p.threshold), fmt(p.sensitivity),
                     fmt(p.specificity)});
    }
  }
  write_table(dir / "summary.tsv", {"method", "metric", "mean", "sd", "runs"}, summary);
  write_table(dir / "runs.tsv", {"run", "method", "metric", "value"}, runs);
  if (!roc.empty()) {
    write_table(dir / "roc.tsv", {"method", "group", "threshold", "sensitivity", "specificity"},
                roc);
  }
  json config = settings_json(s, &opt.mcem);
  config["setting"] = to_string(spec.setting);
  config["mu2"] = spec.mu2;
  config["flip"] = spec.flip;
  config["runs"] = s.runs;
  write_manifest(dir, "compare", config, s.seed, existing({s.config}));
  for (const MethodSummary& m : res.rows) {
    out << m.method << ' ' << m.metric << ' ' << fmt(m.mean) << " (" << fmt(m.sd) << ")\n";
  }
  return kExitOk;
}

int cmd_enrich(const Settings& s, std::ostream& out) {
  if (s.calls.empty() || s.gene_set.empty()) {
    throw InputError("enrich needs --calls and --gene-set");
  }
  std::ifstream in(s.calls);
  if (!in) throw InputError(s.calls + ": cannot open for reading");
  std::string line;
  std::getline(in, line);
  std::vector<std::string> header;
  {
    std::istringstream is(line);
    std::string f;
    while (std::getline(is, f, '\t')) header.push_back(f);
  }
  const auto gcol = std::find(header.begin(), header.end(), "gene");
  const auto dcol = std::find(header.begin(), header.end(), "de");
  if (gcol == header.end() || dcol == header.end()) {
    throw InputError(s.calls + ":1: expected columns 'gene' and 'de'");
  }
  std::vector<std::string> genes;
  std::unordered_map<std::string, int> index;
  std::vector<std::uint8_t> called;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::istringstream is(line);
    std::string f;
    while (std::getline(is, f, '\t')) fields.push_back(f);
    if (fields.size() != header.size()) {
      throw InputError(s.calls + ":" + std::to_string(lineno) + ": wrong field count");
    }
    const std::string& gene = fields[gcol - header.begin()];
    const std::string& flag = fields[dcol - header.begin()];
    if (flag != "0" && flag != "1") {
      throw InputError(s.calls + ":" + std::to_string(lineno) + ": field 'de' must be 0 or 1");
    }
    auto [it, fresh] = index.emplace(gene, static_cast<int>(genes.size()));
    if (fresh) {
      genes.push_back(gene);
      called.push_back(0);
    }
    if (flag == "1") called[it->second] = 1;
  }
  std::ifstream sin(s.gene_set);
  if (!sin) throw InputError(s.gene_set + ": cannot open for reading");
  std::vector<int> members;
  std::set<int> unique;
  std::vector<std::string> missing;
  while (std::getline(sin, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto it = index.find(line);
    if (it == index.end()) {
      missing.push_back(line);
    } else if (unique.insert(it->second).second) {
      members.push_back(it->second);
    }
  }
  if (members.empty()) throw InputError(s.gene_set + ": no listed gene appears in the calls");
  double rate = s.rate;
  if (rate < 0.0) {
    std::size_t n = 0;
    for (auto c : called) n += c;
    rate = static_cast<double>(n) / static_cast<double>(called.size());
  }
  const Enrichment e = gene_set_enrichment(called, members, rate);
  const fs::path dir = out_dir(s);
  write_table(dir / "enrichment.tsv",
              {"set_size", "observed", "expected", "fold_change", "p_value", "background_rate",
               "degenerate"},
              {{std::to_string(e.set_size), std::to_string(e.observed), fmt(e.expected),
                fmt(e.fold_change), fmt(e.p_value), fmt(rate), e.degenerate ? "1" : "0"}});
  json config = settings_json(s, nullptr);
  config["rate"] = rate;
  config["genes_not_found"] = missing;
  write_manifest(dir, "enrich", config, s.seed, existing({s.calls, s.gene_set, s.config}));
  out << "observed " << e.observed << " of " << e.set_size << " expected " << fmt(e.expected)
      << " p " << fmt(e.p_value) << '\n';
  if (!missing.empty()) out << "genes not found: " << missing.size() << '\n';
  return kExitOk;
}

int cmd_posterior(const Settings& s, std::ostream& out) {
  if (s.checkpoint.empty()) throw InputError("posterior needs --checkpoint");
  json stored;
  McemState state = load_checkpoint(s.checkpoint, &stored);
  // The stored settings define the run; explicit flags only affect outputs.
  Settings run = s;
  McemConfig cfg;
  try {
    cfg = mcem_config_from_json(stored.at("mcem"), McemConfig::staged_default());
    if (stored.contains("posterior") && s.posterior.empty()) {
      run.posterior = stored["posterior"].get<std::string>();
    }
  } catch (const json::exception& e) {
    throw InputError(s.checkpoint + ": stored config is incomplete: " + e.what());
  }
  validate(cfg);
  run.seed = state.seed;
  run.replicates =
      cfg.replicates == ReplicateModel::shared_mean ? "shared_mean" : "independent";
  if (state.kind == ModelKind::expression) {
    return fit_expression(run, cfg, std::move(state), "posterior", out);
  }
  return fit_de(run, cfg, std::move(state), "posterior", out);
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  Settings s;
  CLI::App app{"Spatio-temporal MRF inference for expression and differential expression"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  auto common = [&s](CLI::App* sub) {
    sub->add_option("--config", s.config, "JSON config file")->check(CLI::ExistingFile);
    sub->add_option("--seed", s.seed, "Random seed");
    sub->add_option("--out", s.out, "Output directory");
    sub->add_option("--threads", s.threads,
                    "Worker threads (default: STMRF_THREADS or all cores)");
  };
  auto fitting = [&s](CLI::App* sub) {
    sub->add_option("--stages", s.stages, "MCEM schedule N@BURN/TOTAL[,...]");
    sub->add_option("--posterior", s.posterior,
                    "Posterior chain BURN/TOTAL (default: last MCEM stage)");
    sub->add_option("--checkpoint", s.checkpoint, "Checkpoint file written every iteration");
    sub->add_flag("--resume", s.resume, "Continue from --checkpoint when it exists");
  };

  auto* fe = app.add_subcommand("fit-expression", "Fit the expression MRF and call states");
  fe->add_option("--input", s.input, "Long-format expression table")->required();
  fe->add_option("--metadata", s.metadata, "Region and period metadata (JSON)")->required();
  fe->add_option("--cutoff", s.cutoff, "Posterior cutoff for expressed calls");
  fe->add_option("--replicates", s.replicates, "Replicate model: shared_mean or independent");
  common(fe);
  fitting(fe);

  auto* fd = app.add_subcommand("fit-de", "Fit the differential-expression MRF");
  fd->add_option("--input", s.input, "Long-format expression table");
  fd->add_option("--zscores", s.zscores, "Precomputed z-score table (instead of --input)");
  fd->add_option("--metadata", s.metadata, "Region and period (or slot) metadata")->required();
  fd->add_option("--calls", s.calls, "Expressed calls from fit-expression");
  fd->add_option("--alpha", s.alpha, "FDR level");
  common(fd);
  fitting(fd);

  auto* po = app.add_subcommand("posterior", "Resume a checkpointed fit and write posteriors");
  po->add_option("--checkpoint", s.checkpoint, "Checkpoint from fit-expression or fit-de")
      ->required();
  po->add_option("--input", s.input, "Expression table used by the fit");
  po->add_option("--zscores", s.zscores, "z-score table used by the fit");
  po->add_option("--metadata", s.metadata, "Metadata used by the fit")->required();
  po->add_option("--calls", s.calls, "Expressed calls used by the fit");
  po->add_option("--cutoff", s.cutoff, "Posterior cutoff for expressed calls");
  po->add_option("--alpha", s.alpha, "FDR level");
  po->add_option("--posterior", s.posterior, "Posterior chain BURN/TOTAL");
  po->add_option("--config", s.config, "JSON config file")->check(CLI::ExistingFile);
  po->add_option("--out", s.out, "Output directory");
  po->add_option("--threads", s.threads, "Worker threads");

  auto* fdr = app.add_subcommand("fdr", "FDR control on a table with a 'q' column");
  fdr->add_option("--input", s.input, "Table with a q column")->required();
  fdr->add_option("--alpha", s.alpha, "FDR level");
  common(fdr);

  auto* sim = app.add_subcommand("simulate", "Generate one simulated data set");
  sim->add_option("--setting", s.setting, "expr-1, expr-2, de-1, de-2 or de-3");
  sim->add_option("--mu2", s.mu2, "Mean of the expressed component");
  sim->add_option("--flip", s.flip, "Flip / perturbation proportion");
  common(sim);

  auto* cmp = app.add_subcommand("compare", "Repeated simulation comparing MRF and baseline");
  cmp->add_option("--setting", s.setting, "expr-1, expr-2, de-1, de-2 or de-3");
  cmp->add_option("--mu2", s.mu2, "Mean of the expressed component");
  cmp->add_option("--flip", s.flip, "Flip / perturbation proportion");
  cmp->add_option("--runs", s.runs, "Number of runs");
  cmp->add_option("--stages", s.stages, "MCEM schedule N@BURN/TOTAL[,...]");
  cmp->add_option("--posterior", s.posterior, "Posterior chain BURN/TOTAL");
  common(cmp);

  auto* en = app.add_subcommand("enrich", "Binomial enrichment of DE genes in a gene set");
  en->add_option("--calls", s.calls, "de_calls.tsv from fit-de")->required();
  en->add_option("--gene-set", s.gene_set, "One gene name per line")->required();
  en->add_option("--rate", s.rate, "Background DE rate (default: observed rate)");
  common(en);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitInput;
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string name = sub->get_name();
  try {
    apply_config(s, *sub);
    set_threads(s);
    if (!(s.alpha > 0.0 && s.alpha < 1.0)) throw InputError("--alpha must lie in (0, 1)");
    if (!(s.cutoff >= 0.0 && s.cutoff <= 1.0)) throw InputError("--cutoff must lie in [0, 1]");
    if (name == "fit-expression") {
      const McemConfig cfg = mcem_config(s, McemConfig::staged_default());
      return fit_expression(s, cfg, maybe_resume(s, load_dataset(s.input, s.metadata).shape()),
                            name, out);
    }
    if (name == "fit-de") {
      const McemConfig cfg = mcem_config(s, McemConfig::staged_default());
      std::optional<McemState> resume;
      if (s.resume) {
        if (s.checkpoint.empty()) throw InputError("--resume requires --checkpoint");
        if (fs::exists(s.checkpoint)) resume = load_checkpoint(s.checkpoint);
      }
      return fit_de(s, cfg, std::move(resume), name, out);
    }
    if (name == "posterior") return cmd_posterior(s, out);
    if (name == "fdr") return cmd_fdr(s, out);
    if (name == "simulate") return cmd_simulate(s, out);
    if (name == "compare") return cmd_compare(s, out);
    if (name == "enrich") return cmd_enrich(s, out);
    err << "error: unknown subcommand " << name << '\n';
    return kExitInput;
  } catch (const InputError& e) {
    err << "input error: " << e.what() << '\n';
    return kExitInput;
  } catch (const std::invalid_argument& e) {
    err << "input error: " << e.what() << '\n';
    return kExitInput;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const ResourceError& e) {
    err << "resource error: " << e.what() << '\n';
    return kExitResource;
  } catch (const std::bad_alloc&) {
    err << "resource error: out of memory\n";
    return kExitResource;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return kExitInternal;
  }
}

}  // namespace stmrf::cli
