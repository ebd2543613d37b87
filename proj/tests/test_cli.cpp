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

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "cli.hpp"
#include "stmrf/de.hpp"
#include "stmrf/io.hpp"

using namespace stmrf;

namespace {

struct Result {
  int code = 0;
  std::string out;
  std::string err;
};

Result invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "stmrf");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Result r;
  r.code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("stmrf_cli_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

std::size_t count_lines(const std::string& file) {
  std::ifstream in(file);
  std::size_t n = 0;
  std::string line;
  while (std::getline(in, line)) ++n;
  return n;
}

}  // namespace

TEST_CASE("exit codes for usage and input errors") {
  CHECK(invoke({}).code == cli::kExitInput);
  CHECK(invoke({"no-such-command"}).code == cli::kExitInput);
  CHECK(invoke({"--version"}).code == cli::kExitOk);
  CHECK(invoke({"fdr"}).code == cli::kExitInput);

  TempDir dir("codes");
  const Result missing = invoke({"fdr", "--input", dir / "absent.tsv", "--out", dir.path.string()});
  CHECK(missing.code == cli::kExitInput);
  CHECK_FALSE(missing.err.empty());

  std::ofstream(dir / "bad.tsv") << "id\tq\na\t0.5\nb\t1.7\n";
  const Result bad = invoke({"fdr", "--input", dir / "bad.tsv", "--out", dir.path.string()});
  CHECK(bad.code == cli::kExitInput);
  CHECK(bad.err.find("bad.tsv:3") != std::string::npos);

  CHECK(invoke({"simulate", "--setting", "expr-9", "--out", dir.path.string()}).code ==
        cli::kExitInput);
  CHECK(invoke({"fit-expression", "--input", dir / "bad.tsv", "--metadata", dir / "none.json",
                "--out", dir.path.string()})
            .code == cli::kExitInput);
}

TEST_CASE("fdr command matches the library") {
  TempDir dir("fdr");
  const std::vector<double> q = {0.01, 0.04, 0.2, 0.5, 0.03, 0.9};
  {
    std::ofstream f(dir / "q.tsv");
    f << "id\tq\n";
    for (std::size_t i = 0; i < q.size(); ++i) f << "c" << i << '\t' << q[i] << '\n';
    f << "masked\tnan\n";
  }
  const Result r = invoke({"fdr", "--input", dir / "q.tsv", "--alpha", "0.05", "--out",
                           dir.path.string()});
  REQUIRE(r.code == cli::kExitOk);
  const FdrResult lib = fdr_threshold(q, 0.05);
  CHECK(r.out.find("k " + std::to_string(lib.k)) != std::string::npos);
  CHECK(count_lines(dir / "fdr.tsv") == q.size() + 2);
  CHECK(fs::exists(dir / "manifest.json"));
}

TEST_CASE("simulate then fit expression") {
  TempDir dir("expr");
  const std::string d = dir.path.string();
  REQUIRE(invoke({"simulate", "--setting", "expr-1", "--seed", "3", "--out", d}).code ==
          cli::kExitOk);
  for (const char* f : {"data.tsv", "metadata.json", "truth.tsv", "manifest.json"}) {
    CHECK(fs::exists(dir / f));
  }
  const std::string fit = d + "/fit";
  const Result r = invoke({"fit-expression", "--input", dir / "data.tsv", "--metadata",
                           dir / "metadata.json", "--stages", "2@10/30", "--posterior", "10/30",
                           "--checkpoint", dir / "ck.json", "--out", fit});
  REQUIRE_MESSAGE(r.code == cli::kExitOk, r.err);
  for (const char* f : {"phi.tsv", "theta.tsv", "posterior.tsv", "calls.tsv", "trace.tsv",
                        "manifest.json"}) {
    CHECK(fs::exists(fs::path(fit) / f));
  }
  CHECK(count_lines(fit + "/calls.tsv") == 16 * 100 * 13 + 1);
  CHECK(count_lines(fit + "/trace.tsv") == 3);
  const McemState st = load_checkpoint(dir / "ck.json");
  CHECK(st.completed() == 2);

  // The posterior command rebuilds the same posterior from the checkpoint.
  const std::string again = d + "/again";
  const Result p = invoke({"posterior", "--checkpoint", dir / "ck.json", "--input",
                           dir / "data.tsv", "--metadata", dir / "metadata.json", "--posterior",
                           "10/30", "--out", again});
  REQUIRE_MESSAGE(p.code == cli::kExitOk, p.err);
  CHECK(read_file(again + "/posterior.tsv") == read_file(fit + "/posterior.tsv"));

  // Resuming a finished schedule leaves the fit unchanged.
  const std::string resumed = d + "/resumed";
  const Result rr = invoke({"fit-expression", "--input", dir / "data.tsv", "--metadata",
                            dir / "metadata.json", "--stages", "2@10/30", "--posterior", "10/30",
                            "--checkpoint", dir / "ck.json", "--resume", "--out", resumed});
  REQUIRE_MESSAGE(rr.code == cli::kExitOk, rr.err);
  CHECK(read_file(resumed + "/phi.tsv") == read_file(fit + "/phi.tsv"));
}

TEST_CASE("simulate then fit DE from z-scores") {
  TempDir dir("de");
  const std::string d = dir.path.string();
  REQUIRE(invoke({"simulate", "--setting", "de-1", "--seed", "5", "--out", d}).code ==
          cli::kExitOk);
  const Result r = invoke({"fit-de", "--zscores", dir / "zscores.tsv", "--metadata",
                           dir / "zscores.json", "--stages", "2@10/30", "--posterior", "10/40",
                           "--out", d + "/fit"});
  REQUIRE_MESSAGE(r.code == cli::kExitOk, r.err);
  for (const char* f : {"phi.tsv", "local_fdr.tsv", "de_calls.tsv", "density.json"}) {
    CHECK(fs::exists(fs::path(d) / "fit" / f));
  }
  // The de_calls table feeds the enrichment command.
  {
    std::ofstream set(dir / "set.txt");
    for (int g = 1; g <= 10; ++g) set << "G" << g << '\n';
  }
  const Result e = invoke({"enrich", "--calls", d + "/fit/de_calls.tsv", "--gene-set",
                           dir / "set.txt", "--out", d + "/enrich"});
  REQUIRE_MESSAGE(e.code == cli::kExitOk, e.err);
  CHECK(fs::exists(fs::path(d) / "enrich" / "enrichment.tsv"));
}
