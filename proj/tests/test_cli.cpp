// Copyright 2026 The Quark Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "quark/quantizer.hpp"

namespace fs = std::filesystem;

namespace {

std::string bin() { return QUARK_BIN; }

int run(const std::string& args, std::string* output = nullptr) {
  std::string cmd = bin() + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::string text;
  char buf[4096];
  while (size_t n = fread(buf, 1, sizeof buf, pipe)) text.append(buf, n);
  int status = pclose(pipe);
  if (output != nullptr) *output = text;
  return WEXITSTATUS(status);
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct TempDir {
  fs::path path;
  TempDir(const char* name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const char* p) const { return (path / p).string(); }
};

}  // namespace

TEST_CASE("cli: usage errors exit with code 1") {
  std::string out;
  CHECK(run("", &out) == 1);
  CHECK(run("--bogus-flag", &out) == 1);
  CHECK(run("compile --no-such-flag x", &out) == 1);
}

TEST_CASE("cli: full pipeline, oracle agreement, idempotent inputs") {
  TempDir dir("quark_cli_test");
  std::string out;

  CHECK(run("gen-data --seed 5 --flows-per-class 40 --out-dir " + (dir / "data"), &out) == 0);
  CHECK(run("train --data " + (dir / "data") + "/dataset_train.csv --featnorm " +
                (dir / "data") + "/featnorm.json --conv 4,4 --fc 8,2 --epochs 25 --seed 2 " +
                "--out " + (dir / "model.json"),
            &out) == 0);

  std::string model_bytes = slurp(dir / "model.json");
  CHECK(run("prune --model " + (dir / "model.json") + " --rate 0.5 --data " + (dir / "data") +
                "/dataset_train.csv --retrain-epochs 6 --out " + (dir / "pruned.json"),
            &out) == 0);
  CHECK(slurp(dir / "model.json") == model_bytes);  // inputs never mutated

  CHECK(run("quantize --model " + (dir / "pruned.json") + " --bits 7 --out " +
                (dir / "qm.json"),
            &out) == 0);
  CHECK(run("compile --model " + (dir / "qm.json") + " --stages 12 -p 1 --out " +
                (dir / "prog.json") + " --json",
            &out) == 0);
  auto report = nlohmann::json::parse(out);
  CHECK(report.at("p") == 1);
  CHECK(report.at("R").get<int64_t>() == report.at("passes").get<int64_t>() - 1);

  CHECK(run("validate --program " + (dir / "prog.json"), &out) == 0);
  CHECK(run("report --program " + (dir / "prog.json") + " --json", &out) == 0);
  auto report2 = nlohmann::json::parse(out);
  CHECK(report2.at("U") == report.at("U"));
  CHECK(report2.at("header_bits") == report.at("header_bits"));

  // features file from a quantized test row
  quark::QuantizedModel qm = quark::load_quantized_model(dir / "qm.json");
  std::vector<int> q_x(16);
  for (int i = 0; i < 16; ++i)
    q_x[i] = quark::quantize(i / 16.0, qm.input_params);
  nlohmann::json fj;
  fj["values"] = q_x;
  std::ofstream(dir / "features.json") << fj.dump();

  CHECK(run("simulate --program " + (dir / "prog.json") + " --features " +
                (dir / "features.json") + " --json",
            &out) == 0);
  auto sim = nlohmann::json::parse(out);
  CHECK(run("oracle --model " + (dir / "qm.json") + " --features " + (dir / "features.json") +
                " --json",
            &out) == 0);
  auto oracle = nlohmann::json::parse(out);
  CHECK(sim.at("class") == oracle.at("class"));
  CHECK(sim.at("logits") == oracle.at("logits"));
  CHECK(sim.at("passes_used") == report.at("passes"));

  CHECK(run("classify --program " + (dir / "prog.json") + " --model " + (dir / "qm.json") +
                " --trace " + (dir / "data") + "/trace_test.csv --labels " + (dir / "data") +
                "/labels_test.csv --out " + (dir / "results.csv") + " --json",
            &out) == 0);
  auto cls = nlohmann::json::parse(out);
  CHECK(cls.at("oracle_match") == true);
  CHECK(fs::exists(dir / "results.csv"));

  // trace dump lands on disk when requested
  CHECK(run("simulate --program " + (dir / "prog.json") + " --features " +
                (dir / "features.json") + " --trace " + (dir / "trace.json"),
            &out) == 0);
  CHECK(fs::exists(dir / "trace.json"));
}

TEST_CASE("cli: seeded gen-data and train are byte-reproducible") {
  TempDir dir("quark_cli_repro");
  std::string out;
  for (const char* sub : {"a", "b"}) {
    CHECK(run("gen-data --seed 11 --flows-per-class 25 --out-dir " + (dir / sub), &out) == 0);
    CHECK(run("train --data " + (dir / sub) + "/dataset_train.csv --conv 3 --fc 4,2 " +
                  "--epochs 8 --seed 7 --out " + (dir / sub) + "/model.json",
              &out) == 0);
  }
  CHECK(slurp(dir.path / "a" / "trace_train.csv") == slurp(dir.path / "b" / "trace_train.csv"));
  CHECK(slurp(dir.path / "a" / "dataset_train.csv") ==
        slurp(dir.path / "b" / "dataset_train.csv"));
  CHECK(slurp(dir.path / "a" / "model.json") == slurp(dir.path / "b" / "model.json"));
}

TEST_CASE("cli: validation failures exit 2, runtime errors exit 3") {
  TempDir dir("quark_cli_err");
  std::string out;
  CHECK(run("simulate --program /nonexistent.json --features /nonexistent.json", &out) == 3);
  CHECK(run("quantize --model /nonexistent.json --out " + (dir / "x.json"), &out) == 3);

  // corrupt a compiled program: drop half of a multiplication table
  CHECK(run("gen-data --seed 3 --flows-per-class 30 --out-dir " + (dir / "d"), &out) == 0);
  CHECK(run("train --data " + (dir / "d") + "/dataset_train.csv --conv 2 --fc 4,2 "
            "--epochs 5 --out " + (dir / "m.json"), &out) == 0);
  CHECK(run("quantize --model " + (dir / "m.json") + " --bits 6 --out " + (dir / "q.json"),
            &out) == 0);
  CHECK(run("compile --model " + (dir / "q.json") + " --out " + (dir / "p.json"), &out) == 0);
  auto prog = nlohmann::json::parse(slurp(dir / "p.json"));
  for (auto& mat : prog.at("mats")) {
    if (mat.at("name") == "mult_l0") {
      auto& entries = mat.at("entries");
      entries.erase(entries.begin(), entries.begin() + entries.size() / 2);
    }
  }
  std::ofstream(dir / "p_bad.json") << prog.dump();
  CHECK(run("validate --program " + (dir / "p_bad.json"), &out) == 2);
  CHECK(out.find("violation") != std::string::npos);
}
