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
#include "doctest.h"
#include "quark/sim.hpp"
#include "test_util.hpp"

using namespace quark;

namespace {

// Minimal hand-built program: the five control fields the runner expects,
// one header register, one metadata register, one copy stage.
PipelineProgram tiny_program() {
  PipelineProgram prog;
  prog.total_layers = 1;
  prog.fields = {
      {"layer_index", 16, false, true}, {"channel_index", 16, false, true},
      {"input_index", 16, false, true}, {"conv_flag", 16, false, true},
      {"done", 8, false, true},         {"reg", 16, true, true},
      {"scratch", 16, true, false},
  };
  prog.automaton = {LayerCtl{0, false, 1, 1, 1, 0, 0, true, 0, 0}};
  prog.link();
  return prog;
}

StageOp copy_op(int dst, Operand a) {
  StageOp op;
  op.kind = OpKind::kCopy;
  op.dst = dst;
  op.a = a;
  return op;
}

}  // namespace

TEST_CASE("execute_pass: a copy-only stage leaves the header intact") {
  PipelineProgram prog = tiny_program();
  Stage stage{"copy", {copy_op(5, Operand::field_ref(5))}};
  prog.stages = {stage};
  prog.stages_per_pass = 1;
  Phv phv = make_phv(prog);
  phv.values[5] = 42;
  execute_pass(prog, phv, 0, nullptr, false);
  CHECK(phv.values[5] == 42);
}

TEST_CASE("execute_pass: metadata written in one pass reads zero in the next") {
  PipelineProgram prog = tiny_program();
  // scratch (metadata) accumulates the header register once per pass
  StageOp add;
  add.kind = OpKind::kAdd;
  add.dst = 6;
  add.a = Operand::field_ref(6);
  add.b = Operand::field_ref(5);
  prog.stages = {Stage{"s", {add}}};
  prog.stages_per_pass = 1;
  Phv phv = make_phv(prog);
  phv.values[5] = 7;
  execute_pass(prog, phv, 0, nullptr, false);
  CHECK(phv.values[6] == 7);
  execute_pass(prog, phv, 1, nullptr, false);
  CHECK(phv.values[6] == 7);  // zeroed at pass start, then 0 + 7
}

TEST_CASE("execute_pass: guarded ops are skipped") {
  PipelineProgram prog = tiny_program();
  StageOp op = copy_op(5, Operand::immediate(99));
  op.guards = {Guard{4, 1}};  // done == 1
  prog.stages = {Stage{"s", {op}}};
  prog.stages_per_pass = 1;
  Phv phv = make_phv(prog);
  execute_pass(prog, phv, 0, nullptr, false);
  CHECK(phv.values[5] == 0);
  phv.values[4] = 1;
  execute_pass(prog, phv, 1, nullptr, false);
  CHECK(phv.values[5] == 99);
}

TEST_CASE("execute_pass: width overflow is a checked error, not a wrap") {
  PipelineProgram prog = tiny_program();
  prog.stages = {Stage{"s", {copy_op(5, Operand::immediate(40000))}}};  // 16-bit field
  prog.stages_per_pass = 1;
  Phv phv = make_phv(prog);
  CHECK_THROWS_AS(execute_pass(prog, phv, 0, nullptr, false), Error);
}

TEST_CASE("execute_pass: illegal primitives refuse to run") {
  PipelineProgram prog = tiny_program();
  StageOp op;
  op.kind = OpKind::kMultiply;
  op.dst = 5;
  op.a = Operand::immediate(2);
  op.b = Operand::immediate(3);
  prog.stages = {Stage{"s", {op}}};
  prog.stages_per_pass = 1;
  Phv phv = make_phv(prog);
  CHECK_THROWS_AS(execute_pass(prog, phv, 0, nullptr, false), Error);
}

TEST_CASE("run_inference: hand fixture trace and stored activations") {
  QuantizedModel qm = quark_test::hand_fixture_4bit();
  auto [prog, report] = compile(qm);
  SimOptions opts;
  opts.trace = TraceMode::kOn;
  InferenceResult r = run_inference(prog, {6, -4}, opts);

  // matches the hand computation in test_quantizer.cpp
  CHECK(r.cls == 0);
  CHECK(r.passes_used == 3);
  CHECK(r.logits == std::vector<int>{1, -2});
  REQUIRE(r.activations.size() == 2);
  CHECK(r.activations[0] == std::vector<int>{7});
  CHECK(r.activations[1] == std::vector<int>{1, -2});

  // the first pass accumulates 15*6 and 15*(-4) before the bias add
  REQUIRE(r.traces.size() == 3);
  int acc1 = prog.field_id("acc_temp_1");
  int acc2 = prog.field_id("acc_temp_2");
  bool saw_acc1 = false, saw_acc2 = false;
  for (const StageTrace& st : r.traces[0].stages) {
    if (st.name != "u0_accumulate") continue;
    for (const auto& [field, value] : st.writes) {
      if (field == acc1) {
        CHECK(value == 90);
        saw_acc1 = true;
      }
      if (field == acc2) {
        CHECK(value == -60);
        saw_acc2 = true;
      }
    }
  }
  CHECK(saw_acc1);
  CHECK(saw_acc2);
}

TEST_CASE("run_inference: one-unit program finishes in a single pass") {
  CnnModel m;
  m.shape.input_features = 2;
  m.shape.input_channels = 1;
  m.shape.conv = {{1, 1}};
  m.conv_w = {{{0.5}}};
  m.conv_b = {{0.0}};
  m.input_range = {-1.0, 1.0};
  m.boundary_ranges = {{0.0, 0.6}};
  QuantizedModel qm = quantize_model(m, 5);
  auto [prog, report] = compile(qm);
  REQUIRE(report.total_units == 1);
  InferenceResult r = run_inference(prog, {3, -3});
  CHECK(r.passes_used == 1);
  CHECK(r.cls == 0);
  QuantForwardResult o = quantized_forward(qm, {3, -3});
  CHECK(r.activations == o.activations);
}

TEST_CASE("run_inference: bit-exact equivalence with the integer reference") {
  // The central test: class, logits and every stored intermediate must
  // equal quantized_forward exactly, across bit-widths and both
  // requantization strategies (tables and the shift-sequence fallback).
  Rng rng(83);
  int pairs = 0;
  for (int trial = 0; trial < 60; ++trial) {
    int bits = rng.next_int(4, 8);
    QuantizedModel qm = quark_test::random_quantized_model(rng, bits);
    CompileOptions opt;
    if (trial % 3 == 1) opt.quant_table_cap = 32;  // force the fallback path
    if (trial % 3 == 2) opt.quant_table_cap = 1 << 20;
    auto [prog, report] = compile(qm, opt);
    for (int rep = 0; rep < 4; ++rep) {
      std::vector<int> q_x = quark_test::random_quantized_input(rng, qm);
      InferenceResult sim = run_inference(prog, q_x, SimOptions{TraceMode::kOff});
      QuantForwardResult oracle = quantized_forward(qm, q_x);
      REQUIRE(sim.cls == oracle.cls);
      REQUIRE(sim.logits == oracle.logits);
      REQUIRE(sim.activations == oracle.activations);
      ++pairs;
    }
  }
  CHECK(pairs == 240);
}

TEST_CASE("run_inference: equivalence holds on deep, wide and degenerate shapes") {
  // Single-position inputs (every pair an odd tail), three-layer stacks,
  // wider channel counts, 3-bit quantization.
  Rng rng(84);
  quark_test::RandomModelOptions opt;
  opt.min_features = 1;
  opt.max_features = 19;
  opt.max_conv_layers = 3;
  opt.max_fc_layers = 3;
  opt.max_channels = 5;
  opt.max_fc_width = 6;
  for (int trial = 0; trial < 40; ++trial) {
    int bits = rng.next_int(3, 8);
    QuantizedModel qm = quark_test::random_quantized_model(rng, bits, opt);
    CompileOptions copt;
    if (trial % 2 == 1) copt.quant_table_cap = 16;
    auto [prog, report] = compile(qm, copt);
    CHECK(validate_program(prog).ok());
    for (int rep = 0; rep < 2; ++rep) {
      std::vector<int> q_x = quark_test::random_quantized_input(rng, qm);
      InferenceResult sim = run_inference(prog, q_x, SimOptions{TraceMode::kOff});
      QuantForwardResult oracle = quantized_forward(qm, q_x);
      REQUIRE(sim.logits == oracle.logits);
      REQUIRE(sim.activations == oracle.activations);
    }
  }
}

TEST_CASE("run_inference: measured passes equal ceil(U/p)") {
  Rng rng(85);
  for (int trial = 0; trial < 40; ++trial) {
    QuantizedModel qm = quark_test::random_quantized_model(rng, 4);
    int64_t u = unit_count(qm.shape);
    for (int64_t p : {int64_t{1}, int64_t{2}, int64_t{4}, u}) {
      CompileOptions opt;
      opt.units_per_pass = static_cast<int>(p);
      opt.stage_budget = static_cast<int>(10 * p);
      auto [prog, report] = compile(qm, opt);
      std::vector<int> q_x = quark_test::random_quantized_input(rng, qm);
      InferenceResult r = run_inference(prog, q_x, SimOptions{TraceMode::kOff});
      CHECK(r.passes_used == (u + p - 1) / p);
      CHECK(r.passes_used <= prog.pass_bound);
    }
  }
}

TEST_CASE("run_inference: identical runs produce identical traces") {
  Rng rng(87);
  QuantizedModel qm = quark_test::random_quantized_model(rng, 6);
  auto [prog, report] = compile(qm);
  std::vector<int> q_x = quark_test::random_quantized_input(rng, qm);
  SimOptions opts;
  opts.trace = TraceMode::kOn;
  InferenceResult a = run_inference(prog, q_x, opts);
  InferenceResult b = run_inference(prog, q_x, opts);
  REQUIRE(a.traces.size() == b.traces.size());
  for (size_t i = 0; i < a.traces.size(); ++i) {
    REQUIRE(a.traces[i].stages.size() == b.traces[i].stages.size());
    for (size_t s = 0; s < a.traces[i].stages.size(); ++s) {
      CHECK(a.traces[i].stages[s].writes == b.traces[i].stages[s].writes);
    }
  }
  // stage count per pass is constant and within budget
  for (const PassTrace& t : a.traces) {
    CHECK(static_cast<int>(t.stages.size()) == prog.stages_per_pass);
    CHECK(static_cast<int>(t.stages.size()) <= prog.stage_budget);
  }
}

TEST_CASE("run_inference: non-termination guard aborts") {
  QuantizedModel qm = quark_test::hand_fixture_4bit();
  auto [prog, report] = compile(qm);
  prog.pass_bound = 1;  // guard = 2 passes, but the program needs 3
  CHECK_THROWS_AS(run_inference(prog, {6, -4}), Error);
}

TEST_CASE("validate_program: compiled programs come back clean") {
  Rng rng(89);
  for (int trial = 0; trial < 15; ++trial) {
    QuantizedModel qm = quark_test::random_quantized_model(rng, rng.next_int(4, 7));
    CompileOptions opt;
    if (trial % 2 == 1) opt.quant_table_cap = 32;
    auto [prog, report] = compile(qm, opt);
    ValidationReport vr = validate_program(prog);
    if (!vr.ok())
      for (const auto& v : vr.violations) MESSAGE(v);
    CHECK(vr.ok());
  }
}

TEST_CASE("validate_program: an injected multiply is a whitelist violation") {
  QuantizedModel qm = quark_test::hand_fixture_4bit();
  auto [prog, report] = compile(qm);
  StageOp op;
  op.kind = OpKind::kMultiply;
  op.dst = prog.field_id("acc_temp_1");
  op.a = Operand::field_ref(op.dst);
  op.b = Operand::immediate(3);
  prog.stages[4].ops.push_back(op);
  ValidationReport vr = validate_program(prog);
  REQUIRE_FALSE(vr.ok());
  bool found = false;
  for (const auto& v : vr.violations)
    if (v.find("whitelist") != std::string::npos) found = true;
  CHECK(found);
}

TEST_CASE("validate_program: a truncated multiplication table loses coverage") {
  QuantizedModel qm = quark_test::hand_fixture_4bit();
  auto [prog, report] = compile(qm);
  for (Mat& mat : prog.mats) {
    if (mat.name == "mult_l0") mat.entries.resize(mat.entries.size() / 2);
  }
  prog.link();
  ValidationReport vr = validate_program(prog);
  REQUIRE_FALSE(vr.ok());
  bool found = false;
  for (const auto& v : vr.violations)
    if (v.find("mult_l0") != std::string::npos && v.find("uncovered") != std::string::npos)
      found = true;
  CHECK(found);
}

TEST_CASE("validate_program: a dropped storage entry is reported") {
  QuantizedModel qm = quark_test::hand_fixture_4bit();
  auto [prog, report] = compile(qm);
  for (Mat& mat : prog.mats) {
    if (mat.kind == MatKind::kStorage) mat.entries.pop_back();
  }
  prog.link();
  ValidationReport vr = validate_program(prog);
  CHECK_FALSE(vr.ok());
}

TEST_CASE("simulator MAT misses carry a key dump") {
  QuantizedModel qm = quark_test::hand_fixture_4bit();
  auto [prog, report] = compile(qm);
  for (Mat& mat : prog.mats) {
    if (mat.name == "weight") mat.entries.clear();
  }
  prog.link();
  try {
    run_inference(prog, {6, -4});
    FAIL("expected a MAT miss");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kMatMiss);
    CHECK(std::string(e.what()).find("weight") != std::string::npos);
    CHECK(std::string(e.what()).find("key") != std::string::npos);
  }
}

TEST_CASE("shift-sequence fallback equals requantize over wide sweeps") {
  // Compares the compiled op sequence (run in isolation through the
  // simulator) against the reference requantizer for random mantissas,
  // shifts and accumulators.
  Rng rng(91);
  for (int trial = 0; trial < 30; ++trial) {
    CnnModel m;
    m.shape.input_features = 2;
    m.shape.input_channels = 1;
    m.shape.conv = {{1, 1}};
    m.conv_w = {{{rng.next_uniform(0.2, 2.0)}}};
    m.conv_b = {{rng.next_uniform(-0.4, 0.4)}};
    m.input_range = {-1.0, 1.0};
    m.boundary_ranges = {{rng.next_uniform(-2.0, -0.1), rng.next_uniform(0.1, 2.0)}};
    QuantizedModel qm = quantize_model(m, 8);
    CompileOptions opt;
    opt.quant_table_cap = 1;  // always the fallback
    auto [prog, report] = compile(qm, opt);
    for (int rep = 0; rep < 8; ++rep) {
      std::vector<int> q_x = {rng.next_int(-128, 127), rng.next_int(-128, 127)};
      InferenceResult sim = run_inference(prog, q_x, SimOptions{TraceMode::kOff});
      QuantForwardResult oracle = quantized_forward(qm, q_x);
      REQUIRE(sim.activations == oracle.activations);
    }
  }
}
