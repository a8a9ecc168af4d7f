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

#ifndef QUARK_SIM_HPP_
#define QUARK_SIM_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include "quark/compiler.hpp"

namespace quark {

// Packet header vector: integer-valued fields only. Header fields persist
// across recirculation; metadata fields read as zero at the start of every
// pass.
struct Phv {
  std::vector<int64_t> values;
};

Phv make_phv(const PipelineProgram& prog);

// Loads a quantized input tensor (channel-major) into the input feature slots.
void load_input(const PipelineProgram& prog, Phv& phv, const std::vector<int>& q_x);

struct MatEvent {
  std::string mat;
  std::vector<int64_t> key;
  bool hit = true;
};

struct StageTrace {
  std::string name;
  std::vector<std::pair<int, int64_t>> writes;  // (field, value) in order
  std::vector<MatEvent> mat_events;
};

struct PassTrace {
  int pass_index = 0;
  std::vector<StageTrace> stages;
};

struct StoredValue {
  int layer = 0;
  int channel = 0;
  int pos = 0;
  int64_t value = 0;
};

// One full pass through the stage list: metadata zeroed first, every stage in
// order, exact-match lookups (a miss is a compiler bug, not a default
// action), and every field write checked against its declared width.
PassTrace execute_pass(const PipelineProgram& prog, Phv& phv, int pass_index,
                       std::vector<StoredValue>* store_log, bool capture_trace);

enum class TraceMode { kAuto, kOff, kOn };  // auto: on when passes <= 256

struct SimOptions {
  TraceMode trace = TraceMode::kAuto;
};

struct InferenceResult {
  int cls = 0;
  int64_t passes_used = 0;
  std::vector<int> logits;
  // Stored integers per layer, channel-major, reconstructed from the storage
  // writes; directly comparable with quantized_forward().activations.
  std::vector<std::vector<int>> activations;
  std::vector<PassTrace> traces;
};

// Recirculates until the control automaton signals completion; aborts if the
// pass count exceeds twice the compile-time bound.
InferenceResult run_inference(const PipelineProgram& prog, const std::vector<int>& q_x,
                              const SimOptions& options = {});

struct ValidationReport {
  std::vector<std::string> violations;
  bool ok() const { return violations.empty(); }
};

// Static checks: stage budget, primitive whitelist, exact-match key coverage
// for every reachable control state, header width bookkeeping, pass
// arithmetic.
ValidationReport validate_program(const PipelineProgram& prog);

}  // namespace quark

#endif  // QUARK_SIM_HPP_
