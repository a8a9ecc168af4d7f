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

#ifndef QUARK_COMPILER_HPP_
#define QUARK_COMPILER_HPP_

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "quark/quantizer.hpp"

namespace quark {

// ---------------------------------------------------------------------------
// CAP-Units
//
// A CAP-Unit fuses one convolution/fc step with activation and pooling. Each
// unit consumes two input features; the completion unit of an accumulation
// group additionally adds the bias, requantizes, applies ReLU and (conv only)
// pooling, and stores one output element.

struct CapUnit {
  int layer = 0;
  LayerKind kind = LayerKind::kConv;
  int channel = 0;      // output channel (conv) or output feature (fc)
  int input_index = 0;  // which feature pair
  int in_channel = 0;   // accumulation index within the group (conv), 0 for fc
  bool is_last = false;
  bool has_second = false;
  int in_a = -1;        // flat indices into the layer's input tensor
  int in_b = -1;
  int out_elem = -1;    // flat index written on completion
};

// Unit enumeration in schedule order: layer, then output channel, then
// input_index, then input channel.
std::vector<CapUnit> modularize(const QuantizedModel& qm);
std::vector<CapUnit> modularize(const ModelShape& shape);

// Closed-form unit count: sum over conv layers of Cin*Cout*ceil(T/2^n) plus
// sum over fc layers of Tout*ceil(Tin/2).
int64_t unit_count(const ModelShape& shape);

// Largest channel/feature width across all layers.
int max_layer_width(const ModelShape& shape);

// Upper bound on passes through the pipeline: ceil((T + Lconv + Lfc) * C^2 / p).
int64_t recirculation_bound(const ModelShape& shape, int64_t units_per_pass);

// ---------------------------------------------------------------------------
// Header layout

struct HeaderLayout {
  // Formula values for the report.
  int64_t conv_bits = 0;
  int64_t fc_bits = 0;
  int64_t header_bits = 0;  // max(conv_bits, fc_bits)
  int slot_bits = 0;
  int slot_count = 0;  // slots actually allocated after overlay
  // Slot indices per boundary tensor (0 = input). Tensors reuse the slots of
  // tensors whose last read has passed.
  std::vector<std::vector<int>> tensor_slots;
  int64_t total_header_bits = 0;  // slots plus control/accumulator fields
};

HeaderLayout allocate_header(const ModelShape& shape, int bits);

// Shadow-memory walk of the unit schedule against a layout; throws on any
// read of a slot whose content is not the expected live element.
void check_layout_liveness(const ModelShape& shape, const HeaderLayout& layout,
                           const std::vector<CapUnit>& units);

// ---------------------------------------------------------------------------
// PHV fields and stage operations

struct FieldDef {
  std::string name;
  int bits = 32;
  bool is_signed = true;
  bool is_header = false;  // header persists across passes; metadata does not
};

struct Operand {
  bool is_imm = true;
  int64_t imm = 0;
  int field = -1;

  static Operand immediate(int64_t v) { return Operand{true, v, -1}; }
  static Operand field_ref(int f) { return Operand{false, 0, f}; }
};

enum class OpKind {
  kMatLookup,
  kAdd,
  kSub,
  kMax,
  kMin,
  kShiftLeft,
  kShiftRight,  // arithmetic
  kCopy,
  kSelect,        // dst = cmp(a, b) ? c : d
  kCounterUpdate,
  // Not part of the PISA primitive set; constructible so static validation
  // has something to reject.
  kMultiply,
  kDivide,
};

enum class CmpKind { kLt, kLe, kEq, kNe, kGt, kGe };

struct Guard {
  int field = -1;
  int64_t equals = 0;
};

struct MatRef {
  std::string base;       // mat name, or name prefix when per_layer
  bool per_layer = false; // resolved as base + "_l" + layer_index at runtime
};

struct StageOp {
  OpKind kind = OpKind::kCopy;
  std::vector<Guard> guards;  // all must hold or the op is skipped
  int dst = -1;
  Operand a, b, c, d;
  CmpKind cmp = CmpKind::kEq;
  // mat lookup
  MatRef mat;
  std::vector<int> key_fields;
  std::vector<int> bindings;   // load mode: destination field per action value
  int store_src = -1;          // store mode: field copied into the entry target
};

struct Stage {
  std::string name;
  std::vector<StageOp> ops;
};

// ---------------------------------------------------------------------------
// Match-action tables

enum class MatKind { kWeight, kBias, kMultiplication, kQuantization, kPooling, kStorage, kInputSelect };

std::string mat_kind_name(MatKind k);

struct ActionValue {
  bool is_field = false;
  int64_t imm = 0;
  int field = -1;

  static ActionValue immediate(int64_t v) { return ActionValue{false, v, -1}; }
  static ActionValue field_ref(int f) { return ActionValue{true, 0, f}; }
};

struct MatEntry {
  std::vector<int64_t> key;
  std::vector<ActionValue> values;  // load mode
  int target_field = -1;            // store mode
  // Storage annotation: which logical output element this entry writes.
  int ann_layer = -1;
  int ann_channel = -1;
  int ann_pos = -1;
};

struct Mat {
  std::string name;
  MatKind kind = MatKind::kWeight;
  int layer = -1;  // -1: shared across layers (layer_index is part of the key)
  bool store_mode = false;
  std::vector<std::string> key_names;
  std::vector<std::string> action_schema;
  std::vector<MatEntry> entries;  // sorted by key

  void sort_entries();
  const MatEntry* find(const std::vector<int64_t>& key) const;
};

// Exhaustive product table keyed by (q_w - Z_w, q_x - Z_x) over the full
// offset ranges of both parameter sets.
Mat build_mult_table(const QuantParams& w_params, const QuantParams& x_params, int layer,
                     int64_t entry_cap);

// Requantization table keyed by the biased accumulator value; numerics
// identical to requantize().
Mat build_quant_table(const Requantizer& rq, const QuantParams& out_params, int32_t acc_lo,
                      int32_t acc_hi, int layer, int64_t entry_cap);

// byte * mantissa products for the shift-sequence fallback.
Mat build_byte_product_table(int32_t mantissa, int layer);

// Static accumulator range of a layer: n_terms * extreme offset products plus
// the actual bias extremes.
std::pair<int64_t, int64_t> accumulator_range(const QuantizedModel& qm, int layer);

// ---------------------------------------------------------------------------
// Compiled program

struct LayerCtl {
  int layer = 0;
  bool is_fc = false;
  int cf_limit = 1;  // accumulation wrap (conv: Cin, fc: ceil(Tin/2))
  int ii_limit = 1;  // conv: pooled positions, fc: ceil(Tin/2)
  int ch_limit = 1;
  int32_t acc_lo = 0;
  int32_t acc_hi = 0;
  bool use_mat = true;  // quantization MAT vs shift-sequence fallback
  int x_off_lo = 0, x_off_hi = 0;
};

struct PipelineProgram {
  int bits = 8;
  int units_per_pass = 1;
  int stage_budget = 12;
  int stages_per_pass = 0;
  int total_layers = 0;
  int64_t total_units = 0;    // U
  int64_t passes = 0;         // ceil(U / p)
  int64_t recirculations = 0; // passes - 1
  int64_t pass_bound = 0;     // recirculation bound, in passes
  int max_width = 0;          // C
  ModelShape shape;
  HeaderLayout layout;
  std::vector<FieldDef> fields;
  std::vector<Stage> stages;
  std::vector<Mat> mats;
  std::vector<LayerCtl> automaton;
  std::vector<int> output_slots;  // field id of each output class slot

  int field_id(const std::string& name) const;

  // Runtime lookup index (rebuilt by link(); not serialized).
  std::map<std::string, int> mat_index;
  void link();
  int resolve_mat(const MatRef& ref, int layer) const;
};

struct CompileOptions {
  int stage_budget = 12;
  int units_per_pass = 1;
  int64_t mult_table_cap = 1 << 16;
  int64_t quant_table_cap = 1 << 16;
};

struct CompileReport {
  int64_t total_units = 0;
  int units_per_pass = 1;
  int64_t recirculations = 0;
  int64_t passes = 0;
  int64_t pass_bound = 0;
  int max_width = 0;
  int stages_per_pass = 0;
  int stage_budget = 12;
  int64_t conv_bits = 0;
  int64_t fc_bits = 0;
  int64_t header_bits = 0;
  int64_t actual_header_bits = 0;
  std::map<std::string, int64_t> entries_per_mat;
  std::map<std::string, int64_t> entries_per_kind;
  int64_t total_entries = 0;
};

std::pair<PipelineProgram, CompileReport> compile(const QuantizedModel& qm,
                                                  const CompileOptions& options = {});

CompileReport resource_report(const PipelineProgram& prog);

void save_program(const PipelineProgram& prog, const std::string& path);
PipelineProgram load_program(const std::string& path);
std::string program_to_json(const PipelineProgram& prog);
PipelineProgram program_from_json(const std::string& text);

}  // namespace quark

#endif  // QUARK_COMPILER_HPP_
