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

#include "quark/compiler.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "json.hpp"

namespace quark {

// ---------------------------------------------------------------------------
// CAP-Unit enumeration

std::vector<CapUnit> modularize(const ModelShape& shape) {
  shape.validate();
  std::vector<CapUnit> units;
  int num_conv = static_cast<int>(shape.conv.size());
  for (int n = 0; n < num_conv; ++n) {
    int in_len = shape.conv_input_length(n);
    int pairs = shape.conv_output_length(n);
    int c_in = shape.conv[n].in_channels;
    int c_out = shape.conv[n].out_channels;
    for (int ch = 0; ch < c_out; ++ch) {
      for (int ii = 0; ii < pairs; ++ii) {
        for (int ci = 0; ci < c_in; ++ci) {
          CapUnit u;
          u.layer = n;
          u.kind = LayerKind::kConv;
          u.channel = ch;
          u.input_index = ii;
          u.in_channel = ci;
          u.is_last = (ci == c_in - 1);
          u.has_second = (2 * ii + 1 < in_len);
          u.in_a = ci * in_len + 2 * ii;
          u.in_b = u.has_second ? ci * in_len + 2 * ii + 1 : -1;
          u.out_elem = u.is_last ? ch * pairs + ii : -1;
          units.push_back(u);
        }
      }
    }
  }
  for (size_t m = 0; m < shape.fc.size(); ++m) {
    int t_in = shape.fc[m].in_features;
    int t_out = shape.fc[m].out_features;
    int pairs = (t_in + 1) / 2;
    for (int ch = 0; ch < t_out; ++ch) {
      for (int ii = 0; ii < pairs; ++ii) {
        CapUnit u;
        u.layer = num_conv + static_cast<int>(m);
        u.kind = LayerKind::kFc;
        u.channel = ch;
        u.input_index = ii;
        u.in_channel = 0;
        u.is_last = (ii == pairs - 1);
        u.has_second = (2 * ii + 1 < t_in);
        u.in_a = 2 * ii;
        u.in_b = u.has_second ? 2 * ii + 1 : -1;
        u.out_elem = u.is_last ? ch : -1;
        units.push_back(u);
      }
    }
  }
  return units;
}

std::vector<CapUnit> modularize(const QuantizedModel& qm) { return modularize(qm.shape); }

int64_t unit_count(const ModelShape& shape) {
  int64_t total = 0;
  for (size_t n = 0; n < shape.conv.size(); ++n) {
    total += static_cast<int64_t>(shape.conv[n].in_channels) * shape.conv[n].out_channels *
             shape.conv_output_length(static_cast<int>(n));
  }
  for (const auto& l : shape.fc)
    total += static_cast<int64_t>(l.out_features) * ((l.in_features + 1) / 2);
  return total;
}

int max_layer_width(const ModelShape& shape) {
  int c = 1;
  for (const auto& l : shape.conv) c = std::max({c, l.in_channels, l.out_channels});
  for (const auto& l : shape.fc) c = std::max({c, l.in_features, l.out_features});
  return c;
}

int64_t recirculation_bound(const ModelShape& shape, int64_t units_per_pass) {
  if (units_per_pass < 1) fail(ErrorKind::kInvalidArgument, "units per pass must be >= 1");
  int64_t c = max_layer_width(shape);
  int64_t numer = (shape.input_features + static_cast<int64_t>(shape.conv.size()) +
                   static_cast<int64_t>(shape.fc.size())) *
                  c * c;
  return (numer + units_per_pass - 1) / units_per_pass;
}

// ---------------------------------------------------------------------------
// Header layout

HeaderLayout allocate_header(const ModelShape& shape, int bits) {
  shape.validate();
  HeaderLayout layout;
  layout.slot_bits = bits;

  int num_conv = static_cast<int>(shape.conv.size());
  int64_t best_term = -1;
  for (int k = 0; k < num_conv; ++k) {
    int64_t term =
        static_cast<int64_t>(shape.conv[k].out_channels) * shape.conv_output_length(k);
    if (term > best_term) {  // ties keep the lowest k
      best_term = term;
      int64_t next = (k + 1 < num_conv)
                         ? shape.conv[k + 1].in_channels
                         : (shape.fc.empty() ? 0 : shape.fc[0].in_features);
      layout.conv_bits = (term + next) * bits;
    }
  }
  int64_t fc_width = 0;
  for (const auto& l : shape.fc)
    fc_width = std::max(fc_width, static_cast<int64_t>(l.in_features) + l.out_features);
  layout.fc_bits = fc_width * bits;
  layout.header_bits = std::max(layout.conv_bits, layout.fc_bits);

  // Overlay allocation. Tensor i is read while tensor i+1 is produced, so a
  // new tensor may only reuse slots of tensors whose last read has passed
  // (i-2 and older). Freed slots are reused lowest-index first.
  int boundaries = shape.num_layers() + 1;
  layout.tensor_slots.resize(boundaries);
  std::set<int> free_slots;
  int universe = 0;
  for (int i = 0; i < boundaries; ++i) {
    if (i >= 2)
      for (int s : layout.tensor_slots[i - 2]) free_slots.insert(s);
    int size = shape.boundary_size(i);
    auto& slots = layout.tensor_slots[i];
    slots.reserve(size);
    for (int e = 0; e < size; ++e) {
      if (!free_slots.empty()) {
        slots.push_back(*free_slots.begin());
        free_slots.erase(free_slots.begin());
      } else {
        slots.push_back(universe++);
      }
    }
  }
  layout.slot_count = universe;
  layout.total_header_bits = static_cast<int64_t>(universe) * bits;
  return layout;
}

void check_layout_liveness(const ModelShape& shape, const HeaderLayout& layout,
                           const std::vector<CapUnit>& units) {
  std::vector<std::pair<int, int>> shadow(layout.slot_count, {-1, -1});
  for (size_t e = 0; e < layout.tensor_slots[0].size(); ++e)
    shadow[layout.tensor_slots[0][e]] = {0, static_cast<int>(e)};
  for (const CapUnit& u : units) {
    auto read = [&](int elem) {
      int slot = layout.tensor_slots[u.layer][elem];
      if (shadow[slot] != std::make_pair(u.layer, elem))
        fail(ErrorKind::kValidation,
             "stale header read: layer " + std::to_string(u.layer) + " element " +
                 std::to_string(elem) + " at slot " + std::to_string(slot));
    };
    read(u.in_a);
    if (u.in_b >= 0) read(u.in_b);
    if (u.is_last) {
      int slot = layout.tensor_slots[u.layer + 1][u.out_elem];
      shadow[slot] = {u.layer + 1, u.out_elem};
    }
  }
  // The output tensor must be intact at the end.
  const auto& out_slots = layout.tensor_slots.back();
  int last = static_cast<int>(layout.tensor_slots.size()) - 1;
  for (size_t e = 0; e < out_slots.size(); ++e) {
    if (shadow[out_slots[e]] != std::make_pair(last, static_cast<int>(e)))
      fail(ErrorKind::kValidation, "output element " + std::to_string(e) + " overwritten");
  }
  (void)shape;
}

// ---------------------------------------------------------------------------
// Match-action tables

std::string mat_kind_name(MatKind k) {
  switch (k) {
    case MatKind::kWeight: return "weight";
    case MatKind::kBias: return "bias";
    case MatKind::kMultiplication: return "multiplication";
    case MatKind::kQuantization: return "quantization";
    case MatKind::kPooling: return "pooling";
    case MatKind::kStorage: return "storage";
    case MatKind::kInputSelect: return "input-select";
  }
  return "unknown";
}

void Mat::sort_entries() {
  std::sort(entries.begin(), entries.end(),
            [](const MatEntry& a, const MatEntry& b) { return a.key < b.key; });
  for (size_t i = 1; i < entries.size(); ++i) {
    if (entries[i].key == entries[i - 1].key)
      fail(ErrorKind::kValidation, "duplicate key in table " + name);
  }
}

const MatEntry* Mat::find(const std::vector<int64_t>& key) const {
  auto it = std::lower_bound(entries.begin(), entries.end(), key,
                             [](const MatEntry& e, const std::vector<int64_t>& k) {
                               return e.key < k;
                             });
  if (it == entries.end() || it->key != key) return nullptr;
  return &*it;
}

Mat build_mult_table(const QuantParams& w_params, const QuantParams& x_params, int layer,
                     int64_t entry_cap) {
  int w_lo = w_params.qmin - w_params.zero_point;
  int w_hi = w_params.qmax - w_params.zero_point;
  int x_lo = x_params.qmin - x_params.zero_point;
  int x_hi = x_params.qmax - x_params.zero_point;
  int64_t count = static_cast<int64_t>(w_hi - w_lo + 1) * (x_hi - x_lo + 1);
  if (count > entry_cap)
    fail(ErrorKind::kCapacity, "multiplication table for layer " + std::to_string(layer) +
                                   " needs " + std::to_string(count) + " entries (cap " +
                                   std::to_string(entry_cap) +
                                   "); bit-width too large for the MAT strategy");
  Mat mat;
  mat.name = "mult_l" + std::to_string(layer);
  mat.kind = MatKind::kMultiplication;
  mat.layer = layer;
  mat.key_names = {"w_off", "x_off"};
  mat.action_schema = {"p"};
  mat.entries.reserve(static_cast<size_t>(count));
  for (int w = w_lo; w <= w_hi; ++w) {
    for (int x = x_lo; x <= x_hi; ++x) {
      MatEntry e;
      e.key = {w, x};
      e.values = {ActionValue::immediate(static_cast<int64_t>(w) * x)};
      mat.entries.push_back(std::move(e));
    }
  }
  return mat;
}

Mat build_quant_table(const Requantizer& rq, const QuantParams& out_params, int32_t acc_lo,
                      int32_t acc_hi, int layer, int64_t entry_cap) {
  int64_t span = static_cast<int64_t>(acc_hi) - acc_lo + 1;
  if (span > entry_cap)
    fail(ErrorKind::kCapacity,
         "quantization table for layer " + std::to_string(layer) + " spans " +
             std::to_string(span) + " accumulator values (cap " + std::to_string(entry_cap) +
             "); use the shift-sequence fallback");
  Mat mat;
  mat.name = "quant_l" + std::to_string(layer);
  mat.kind = MatKind::kQuantization;
  mat.layer = layer;
  mat.key_names = {"acc"};
  mat.action_schema = {"q"};
  mat.entries.reserve(static_cast<size_t>(span));
  for (int64_t acc = acc_lo; acc <= acc_hi; ++acc) {
    MatEntry e;
    e.key = {acc};
    e.values = {ActionValue::immediate(
        requantize(static_cast<int32_t>(acc), rq, out_params.qmin, out_params.qmax))};
    mat.entries.push_back(std::move(e));
  }
  return mat;
}

Mat build_byte_product_table(int32_t mantissa, int layer) {
  Mat mat;
  mat.name = "quant_mul_l" + std::to_string(layer);
  mat.kind = MatKind::kQuantization;
  mat.layer = layer;
  mat.key_names = {"byte"};
  mat.action_schema = {"p"};
  mat.entries.reserve(256);
  for (int b = 0; b < 256; ++b) {
    MatEntry e;
    e.key = {b};
    e.values = {ActionValue::immediate(static_cast<int64_t>(b) * mantissa)};
    mat.entries.push_back(std::move(e));
  }
  return mat;
}

std::pair<int64_t, int64_t> accumulator_range(const QuantizedModel& qm, int layer) {
  const QuantizedLayer& ql = qm.layers[layer];
  const QuantParams& xp = qm.layer_input_params(layer);
  int64_t w_lo = ql.w_params.qmin - ql.w_params.zero_point;
  int64_t w_hi = ql.w_params.qmax - ql.w_params.zero_point;
  int64_t x_lo = xp.qmin - xp.zero_point;
  int64_t x_hi = xp.qmax - xp.zero_point;
  int64_t p1 = w_lo * x_lo, p2 = w_lo * x_hi, p3 = w_hi * x_lo, p4 = w_hi * x_hi;
  int64_t p_min = std::min({p1, p2, p3, p4});
  int64_t p_max = std::max({p1, p2, p3, p4});
  int num_conv = static_cast<int>(qm.shape.conv.size());
  int64_t terms = ql.kind == LayerKind::kConv ? qm.shape.conv[layer].in_channels
                                              : qm.shape.fc[layer - num_conv].in_features;
  int64_t b_lo = ql.biases.front(), b_hi = ql.biases.front();
  for (int32_t b : ql.biases) {
    b_lo = std::min<int64_t>(b_lo, b);
    b_hi = std::max<int64_t>(b_hi, b);
  }
  return {terms * p_min + b_lo, terms * p_max + b_hi};
}

// ---------------------------------------------------------------------------
// Program linkage

int PipelineProgram::field_id(const std::string& name) const {
  for (size_t i = 0; i < fields.size(); ++i)
    if (fields[i].name == name) return static_cast<int>(i);
  fail(ErrorKind::kValidation, "unknown field " + name);
}

void PipelineProgram::link() {
  mat_index.clear();
  for (size_t i = 0; i < mats.size(); ++i) mat_index[mats[i].name] = static_cast<int>(i);
}

int PipelineProgram::resolve_mat(const MatRef& ref, int layer) const {
  std::string name = ref.per_layer ? ref.base + "_l" + std::to_string(layer) : ref.base;
  auto it = mat_index.find(name);
  return it == mat_index.end() ? -1 : it->second;
}

// ---------------------------------------------------------------------------
// Compilation

namespace {

constexpr int64_t kInt32Max = std::numeric_limits<int32_t>::max();

class ProgramBuilder {
 public:
  ProgramBuilder(const QuantizedModel& qm, const CompileOptions& opt) : qm_(qm), opt_(opt) {}

  std::pair<PipelineProgram, CompileReport> run() {
    qm_.shape.validate();
    if (opt_.units_per_pass < 1)
      fail(ErrorKind::kInvalidArgument, "units per pass must be >= 1");

    prog_.bits = qm_.bits;
    prog_.units_per_pass = opt_.units_per_pass;
    prog_.stage_budget = opt_.stage_budget;
    prog_.shape = qm_.shape;
    prog_.total_layers = qm_.shape.num_layers();
    prog_.max_width = max_layer_width(qm_.shape);

    units_ = modularize(qm_.shape);
    prog_.total_units = static_cast<int64_t>(units_.size());
    if (prog_.total_units != unit_count(qm_.shape))
      fail(ErrorKind::kValidation, "unit enumeration does not match the closed form");
    prog_.passes = (prog_.total_units + opt_.units_per_pass - 1) / opt_.units_per_pass;
    prog_.recirculations = prog_.passes - 1;
    prog_.pass_bound = recirculation_bound(qm_.shape, opt_.units_per_pass);
    if (prog_.passes > prog_.pass_bound)
      fail(ErrorKind::kValidation, "pass count exceeds the recirculation bound");

    prog_.layout = allocate_header(qm_.shape, qm_.bits);
    check_layout_liveness(qm_.shape, prog_.layout, units_);

    check_stage_budget();
    declare_fields();
    build_automaton();
    build_tables();
    for (int slot = 0; slot < opt_.units_per_pass; ++slot) emit_unit_stages(slot);
    prog_.stages_per_pass = static_cast<int>(prog_.stages.size());

    for (int s : prog_.layout.tensor_slots.back()) prog_.output_slots.push_back(slot_field_[s]);
    prog_.link();

    CompileReport report = resource_report(prog_);
    return {std::move(prog_), report};
  }

 private:
  static constexpr int kStagesPerUnit = 10;

  void check_stage_budget() {
    int64_t needed = static_cast<int64_t>(kStagesPerUnit) * opt_.units_per_pass;
    if (needed > opt_.stage_budget) {
      int slot = opt_.stage_budget / kStagesPerUnit;  // first unit slot that does not fit
      fail(ErrorKind::kStageOverflow,
           "cannot place stage 'u" + std::to_string(slot) + "_input_select' (stage " +
               std::to_string(slot * kStagesPerUnit + 1) + " of " + std::to_string(needed) +
               ") within the budget of " + std::to_string(opt_.stage_budget));
    }
  }

  int add_field(const std::string& name, int bits, bool is_signed, bool is_header) {
    prog_.fields.push_back(FieldDef{name, bits, is_signed, is_header});
    return static_cast<int>(prog_.fields.size() - 1);
  }

  void declare_fields() {
    layer_index_ = add_field("layer_index", 16, false, true);
    channel_index_ = add_field("channel_index", 16, false, true);
    input_index_ = add_field("input_index", 16, false, true);
    conv_flag_ = add_field("conv_flag", 16, false, true);
    done_ = add_field("done", 8, false, true);
    acc1_ = add_field("acc_temp_1", 32, true, true);
    acc2_ = add_field("acc_temp_2", 32, true, true);
    int b = qm_.bits;
    result1_ = add_field("result_1", b, true, true);
    result2_ = add_field("result_2", b, true, true);
    pooled_ = add_field("pooled", b, true, true);
    slot_field_.resize(prog_.layout.slot_count);
    for (int s = 0; s < prog_.layout.slot_count; ++s)
      slot_field_[s] = add_field("s" + std::to_string(s), b, true, true);

    x1_ = add_field("x1", b, true, false);
    x2_ = add_field("x2", b, true, false);
    zx_ = add_field("zx", b, true, false);
    x1_off_ = add_field("x1_off", b + 1, true, false);
    x2_off_ = add_field("x2_off", b + 1, true, false);
    w1_off_ = add_field("w1_off", b + 1, true, false);
    w2_off_ = add_field("w2_off", b + 1, true, false);
    m1_ = add_field("m1", 32, true, false);
    m2_ = add_field("m2", 32, true, false);
    qb_ = add_field("qb", 32, true, false);
    za_ = add_field("za", b, true, false);
    is_fc_ = add_field("is_fc", 8, false, false);
    is_last_ = add_field("is_last", 8, false, false);
    apply_relu_ = add_field("apply_relu", 8, false, false);
    use_mat_ = add_field("use_mat", 8, false, false);
    pool_tail_ = add_field("pool_tail", 8, false, false);
    store_src_ = add_field("store_src", b, true, false);
    rq_sh_ = add_field("rq_sh", 8, false, false);
    rq_n_ = add_field("rq_n", 8, false, false);
    rq_rc_lo_ = add_field("rq_rc_lo", 32, true, false);
    rq_rc_hi_ = add_field("rq_rc_hi", 32, true, false);
    rq_nge16_ = add_field("rq_nge16", 8, false, false);
    for (int i = 0; i < kNumTemps; ++i)
      temp_[i] = add_field("f_t" + std::to_string(i), 32, true, false);

    // Control, accumulator and result fields ride in the header alongside the
    // feature slots.
    int64_t control_bits = 0;
    for (const auto& f : prog_.fields)
      if (f.is_header) control_bits += f.bits;
    prog_.layout.total_header_bits = control_bits;
  }

  void build_automaton() {
    int num_conv = static_cast<int>(qm_.shape.conv.size());
    for (int layer = 0; layer < prog_.total_layers; ++layer) {
      const QuantizedLayer& ql = qm_.layers[layer];
      LayerCtl ctl;
      ctl.layer = layer;
      ctl.is_fc = ql.kind == LayerKind::kFc;
      if (!ctl.is_fc) {
        ctl.cf_limit = qm_.shape.conv[layer].in_channels;
        ctl.ii_limit = qm_.shape.conv_output_length(layer);
        ctl.ch_limit = qm_.shape.conv[layer].out_channels;
      } else {
        int t_in = qm_.shape.fc[layer - num_conv].in_features;
        ctl.cf_limit = (t_in + 1) / 2;
        ctl.ii_limit = ctl.cf_limit;
        ctl.ch_limit = qm_.shape.fc[layer - num_conv].out_features;
      }
      if (ctl.cf_limit > 0xffff || ctl.ii_limit > 0xffff || ctl.ch_limit > 0xffff)
        fail(ErrorKind::kCapacity, "layer too wide for 16-bit control counters");

      auto [acc_lo, acc_hi] = accumulator_range(qm_, layer);
      // Pre-bias partial sums must stay in 32 bits too (they live in the
      // accumulator header fields between passes).
      int64_t safe_lo = std::min(acc_lo, acc_lo - static_cast<int64_t>(0));
      int64_t safe_hi = acc_hi;
      for (int32_t b : ql.biases) {
        safe_lo = std::min(safe_lo, acc_lo - b);
        safe_hi = std::max(safe_hi, acc_hi - b);
      }
      if (safe_lo < -kInt32Max || safe_hi > kInt32Max || acc_lo < -kInt32Max ||
          acc_hi > kInt32Max)
        fail(ErrorKind::kOverflow,
             "layer " + std::to_string(layer) + " accumulator range exceeds 32-bit");
      ctl.acc_lo = static_cast<int32_t>(acc_lo);
      ctl.acc_hi = static_cast<int32_t>(acc_hi);
      ctl.use_mat = (acc_hi - acc_lo + 1) <= opt_.quant_table_cap;
      if (!ctl.use_mat && ql.requant.shift < 8)
        fail(ErrorKind::kCapacity,
             "layer " + std::to_string(layer) +
                 ": requantizer shift below 8 is not supported by the shift-sequence fallback");
      const QuantParams& xp = qm_.layer_input_params(layer);
      ctl.x_off_lo = xp.qmin - xp.zero_point;
      ctl.x_off_hi = xp.qmax - xp.zero_point;
      prog_.automaton.push_back(ctl);
    }
  }

  void build_tables() {
    int num_conv = static_cast<int>(qm_.shape.conv.size());

    Mat input_select;
    input_select.name = "input_select";
    input_select.kind = MatKind::kInputSelect;
    input_select.key_names = {"layer", "input_index", "conv_flag"};
    input_select.action_schema = {"x1", "x2", "zx", "is_fc", "is_last"};

    Mat weight;
    weight.name = "weight";
    weight.kind = MatKind::kWeight;
    weight.key_names = {"layer", "channel", "conv_flag"};
    weight.action_schema = {"w1_off", "w2_off"};

    Mat bias;
    bias.name = "bias";
    bias.kind = MatKind::kBias;
    bias.key_names = {"layer", "channel"};
    bias.action_schema = {"qb", "za", "apply_relu", "use_mat", "rq_sh",
                          "rq_n", "rq_rc_lo", "rq_rc_hi", "rq_nge16"};

    Mat pooling;
    pooling.name = "pooling";
    pooling.kind = MatKind::kPooling;
    pooling.key_names = {"layer", "input_index"};
    pooling.action_schema = {"tail"};

    Mat storage;
    storage.name = "storage";
    storage.kind = MatKind::kStorage;
    storage.store_mode = true;
    storage.key_names = {"layer", "channel", "input_index"};
    storage.action_schema = {"target"};

    for (int layer = 0; layer < prog_.total_layers; ++layer) {
      const QuantizedLayer& ql = qm_.layers[layer];
      const LayerCtl& ctl = prog_.automaton[layer];
      const QuantParams& xp = qm_.layer_input_params(layer);
      int zw = ql.w_params.zero_point;
      bool is_fc = ctl.is_fc;
      const auto& in_slots = prog_.layout.tensor_slots[layer];
      const auto& out_slots = prog_.layout.tensor_slots[layer + 1];

      // input-select entries
      int in_len = is_fc ? qm_.shape.fc[layer - num_conv].in_features
                         : qm_.shape.conv_input_length(layer);
      for (int ii = 0; ii < ctl.ii_limit; ++ii) {
        int cf_begin = is_fc ? ii : 0;
        int cf_end = is_fc ? ii + 1 : ctl.cf_limit;
        for (int cf = cf_begin; cf < cf_end; ++cf) {
          int a_elem = is_fc ? 2 * ii : cf * in_len + 2 * ii;
          bool second = 2 * ii + 1 < in_len;
          int b_elem = second ? a_elem + 1 : -1;
          MatEntry e;
          e.key = {layer, ii, cf};
          e.values = {
              ActionValue::field_ref(slot_field_[in_slots[a_elem]]),
              second ? ActionValue::field_ref(slot_field_[in_slots[b_elem]])
                     : ActionValue::immediate(xp.zero_point),
              ActionValue::immediate(xp.zero_point),
              ActionValue::immediate(is_fc ? 1 : 0),
              ActionValue::immediate((is_fc ? ii == ctl.cf_limit - 1 : cf == ctl.cf_limit - 1)
                                         ? 1
                                         : 0),
          };
          input_select.entries.push_back(std::move(e));
        }
      }

      // weight entries
      for (int ch = 0; ch < ctl.ch_limit; ++ch) {
        for (int cf = 0; cf < ctl.cf_limit; ++cf) {
          int64_t w1, w2;
          if (!is_fc) {
            w1 = w2 = ql.weights[ch][cf] - zw;
          } else {
            w1 = ql.weights[ch][2 * cf] - zw;
            w2 = (2 * cf + 1 < in_len) ? ql.weights[ch][2 * cf + 1] - zw : 0;
          }
          MatEntry e;
          e.key = {layer, ch, cf};
          e.values = {ActionValue::immediate(w1), ActionValue::immediate(w2)};
          weight.entries.push_back(std::move(e));
        }
      }

      // bias entries (per-layer requantizer constants ride along)
      int shift = ql.requant.shift;
      int64_t rc = shift >= 1 ? (int64_t{1} << (shift - 1)) : 0;
      for (int ch = 0; ch < ctl.ch_limit; ++ch) {
        MatEntry e;
        e.key = {layer, ch};
        e.values = {ActionValue::immediate(ql.biases[ch]),
                    ActionValue::immediate(ql.a_params.zero_point),
                    ActionValue::immediate(ql.apply_relu ? 1 : 0),
                    ActionValue::immediate(ctl.use_mat ? 1 : 0),
                    ActionValue::immediate(shift >= 16 ? shift - 16 : 16 - shift),
                    ActionValue::immediate(shift),
                    ActionValue::immediate(rc & 0xffff),
                    ActionValue::immediate(rc >> 16),
                    ActionValue::immediate(shift >= 16 ? 1 : 0)};
        bias.entries.push_back(std::move(e));
      }

      // pooling entries (conv only)
      if (!is_fc) {
        for (int ii = 0; ii < ctl.ii_limit; ++ii) {
          MatEntry e;
          e.key = {layer, ii};
          e.values = {ActionValue::immediate(2 * ii + 1 < in_len ? 0 : 1)};
          pooling.entries.push_back(std::move(e));
        }
      }

      // storage entries: every completion unit writes one output element
      for (int ch = 0; ch < ctl.ch_limit; ++ch) {
        if (!is_fc) {
          for (int ii = 0; ii < ctl.ii_limit; ++ii) {
            MatEntry e;
            e.key = {layer, ch, ii};
            e.target_field = slot_field_[out_slots[ch * ctl.ii_limit + ii]];
            e.ann_layer = layer;
            e.ann_channel = ch;
            e.ann_pos = ii;
            storage.entries.push_back(std::move(e));
          }
        } else {
          MatEntry e;
          e.key = {layer, ch, ctl.ii_limit - 1};
          e.target_field = slot_field_[out_slots[ch]];
          e.ann_layer = layer;
          e.ann_channel = ch;
          e.ann_pos = 0;
          storage.entries.push_back(std::move(e));
        }
      }

      prog_.mats.push_back(build_mult_table(ql.w_params, xp, layer, opt_.mult_table_cap));
      if (ctl.use_mat) {
        prog_.mats.push_back(build_quant_table(ql.requant, ql.a_params, ctl.acc_lo, ctl.acc_hi,
                                               layer, opt_.quant_table_cap));
      } else {
        prog_.mats.push_back(build_byte_product_table(ql.requant.mantissa, layer));
      }
    }

    for (Mat* m : {&input_select, &weight, &bias, &pooling, &storage}) m->sort_entries();
    prog_.mats.push_back(std::move(input_select));
    prog_.mats.push_back(std::move(weight));
    prog_.mats.push_back(std::move(bias));
    prog_.mats.push_back(std::move(pooling));
    prog_.mats.push_back(std::move(storage));
  }

  // --- stage emission -------------------------------------------------------

  using Guards = std::vector<Guard>;

  Guards base() const { return {Guard{done_, 0}}; }

  static Guards with(Guards g, std::initializer_list<Guard> extra) {
    for (const Guard& e : extra) g.push_back(e);
    return g;
  }

  StageOp arith(OpKind kind, int dst, Operand a, Operand b, Guards guards) {
    StageOp op;
    op.kind = kind;
    op.guards = std::move(guards);
    op.dst = dst;
    op.a = a;
    op.b = b;
    return op;
  }

  StageOp copy(int dst, Operand a, Guards guards) {
    StageOp op;
    op.kind = OpKind::kCopy;
    op.guards = std::move(guards);
    op.dst = dst;
    op.a = a;
    return op;
  }

  StageOp select(int dst, CmpKind cmp, Operand a, Operand b, Operand c, Operand d,
                 Guards guards) {
    StageOp op;
    op.kind = OpKind::kSelect;
    op.guards = std::move(guards);
    op.dst = dst;
    op.cmp = cmp;
    op.a = a;
    op.b = b;
    op.c = c;
    op.d = d;
    return op;
  }

  StageOp lookup(const std::string& mat_base, bool per_layer, std::vector<int> keys,
                 std::vector<int> bindings, Guards guards) {
    StageOp op;
    op.kind = OpKind::kMatLookup;
    op.guards = std::move(guards);
    op.mat = MatRef{mat_base, per_layer};
    op.key_fields = std::move(keys);
    op.bindings = std::move(bindings);
    return op;
  }

  StageOp store(const std::string& mat_base, std::vector<int> keys, int src, Guards guards) {
    StageOp op;
    op.kind = OpKind::kMatLookup;
    op.guards = std::move(guards);
    op.mat = MatRef{mat_base, false};
    op.key_fields = std::move(keys);
    op.store_src = src;
    return op;
  }

  static Operand f(int field) { return Operand::field_ref(field); }
  static Operand imm(int64_t v) { return Operand::immediate(v); }

  // Shift-sequence requantization: acc * mantissa decomposed into byte
  // products, rounded and shifted in 32-bit pieces. Bit-identical to
  // requantize(); see the quantizer module.
  void emit_requant_fallback(Stage& stage, int acc, int result, const Guards& g0) {
    auto g = [&](std::initializer_list<Guard> extra) { return with(g0, extra); };
    int t0 = temp_[0], mag = temp_[1], hi = temp_[2], lo = temp_[3], h0 = temp_[4],
        h1 = temp_[5], l0 = temp_[6], l1 = temp_[7], ph0 = temp_[8], ph1 = temp_[9],
        pl0 = temp_[10], pl1 = temp_[11], pa = temp_[12], pb = temp_[13], bhi = temp_[14],
        blo = temp_[15], s = temp_[16], carry = temp_[17], slo = temp_[18], x = temp_[19],
        res = temp_[20], nres = temp_[21], t5 = temp_[22];
    auto& ops = stage.ops;
    ops.push_back(arith(OpKind::kSub, t0, imm(0), f(acc), g({})));
    ops.push_back(select(mag, CmpKind::kLt, f(acc), imm(0), f(t0), f(acc), g({})));
    ops.push_back(arith(OpKind::kShiftRight, hi, f(mag), imm(16), g({})));
    ops.push_back(arith(OpKind::kShiftLeft, t0, f(hi), imm(16), g({})));
    ops.push_back(arith(OpKind::kSub, lo, f(mag), f(t0), g({})));
    ops.push_back(arith(OpKind::kShiftRight, h1, f(hi), imm(8), g({})));
    ops.push_back(arith(OpKind::kShiftLeft, t0, f(h1), imm(8), g({})));
    ops.push_back(arith(OpKind::kSub, h0, f(hi), f(t0), g({})));
    ops.push_back(arith(OpKind::kShiftRight, l1, f(lo), imm(8), g({})));
    ops.push_back(arith(OpKind::kShiftLeft, t0, f(l1), imm(8), g({})));
    ops.push_back(arith(OpKind::kSub, l0, f(lo), f(t0), g({})));
    ops.push_back(lookup("quant_mul", true, {h0}, {ph0}, g({})));
    ops.push_back(lookup("quant_mul", true, {h1}, {ph1}, g({})));
    ops.push_back(lookup("quant_mul", true, {l0}, {pl0}, g({})));
    ops.push_back(lookup("quant_mul", true, {l1}, {pl1}, g({})));
    ops.push_back(arith(OpKind::kShiftLeft, ph1, f(ph1), imm(8), g({})));
    ops.push_back(arith(OpKind::kAdd, pa, f(ph0), f(ph1), g({})));
    ops.push_back(arith(OpKind::kShiftLeft, pl1, f(pl1), imm(8), g({})));
    ops.push_back(arith(OpKind::kAdd, pb, f(pl0), f(pl1), g({})));
    ops.push_back(arith(OpKind::kShiftRight, bhi, f(pb), imm(16), g({})));
    ops.push_back(arith(OpKind::kShiftLeft, t0, f(bhi), imm(16), g({})));
    ops.push_back(arith(OpKind::kSub, blo, f(pb), f(t0), g({})));
    ops.push_back(arith(OpKind::kAdd, s, f(blo), f(rq_rc_lo_), g({})));
    ops.push_back(arith(OpKind::kShiftRight, carry, f(s), imm(16), g({})));
    ops.push_back(arith(OpKind::kShiftLeft, t0, f(carry), imm(16), g({})));
    ops.push_back(arith(OpKind::kSub, slo, f(s), f(t0), g({})));
    ops.push_back(arith(OpKind::kAdd, x, f(pa), f(bhi), g({})));
    ops.push_back(arith(OpKind::kAdd, x, f(x), f(rq_rc_hi_), g({})));
    ops.push_back(arith(OpKind::kAdd, x, f(x), f(carry), g({})));
    ops.push_back(arith(OpKind::kShiftRight, res, f(x), f(rq_sh_), g({{rq_nge16_, 1}})));
    // shift < 16: res = min(X, 2^20) << (16 - shift) + (s_lo >> shift); the
    // cap only fires past saturation, where the clamp below wins anyway.
    ops.push_back(arith(OpKind::kMin, x, f(x), imm(1 << 20), g({{rq_nge16_, 0}})));
    ops.push_back(arith(OpKind::kShiftLeft, res, f(x), f(rq_sh_), g({{rq_nge16_, 0}})));
    ops.push_back(arith(OpKind::kShiftRight, t5, f(slo), f(rq_n_), g({{rq_nge16_, 0}})));
    ops.push_back(arith(OpKind::kAdd, res, f(res), f(t5), g({{rq_nge16_, 0}})));
    ops.push_back(arith(OpKind::kSub, nres, imm(0), f(res), g({})));
    ops.push_back(select(res, CmpKind::kLt, f(acc), imm(0), f(nres), f(res), g({})));
    ops.push_back(arith(OpKind::kAdd, res, f(res), f(za_), g({})));
    auto [qmin, qmax] = compute_qrange(qm_.bits, true);
    ops.push_back(arith(OpKind::kMax, res, f(res), imm(qmin), g({})));
    ops.push_back(arith(OpKind::kMin, res, f(res), imm(qmax), g({})));
    ops.push_back(copy(result, f(res), g({})));
  }

  void emit_unit_stages(int slot) {
    std::string prefix = "u" + std::to_string(slot) + "_";
    Guards last = with(base(), {{is_last_, 1}});
    Guards last_conv = with(last, {{is_fc_, 0}});
    Guards last_fc = with(last, {{is_fc_, 1}});

    Stage s1{prefix + "input_select", {}};
    s1.ops.push_back(lookup("input_select", false, {layer_index_, input_index_, conv_flag_},
                            {x1_, x2_, zx_, is_fc_, is_last_}, base()));
    s1.ops.push_back(arith(OpKind::kSub, x1_off_, f(x1_), f(zx_), base()));
    s1.ops.push_back(arith(OpKind::kSub, x2_off_, f(x2_), f(zx_), base()));
    prog_.stages.push_back(std::move(s1));

    Stage s2{prefix + "param_fetch", {}};
    s2.ops.push_back(lookup("weight", false, {layer_index_, channel_index_, conv_flag_},
                            {w1_off_, w2_off_}, base()));
    s2.ops.push_back(lookup("bias", false, {layer_index_, channel_index_},
                            {qb_, za_, apply_relu_, use_mat_, rq_sh_, rq_n_, rq_rc_lo_,
                             rq_rc_hi_, rq_nge16_},
                            base()));
    prog_.stages.push_back(std::move(s2));

    Stage s3{prefix + "mult_1", {}};
    s3.ops.push_back(lookup("mult", true, {w1_off_, x1_off_}, {m1_}, base()));
    prog_.stages.push_back(std::move(s3));

    Stage s4{prefix + "mult_2", {}};
    s4.ops.push_back(lookup("mult", true, {w2_off_, x2_off_}, {m2_}, base()));
    prog_.stages.push_back(std::move(s4));

    Stage s5{prefix + "accumulate", {}};
    s5.ops.push_back(arith(OpKind::kAdd, acc1_, f(acc1_), f(m1_), base()));
    s5.ops.push_back(arith(OpKind::kAdd, acc2_, f(acc2_), f(m2_), base()));
    prog_.stages.push_back(std::move(s5));

    Stage s6{prefix + "quantize", {}};
    // fc folds its second accumulator into the first before the single
    // requantization; conv requantizes both feature results.
    s6.ops.push_back(arith(OpKind::kAdd, acc1_, f(acc1_), f(acc2_), last_fc));
    s6.ops.push_back(arith(OpKind::kAdd, acc1_, f(acc1_), f(qb_), last));
    s6.ops.push_back(arith(OpKind::kAdd, acc2_, f(acc2_), f(qb_), last_conv));
    s6.ops.push_back(lookup("quant", true, {acc1_}, {result1_}, with(last, {{use_mat_, 1}})));
    s6.ops.push_back(
        lookup("quant", true, {acc2_}, {result2_}, with(last_conv, {{use_mat_, 1}})));
    emit_requant_fallback(s6, acc1_, result1_, with(last, {{use_mat_, 0}}));
    emit_requant_fallback(s6, acc2_, result2_, with(last_conv, {{use_mat_, 0}}));
    prog_.stages.push_back(std::move(s6));

    Stage s7{prefix + "relu", {}};
    Guards relu_g = with(last, {{apply_relu_, 1}});
    s7.ops.push_back(arith(OpKind::kMax, result1_, f(result1_), f(za_), relu_g));
    s7.ops.push_back(
        arith(OpKind::kMax, result2_, f(result2_), f(za_), with(relu_g, {{is_fc_, 0}})));
    prog_.stages.push_back(std::move(s7));

    Stage s8{prefix + "pool", {}};
    s8.ops.push_back(
        lookup("pooling", false, {layer_index_, input_index_}, {pool_tail_}, last_conv));
    s8.ops.push_back(arith(OpKind::kMax, pooled_, f(result1_), f(result2_),
                           with(last_conv, {{pool_tail_, 0}})));
    s8.ops.push_back(copy(pooled_, f(result1_), with(last_conv, {{pool_tail_, 1}})));
    prog_.stages.push_back(std::move(s8));

    Stage s9{prefix + "storage", {}};
    s9.ops.push_back(copy(store_src_, f(pooled_), last_conv));
    s9.ops.push_back(copy(store_src_, f(result1_), last_fc));
    s9.ops.push_back(
        store("storage", {layer_index_, channel_index_, input_index_}, store_src_, last));
    s9.ops.push_back(copy(acc1_, imm(0), last));
    s9.ops.push_back(copy(acc2_, imm(0), last));
    prog_.stages.push_back(std::move(s9));

    Stage s10{prefix + "control", {}};
    StageOp ctl;
    ctl.kind = OpKind::kCounterUpdate;
    ctl.guards = base();
    s10.ops.push_back(std::move(ctl));
    prog_.stages.push_back(std::move(s10));
  }

  const QuantizedModel& qm_;
  CompileOptions opt_;
  PipelineProgram prog_;
  std::vector<CapUnit> units_;

  static constexpr int kNumTemps = 23;
  int layer_index_ = -1, channel_index_ = -1, input_index_ = -1, conv_flag_ = -1, done_ = -1;
  int acc1_ = -1, acc2_ = -1, result1_ = -1, result2_ = -1, pooled_ = -1;
  std::vector<int> slot_field_;
  int x1_ = -1, x2_ = -1, zx_ = -1, x1_off_ = -1, x2_off_ = -1, w1_off_ = -1, w2_off_ = -1;
  int m1_ = -1, m2_ = -1, qb_ = -1, za_ = -1;
  int is_fc_ = -1, is_last_ = -1, apply_relu_ = -1, use_mat_ = -1, pool_tail_ = -1;
  int store_src_ = -1;
  int rq_sh_ = -1, rq_n_ = -1, rq_rc_lo_ = -1, rq_rc_hi_ = -1, rq_nge16_ = -1;
  int temp_[kNumTemps] = {};
};

}  // namespace

std::pair<PipelineProgram, CompileReport> compile(const QuantizedModel& qm,
                                                  const CompileOptions& options) {
  ProgramBuilder builder(qm, options);
  return builder.run();
}

CompileReport resource_report(const PipelineProgram& prog) {
  CompileReport report;
  report.total_units = prog.total_units;
  report.units_per_pass = prog.units_per_pass;
  report.recirculations = prog.recirculations;
  report.passes = prog.passes;
  report.pass_bound = prog.pass_bound;
  report.max_width = prog.max_width;
  report.stages_per_pass = prog.stages_per_pass;
  report.stage_budget = prog.stage_budget;
  report.conv_bits = prog.layout.conv_bits;
  report.fc_bits = prog.layout.fc_bits;
  report.header_bits = prog.layout.header_bits;
  report.actual_header_bits = prog.layout.total_header_bits;
  for (const auto& kind : {MatKind::kWeight, MatKind::kBias, MatKind::kMultiplication,
                           MatKind::kQuantization, MatKind::kPooling, MatKind::kStorage,
                           MatKind::kInputSelect})
    report.entries_per_kind[mat_kind_name(kind)] = 0;
  for (const Mat& mat : prog.mats) {
    auto count = static_cast<int64_t>(mat.entries.size());
    report.entries_per_mat[mat.name] = count;
    report.entries_per_kind[mat_kind_name(mat.kind)] += count;
    report.total_entries += count;
  }
  return report;
}

// ---------------------------------------------------------------------------
// JSON serialization

namespace {

using nlohmann::json;

const char* op_kind_name(OpKind k) {
  switch (k) {
    case OpKind::kMatLookup: return "lookup";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMax: return "max";
    case OpKind::kMin: return "min";
    case OpKind::kShiftLeft: return "shl";
    case OpKind::kShiftRight: return "shr";
    case OpKind::kCopy: return "copy";
    case OpKind::kSelect: return "select";
    case OpKind::kCounterUpdate: return "counter";
    case OpKind::kMultiply: return "mul";
    case OpKind::kDivide: return "div";
  }
  return "?";
}

OpKind op_kind_from_name(const std::string& s) {
  if (s == "lookup") return OpKind::kMatLookup;
  if (s == "add") return OpKind::kAdd;
  if (s == "sub") return OpKind::kSub;
  if (s == "max") return OpKind::kMax;
  if (s == "min") return OpKind::kMin;
  if (s == "shl") return OpKind::kShiftLeft;
  if (s == "shr") return OpKind::kShiftRight;
  if (s == "copy") return OpKind::kCopy;
  if (s == "select") return OpKind::kSelect;
  if (s == "counter") return OpKind::kCounterUpdate;
  if (s == "mul") return OpKind::kMultiply;
  if (s == "div") return OpKind::kDivide;
  fail(ErrorKind::kParse, "unknown op kind " + s);
}

const char* cmp_name(CmpKind c) {
  switch (c) {
    case CmpKind::kLt: return "lt";
    case CmpKind::kLe: return "le";
    case CmpKind::kEq: return "eq";
    case CmpKind::kNe: return "ne";
    case CmpKind::kGt: return "gt";
    case CmpKind::kGe: return "ge";
  }
  return "?";
}

CmpKind cmp_from_name(const std::string& s) {
  if (s == "lt") return CmpKind::kLt;
  if (s == "le") return CmpKind::kLe;
  if (s == "eq") return CmpKind::kEq;
  if (s == "ne") return CmpKind::kNe;
  if (s == "gt") return CmpKind::kGt;
  if (s == "ge") return CmpKind::kGe;
  fail(ErrorKind::kParse, "unknown comparison " + s);
}

MatKind mat_kind_from_name(const std::string& s) {
  if (s == "weight") return MatKind::kWeight;
  if (s == "bias") return MatKind::kBias;
  if (s == "multiplication") return MatKind::kMultiplication;
  if (s == "quantization") return MatKind::kQuantization;
  if (s == "pooling") return MatKind::kPooling;
  if (s == "storage") return MatKind::kStorage;
  if (s == "input-select") return MatKind::kInputSelect;
  fail(ErrorKind::kParse, "unknown mat kind " + s);
}

json operand_to_json(const Operand& o) {
  if (o.is_imm) return json::array({0, o.imm});
  return json::array({1, o.field});
}

Operand operand_from_json(const json& j) {
  Operand o;
  o.is_imm = j[0].get<int>() == 0;
  if (o.is_imm)
    o.imm = j[1].get<int64_t>();
  else
    o.field = j[1].get<int>();
  return o;
}

json op_to_json(const StageOp& op) {
  json j;
  j["k"] = op_kind_name(op.kind);
  if (!op.guards.empty()) {
    json g = json::array();
    for (const auto& guard : op.guards) g.push_back(json::array({guard.field, guard.equals}));
    j["g"] = g;
  }
  if (op.dst >= 0) j["d"] = op.dst;
  if (op.kind != OpKind::kMatLookup && op.kind != OpKind::kCounterUpdate) {
    j["a"] = operand_to_json(op.a);
    if (op.kind != OpKind::kCopy) j["b"] = operand_to_json(op.b);
    if (op.kind == OpKind::kSelect) {
      j["cmp"] = cmp_name(op.cmp);
      j["c"] = operand_to_json(op.c);
      j["e"] = operand_to_json(op.d);
    }
  }
  if (op.kind == OpKind::kMatLookup) {
    j["mat"] = json{{"base", op.mat.base}, {"pl", op.mat.per_layer}};
    j["keys"] = op.key_fields;
    if (op.store_src >= 0)
      j["src"] = op.store_src;
    else
      j["bind"] = op.bindings;
  }
  return j;
}

StageOp op_from_json(const json& j) {
  StageOp op;
  op.kind = op_kind_from_name(j.at("k").get<std::string>());
  if (j.contains("g"))
    for (const auto& g : j["g"]) op.guards.push_back(Guard{g[0].get<int>(), g[1].get<int64_t>()});
  if (j.contains("d")) op.dst = j["d"].get<int>();
  if (j.contains("a")) op.a = operand_from_json(j["a"]);
  if (j.contains("b")) op.b = operand_from_json(j["b"]);
  if (j.contains("cmp")) op.cmp = cmp_from_name(j["cmp"].get<std::string>());
  if (j.contains("c")) op.c = operand_from_json(j["c"]);
  if (j.contains("e")) op.d = operand_from_json(j["e"]);
  if (j.contains("mat")) {
    op.mat.base = j["mat"].at("base").get<std::string>();
    op.mat.per_layer = j["mat"].at("pl").get<bool>();
  }
  if (j.contains("keys")) op.key_fields = j["keys"].get<std::vector<int>>();
  if (j.contains("bind")) op.bindings = j["bind"].get<std::vector<int>>();
  if (j.contains("src")) op.store_src = j["src"].get<int>();
  return op;
}

}  // namespace

std::string program_to_json(const PipelineProgram& prog) {
  json j;
  j["schema"] = "quark-prog-v1";
  j["meta"] = json{{"bits", prog.bits},
                   {"units_per_pass", prog.units_per_pass},
                   {"stage_budget", prog.stage_budget},
                   {"stages_per_pass", prog.stages_per_pass},
                   {"total_layers", prog.total_layers},
                   {"total_units", prog.total_units},
                   {"passes", prog.passes},
                   {"recirculations", prog.recirculations},
                   {"pass_bound", prog.pass_bound},
                   {"max_width", prog.max_width}};
  json shape;
  shape["input_features"] = prog.shape.input_features;
  shape["input_channels"] = prog.shape.input_channels;
  shape["conv"] = json::array();
  for (const auto& l : prog.shape.conv)
    shape["conv"].push_back({{"in", l.in_channels}, {"out", l.out_channels}});
  shape["fc"] = json::array();
  for (const auto& l : prog.shape.fc)
    shape["fc"].push_back({{"in", l.in_features}, {"out", l.out_features}});
  j["shape"] = shape;

  j["layout"] = json{{"conv_bits", prog.layout.conv_bits},
                     {"fc_bits", prog.layout.fc_bits},
                     {"header_bits", prog.layout.header_bits},
                     {"slot_bits", prog.layout.slot_bits},
                     {"slot_count", prog.layout.slot_count},
                     {"total_header_bits", prog.layout.total_header_bits},
                     {"tensor_slots", prog.layout.tensor_slots}};

  j["fields"] = json::array();
  for (const auto& field : prog.fields)
    j["fields"].push_back(json{{"name", field.name},
                               {"bits", field.bits},
                               {"signed", field.is_signed},
                               {"header", field.is_header}});

  j["automaton"] = json::array();
  for (const auto& ctl : prog.automaton)
    j["automaton"].push_back(json{{"layer", ctl.layer},
                                  {"is_fc", ctl.is_fc},
                                  {"cf_limit", ctl.cf_limit},
                                  {"ii_limit", ctl.ii_limit},
                                  {"ch_limit", ctl.ch_limit},
                                  {"acc_lo", ctl.acc_lo},
                                  {"acc_hi", ctl.acc_hi},
                                  {"use_mat", ctl.use_mat},
                                  {"x_off_lo", ctl.x_off_lo},
                                  {"x_off_hi", ctl.x_off_hi}});

  j["stages"] = json::array();
  for (const auto& stage : prog.stages) {
    json s;
    s["name"] = stage.name;
    s["ops"] = json::array();
    for (const auto& op : stage.ops) s["ops"].push_back(op_to_json(op));
    j["stages"].push_back(s);
  }

  j["mats"] = json::array();
  for (const auto& mat : prog.mats) {
    json m;
    m["name"] = mat.name;
    m["kind"] = mat_kind_name(mat.kind);
    m["layer"] = mat.layer;
    m["store"] = mat.store_mode;
    m["keys"] = mat.key_names;
    m["schema"] = mat.action_schema;
    json entries = json::array();
    for (const auto& e : mat.entries) {
      json entry;
      entry["k"] = e.key;
      if (mat.store_mode) {
        entry["t"] = e.target_field;
        entry["ann"] = json::array({e.ann_layer, e.ann_channel, e.ann_pos});
      } else {
        json values = json::array();
        for (const auto& v : e.values) {
          if (v.is_field)
            values.push_back(json{{"f", v.field}});
          else
            values.push_back(v.imm);
        }
        entry["v"] = values;
      }
      entries.push_back(std::move(entry));
    }
    m["entries"] = std::move(entries);
    j["mats"].push_back(std::move(m));
  }

  j["output_slots"] = prog.output_slots;
  return j.dump() + "\n";
}

PipelineProgram program_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const std::exception& e) {
    fail(ErrorKind::kParse, std::string("program JSON: ") + e.what());
  }
  PipelineProgram prog;
  const json& meta = j.at("meta");
  prog.bits = meta.at("bits").get<int>();
  prog.units_per_pass = meta.at("units_per_pass").get<int>();
  prog.stage_budget = meta.at("stage_budget").get<int>();
  prog.stages_per_pass = meta.at("stages_per_pass").get<int>();
  prog.total_layers = meta.at("total_layers").get<int>();
  prog.total_units = meta.at("total_units").get<int64_t>();
  prog.passes = meta.at("passes").get<int64_t>();
  prog.recirculations = meta.at("recirculations").get<int64_t>();
  prog.pass_bound = meta.at("pass_bound").get<int64_t>();
  prog.max_width = meta.at("max_width").get<int>();

  const json& shape = j.at("shape");
  prog.shape.input_features = shape.at("input_features").get<int>();
  prog.shape.input_channels = shape.at("input_channels").get<int>();
  for (const auto& l : shape.at("conv"))
    prog.shape.conv.push_back({l.at("in").get<int>(), l.at("out").get<int>()});
  for (const auto& l : shape.at("fc"))
    prog.shape.fc.push_back({l.at("in").get<int>(), l.at("out").get<int>()});

  const json& layout = j.at("layout");
  prog.layout.conv_bits = layout.at("conv_bits").get<int64_t>();
  prog.layout.fc_bits = layout.at("fc_bits").get<int64_t>();
  prog.layout.header_bits = layout.at("header_bits").get<int64_t>();
  prog.layout.slot_bits = layout.at("slot_bits").get<int>();
  prog.layout.slot_count = layout.at("slot_count").get<int>();
  prog.layout.total_header_bits = layout.at("total_header_bits").get<int64_t>();
  prog.layout.tensor_slots = layout.at("tensor_slots").get<std::vector<std::vector<int>>>();

  for (const auto& field : j.at("fields"))
    prog.fields.push_back(FieldDef{field.at("name").get<std::string>(),
                                   field.at("bits").get<int>(), field.at("signed").get<bool>(),
                                   field.at("header").get<bool>()});

  for (const auto& a : j.at("automaton")) {
    LayerCtl ctl;
    ctl.layer = a.at("layer").get<int>();
    ctl.is_fc = a.at("is_fc").get<bool>();
    ctl.cf_limit = a.at("cf_limit").get<int>();
    ctl.ii_limit = a.at("ii_limit").get<int>();
    ctl.ch_limit = a.at("ch_limit").get<int>();
    ctl.acc_lo = a.at("acc_lo").get<int32_t>();
    ctl.acc_hi = a.at("acc_hi").get<int32_t>();
    ctl.use_mat = a.at("use_mat").get<bool>();
    ctl.x_off_lo = a.at("x_off_lo").get<int>();
    ctl.x_off_hi = a.at("x_off_hi").get<int>();
    prog.automaton.push_back(ctl);
  }

  for (const auto& s : j.at("stages")) {
    Stage stage;
    stage.name = s.at("name").get<std::string>();
    for (const auto& op : s.at("ops")) stage.ops.push_back(op_from_json(op));
    prog.stages.push_back(std::move(stage));
  }

  for (const auto& m : j.at("mats")) {
    Mat mat;
    mat.name = m.at("name").get<std::string>();
    mat.kind = mat_kind_from_name(m.at("kind").get<std::string>());
    mat.layer = m.at("layer").get<int>();
    mat.store_mode = m.at("store").get<bool>();
    mat.key_names = m.at("keys").get<std::vector<std::string>>();
    mat.action_schema = m.at("schema").get<std::vector<std::string>>();
    for (const auto& e : m.at("entries")) {
      MatEntry entry;
      entry.key = e.at("k").get<std::vector<int64_t>>();
      if (mat.store_mode) {
        entry.target_field = e.at("t").get<int>();
        entry.ann_layer = e.at("ann")[0].get<int>();
        entry.ann_channel = e.at("ann")[1].get<int>();
        entry.ann_pos = e.at("ann")[2].get<int>();
      } else {
        for (const auto& v : e.at("v")) {
          if (v.is_object())
            entry.values.push_back(ActionValue::field_ref(v.at("f").get<int>()));
          else
            entry.values.push_back(ActionValue::immediate(v.get<int64_t>()));
        }
      }
      mat.entries.push_back(std::move(entry));
    }
    prog.mats.push_back(std::move(mat));
  }

  prog.output_slots = j.at("output_slots").get<std::vector<int>>();
  prog.link();
  return prog;
}

void save_program(const PipelineProgram& prog, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path);
  out << program_to_json(prog);
}

PipelineProgram load_program(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return program_from_json(ss.str());
}

}  // namespace quark
