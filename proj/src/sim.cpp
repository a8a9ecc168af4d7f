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

#include "quark/sim.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <sstream>

namespace quark {

namespace {

std::pair<int64_t, int64_t> field_limits(const FieldDef& f) {
  if (f.is_signed) {
    int64_t hi = (f.bits >= 64) ? INT64_MAX : (int64_t{1} << (f.bits - 1)) - 1;
    int64_t lo = (f.bits >= 64) ? INT64_MIN : -(int64_t{1} << (f.bits - 1));
    return {lo, hi};
  }
  int64_t hi = (f.bits >= 64) ? INT64_MAX : (int64_t{1} << f.bits) - 1;
  return {0, hi};
}

std::string key_dump(const std::vector<int64_t>& key) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < key.size(); ++i) os << (i ? ", " : "") << key[i];
  os << ")";
  return os.str();
}

class PassRunner {
 public:
  PassRunner(const PipelineProgram& prog, Phv& phv, std::vector<StoredValue>* store_log,
             bool capture)
      : prog_(prog), phv_(phv), store_log_(store_log), capture_(capture) {
    layer_index_ = prog.field_id("layer_index");
    channel_index_ = prog.field_id("channel_index");
    input_index_ = prog.field_id("input_index");
    conv_flag_ = prog.field_id("conv_flag");
    done_ = prog.field_id("done");
  }

  PassTrace run(int pass_index) {
    PassTrace trace;
    trace.pass_index = pass_index;
    // Metadata does not survive recirculation.
    for (size_t i = 0; i < prog_.fields.size(); ++i)
      if (!prog_.fields[i].is_header) phv_.values[i] = 0;
    for (const Stage& stage : prog_.stages) {
      if (capture_) {
        trace.stages.push_back(StageTrace{stage.name, {}, {}});
        stage_trace_ = &trace.stages.back();
      } else {
        stage_trace_ = nullptr;
      }
      for (const StageOp& op : stage.ops) {
        if (!guards_pass(op)) continue;
        exec(op);
      }
    }
    return trace;
  }

 private:
  bool guards_pass(const StageOp& op) const {
    for (const Guard& g : op.guards)
      if (phv_.values[g.field] != g.equals) return false;
    return true;
  }

  int64_t read(const Operand& o) const { return o.is_imm ? o.imm : phv_.values[o.field]; }

  void write(int field, int64_t value) {
    const FieldDef& def = prog_.fields[field];
    auto [lo, hi] = field_limits(def);
    if (value < lo || value > hi)
      fail(ErrorKind::kOverflow, "write of " + std::to_string(value) + " exceeds " +
                                     std::to_string(def.bits) + "-bit field " + def.name);
    phv_.values[field] = value;
    if (stage_trace_) stage_trace_->writes.emplace_back(field, value);
  }

  void exec(const StageOp& op) {
    switch (op.kind) {
      case OpKind::kAdd:
        write(op.dst, read(op.a) + read(op.b));
        return;
      case OpKind::kSub:
        write(op.dst, read(op.a) - read(op.b));
        return;
      case OpKind::kMax:
        write(op.dst, std::max(read(op.a), read(op.b)));
        return;
      case OpKind::kMin:
        write(op.dst, std::min(read(op.a), read(op.b)));
        return;
      case OpKind::kShiftLeft: {
        int64_t amount = read(op.b);
        if (amount < 0 || amount > 62) fail(ErrorKind::kOverflow, "shift amount out of range");
        write(op.dst, read(op.a) << amount);
        return;
      }
      case OpKind::kShiftRight: {
        int64_t amount = read(op.b);
        if (amount < 0 || amount > 62) fail(ErrorKind::kOverflow, "shift amount out of range");
        write(op.dst, read(op.a) >> amount);  // arithmetic
        return;
      }
      case OpKind::kCopy:
        write(op.dst, read(op.a));
        return;
      case OpKind::kSelect: {
        int64_t a = read(op.a), b = read(op.b);
        bool taken = false;
        switch (op.cmp) {
          case CmpKind::kLt: taken = a < b; break;
          case CmpKind::kLe: taken = a <= b; break;
          case CmpKind::kEq: taken = a == b; break;
          case CmpKind::kNe: taken = a != b; break;
          case CmpKind::kGt: taken = a > b; break;
          case CmpKind::kGe: taken = a >= b; break;
        }
        write(op.dst, taken ? read(op.c) : read(op.d));
        return;
      }
      case OpKind::kCounterUpdate:
        counter_update();
        return;
      case OpKind::kMatLookup:
        mat_lookup(op);
        return;
      case OpKind::kMultiply:
      case OpKind::kDivide:
        fail(ErrorKind::kValidation, "illegal primitive reached the simulator");
    }
  }

  void mat_lookup(const StageOp& op) {
    int layer = static_cast<int>(phv_.values[layer_index_]);
    int mat_id = prog_.resolve_mat(op.mat, layer);
    std::vector<int64_t> key;
    key.reserve(op.key_fields.size());
    for (int field : op.key_fields) key.push_back(phv_.values[field]);
    if (mat_id < 0)
      fail(ErrorKind::kMatMiss, "no table '" + op.mat.base + "' for layer " +
                                    std::to_string(layer) + ", key " + key_dump(key));
    const Mat& mat = prog_.mats[mat_id];
    const MatEntry* entry = mat.find(key);
    if (stage_trace_) stage_trace_->mat_events.push_back({mat.name, key, entry != nullptr});
    if (entry == nullptr)
      fail(ErrorKind::kMatMiss,
           "compiler bug: table '" + mat.name + "' missed key " + key_dump(key) +
               " (layer_index=" + std::to_string(phv_.values[layer_index_]) +
               " channel_index=" + std::to_string(phv_.values[channel_index_]) +
               " input_index=" + std::to_string(phv_.values[input_index_]) +
               " conv_flag=" + std::to_string(phv_.values[conv_flag_]) + ")");
    if (mat.store_mode) {
      int64_t value = phv_.values[op.store_src];
      write(entry->target_field, value);
      if (store_log_)
        store_log_->push_back(
            StoredValue{entry->ann_layer, entry->ann_channel, entry->ann_pos, value});
    } else {
      if (entry->values.size() != op.bindings.size())
        fail(ErrorKind::kValidation, "table '" + mat.name + "' action arity mismatch");
      for (size_t i = 0; i < entry->values.size(); ++i) {
        int dst = op.bindings[i];
        if (dst < 0) continue;
        const ActionValue& v = entry->values[i];
        write(dst, v.is_field ? phv_.values[v.field] : v.imm);
      }
    }
  }

  void counter_update() {
    int layer = static_cast<int>(phv_.values[layer_index_]);
    if (layer >= prog_.total_layers)
      fail(ErrorKind::kValidation, "counter update past the last layer");
    const LayerCtl& ctl = prog_.automaton[layer];
    int64_t cf = phv_.values[conv_flag_] + 1;
    int64_t ii = phv_.values[input_index_];
    int64_t ch = phv_.values[channel_index_];
    if (!ctl.is_fc) {
      if (cf == ctl.cf_limit) {
        cf = 0;
        if (++ii == ctl.ii_limit) {
          ii = 0;
          if (++ch == ctl.ch_limit) {
            ch = 0;
            ++layer;
          }
        }
      }
    } else {
      ++ii;
      if (cf == ctl.cf_limit) {
        cf = 0;
        ii = 0;
        if (++ch == ctl.ch_limit) {
          ch = 0;
          ++layer;
        }
      }
    }
    write(conv_flag_, cf);
    write(input_index_, ii);
    write(channel_index_, ch);
    write(layer_index_, layer);
    write(done_, layer >= prog_.total_layers ? 1 : 0);
  }

  const PipelineProgram& prog_;
  Phv& phv_;
  std::vector<StoredValue>* store_log_;
  bool capture_;
  StageTrace* stage_trace_ = nullptr;
  int layer_index_, channel_index_, input_index_, conv_flag_, done_;
};

}  // namespace

Phv make_phv(const PipelineProgram& prog) {
  Phv phv;
  phv.values.assign(prog.fields.size(), 0);
  return phv;
}

void load_input(const PipelineProgram& prog, Phv& phv, const std::vector<int>& q_x) {
  const auto& slots = prog.layout.tensor_slots.at(0);
  if (q_x.size() != slots.size())
    fail(ErrorKind::kDimension, "input feature count does not match the program layout");
  for (size_t e = 0; e < slots.size(); ++e) {
    int field = prog.field_id("s" + std::to_string(slots[e]));
    const FieldDef& def = prog.fields[field];
    auto [lo, hi] = field_limits(def);
    if (q_x[e] < lo || q_x[e] > hi)
      fail(ErrorKind::kOverflow, "input feature " + std::to_string(e) + " exceeds slot width");
    phv.values[field] = q_x[e];
  }
}

PassTrace execute_pass(const PipelineProgram& prog, Phv& phv, int pass_index,
                       std::vector<StoredValue>* store_log, bool capture_trace) {
  if (phv.values.size() != prog.fields.size())
    fail(ErrorKind::kDimension, "PHV does not match the program's field table");
  PassRunner runner(prog, phv, store_log, capture_trace);
  return runner.run(pass_index);
}

InferenceResult run_inference(const PipelineProgram& prog, const std::vector<int>& q_x,
                              const SimOptions& options) {
  InferenceResult result;
  Phv phv = make_phv(prog);
  load_input(prog, phv, q_x);

  bool capture = options.trace == TraceMode::kOn ||
                 (options.trace == TraceMode::kAuto && prog.passes <= 256);
  int done_field = prog.field_id("done");
  std::vector<StoredValue> store_log;
  int64_t guard = 2 * prog.pass_bound;
  while (phv.values[done_field] == 0) {
    if (result.passes_used >= guard)
      fail(ErrorKind::kNonTermination,
           "inference did not finish within " + std::to_string(guard) +
               " passes (twice the recirculation bound)");
    PassTrace trace =
        execute_pass(prog, phv, static_cast<int>(result.passes_used), &store_log, capture);
    if (capture) result.traces.push_back(std::move(trace));
    ++result.passes_used;
  }

  // Rebuild per-layer activation tensors from the storage writes.
  result.activations.resize(prog.total_layers);
  for (int layer = 0; layer < prog.total_layers; ++layer)
    result.activations[layer].assign(prog.layout.tensor_slots[layer + 1].size(), 0);
  for (const StoredValue& sv : store_log) {
    const LayerCtl& ctl = prog.automaton[sv.layer];
    size_t idx = ctl.is_fc ? static_cast<size_t>(sv.channel)
                           : static_cast<size_t>(sv.channel) * ctl.ii_limit + sv.pos;
    result.activations[sv.layer][idx] = static_cast<int>(sv.value);
  }

  result.logits.reserve(prog.output_slots.size());
  for (int field : prog.output_slots)
    result.logits.push_back(static_cast<int>(phv.values[field]));
  int best = 0;
  for (size_t i = 1; i < result.logits.size(); ++i)
    if (result.logits[i] > result.logits[best]) best = static_cast<int>(i);
  result.cls = best;
  return result;
}

// ---------------------------------------------------------------------------
// Static validation

namespace {

bool field_ok(const PipelineProgram& prog, int field) {
  return field >= 0 && field < static_cast<int>(prog.fields.size());
}

bool operand_ok(const PipelineProgram& prog, const Operand& o) {
  return o.is_imm || field_ok(prog, o.field);
}

}  // namespace

ValidationReport validate_program(const PipelineProgram& prog) {
  ValidationReport report;
  auto violation = [&](const std::string& msg) { report.violations.push_back(msg); };

  std::map<std::string, const Mat*> mats;
  for (const Mat& mat : prog.mats) mats[mat.name] = &mat;
  auto mat_for = [&](const std::string& base, int layer, bool per_layer) -> const Mat* {
    std::string name = per_layer ? base + "_l" + std::to_string(layer) : base;
    auto it = mats.find(name);
    return it == mats.end() ? nullptr : it->second;
  };

  // Stage budget and pass arithmetic.
  if (static_cast<int>(prog.stages.size()) != prog.stages_per_pass)
    violation("stage list length does not match stages_per_pass");
  if (prog.stages_per_pass > prog.stage_budget)
    violation("stages per pass (" + std::to_string(prog.stages_per_pass) +
              ") exceed the budget (" + std::to_string(prog.stage_budget) + ")");
  int64_t expect_passes =
      (prog.total_units + prog.units_per_pass - 1) / prog.units_per_pass;
  if (prog.passes != expect_passes) violation("pass count is not ceil(U / p)");
  if (prog.recirculations != prog.passes - 1) violation("recirculations are not passes - 1");
  if (prog.passes > prog.pass_bound) violation("pass count exceeds the recirculation bound");
  if (prog.total_units != unit_count(prog.shape))
    violation("unit count does not match the model shape");

  // Primitive whitelist and operand sanity.
  for (size_t s = 0; s < prog.stages.size(); ++s) {
    const Stage& stage = prog.stages[s];
    for (size_t o = 0; o < stage.ops.size(); ++o) {
      const StageOp& op = stage.ops[o];
      std::string where = "stage '" + stage.name + "' op " + std::to_string(o);
      if (op.kind == OpKind::kMultiply || op.kind == OpKind::kDivide) {
        violation(where + ": primitive outside the PISA whitelist");
        continue;
      }
      for (const Guard& g : op.guards)
        if (!field_ok(prog, g.field)) violation(where + ": guard references unknown field");
      if (op.kind == OpKind::kMatLookup) {
        for (int k : op.key_fields)
          if (!field_ok(prog, k)) violation(where + ": key references unknown field");
        if (op.store_src >= 0 && !field_ok(prog, op.store_src))
          violation(where + ": store source references unknown field");
        for (int b : op.bindings)
          if (b >= 0 && !field_ok(prog, b)) violation(where + ": binding references unknown field");
      } else if (op.kind != OpKind::kCounterUpdate) {
        if (!field_ok(prog, op.dst)) violation(where + ": destination references unknown field");
        if (!operand_ok(prog, op.a) || !operand_ok(prog, op.b) || !operand_ok(prog, op.c) ||
            !operand_ok(prog, op.d))
          violation(where + ": operand references unknown field");
      }
    }
  }

  // Header width bookkeeping.
  int64_t header_bits = 0;
  for (const FieldDef& f : prog.fields) {
    if (f.bits < 1 || f.bits > 64) violation("field " + f.name + " has width " + std::to_string(f.bits));
    if (f.is_header) header_bits += f.bits;
  }
  if (header_bits != prog.layout.total_header_bits)
    violation("header bit sum " + std::to_string(header_bits) +
              " does not match the recorded total " +
              std::to_string(prog.layout.total_header_bits));

  if (static_cast<int>(prog.automaton.size()) != prog.total_layers)
    violation("automaton does not cover every layer");

  // Key coverage over every reachable control state.
  std::vector<CapUnit> units;
  try {
    units = modularize(prog.shape);
  } catch (const Error& e) {
    violation(std::string("shape invalid: ") + e.what());
    return report;
  }
  const Mat* input_select = mat_for("input_select", 0, false);
  const Mat* weight = mat_for("weight", 0, false);
  const Mat* bias = mat_for("bias", 0, false);
  const Mat* pooling = mat_for("pooling", 0, false);
  const Mat* storage = mat_for("storage", 0, false);
  for (const char* name : {"input_select", "weight", "bias", "pooling", "storage"})
    if (mats.find(name) == mats.end()) violation(std::string("missing table '") + name + "'");
  if (!input_select || !weight || !bias || !pooling || !storage) return report;

  int64_t missing = 0;
  auto check_key = [&](const Mat* mat, std::vector<int64_t> key, const std::string& what) {
    if (mat->find(key) == nullptr) {
      if (++missing <= 10) violation(what + ": no entry for key " + key_dump(key));
    }
  };
  for (const CapUnit& u : units) {
    check_key(input_select, {u.layer, u.input_index, u.kind == LayerKind::kFc ? u.input_index : u.in_channel},
              "input_select");
    check_key(weight, {u.layer, u.channel, u.kind == LayerKind::kFc ? u.input_index : u.in_channel},
              "weight");
    check_key(bias, {u.layer, u.channel}, "bias");
    if (u.is_last) {
      check_key(storage, {u.layer, u.channel, u.input_index}, "storage");
      if (u.kind == LayerKind::kConv) check_key(pooling, {u.layer, u.input_index}, "pooling");
    }
  }
  if (missing > 10)
    violation(std::to_string(missing - 10) + " further coverage misses suppressed");

  // Multiplication tables must cover every weight offset against the full
  // input offset range; quantization tables must span the accumulator range.
  for (const LayerCtl& ctl : prog.automaton) {
    const Mat* mult = mat_for("mult", ctl.layer, true);
    if (!mult) {
      violation("missing multiplication table for layer " + std::to_string(ctl.layer));
      continue;
    }
    std::set<int64_t> w_offs;
    for (const MatEntry& e : weight->entries) {
      if (e.key[0] != ctl.layer) continue;
      for (const ActionValue& v : e.values) w_offs.insert(v.imm);
    }
    int64_t mult_missing = 0;
    for (int64_t w : w_offs) {
      for (int x = ctl.x_off_lo; x <= ctl.x_off_hi; ++x) {
        const MatEntry* e = mult->find({w, x});
        if (e == nullptr) {
          ++mult_missing;
        } else if (e->values[0].imm != w * x) {
          violation(mult->name + ": wrong product for key " + key_dump({w, x}));
        }
      }
    }
    if (mult_missing > 0)
      violation(mult->name + ": " + std::to_string(mult_missing) + " reachable keys uncovered");

    if (ctl.use_mat) {
      const Mat* quant = mat_for("quant", ctl.layer, true);
      if (!quant) {
        violation("missing quantization table for layer " + std::to_string(ctl.layer));
        continue;
      }
      int64_t span = static_cast<int64_t>(ctl.acc_hi) - ctl.acc_lo + 1;
      bool covered = static_cast<int64_t>(quant->entries.size()) == span &&
                     !quant->entries.empty() && quant->entries.front().key[0] == ctl.acc_lo &&
                     quant->entries.back().key[0] == ctl.acc_hi;
      if (!covered)
        violation(quant->name + ": does not cover accumulator range [" +
                  std::to_string(ctl.acc_lo) + ", " + std::to_string(ctl.acc_hi) + "]");
    } else {
      const Mat* bytes = mat_for("quant_mul", ctl.layer, true);
      if (!bytes) {
        violation("missing byte product table for layer " + std::to_string(ctl.layer));
        continue;
      }
      if (bytes->entries.size() != 256 || bytes->entries.front().key[0] != 0 ||
          bytes->entries.back().key[0] != 255)
        violation(bytes->name + ": does not cover byte range [0, 255]");
    }
  }

  // Output table.
  if (prog.layout.tensor_slots.empty() ||
      prog.output_slots.size() != prog.layout.tensor_slots.back().size())
    violation("output table does not match the final tensor");
  for (int field : prog.output_slots)
    if (!field_ok(prog, field)) violation("output table references unknown field");

  return report;
}

}  // namespace quark
