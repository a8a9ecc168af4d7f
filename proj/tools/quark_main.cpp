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

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "quark/compiler.hpp"
#include "quark/flow.hpp"
#include "quark/model.hpp"
#include "quark/quantizer.hpp"
#include "quark/sim.hpp"
#include "quark/trainer.hpp"

namespace {

using nlohmann::json;

bool g_verbose = false;

void log_info(const std::string& msg) {
  if (g_verbose) std::cerr << "[quark] " << msg << "\n";
}

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(std::stoi(cell));
  return out;
}

std::vector<int> load_features(const std::string& path) {
  std::ifstream in(path);
  if (!in) quark::fail(quark::ErrorKind::kIo, "cannot read " + path);
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    quark::fail(quark::ErrorKind::kParse, std::string("features JSON: ") + e.what());
  }
  return j.at("values").get<std::vector<int>>();
}

json report_to_json(const quark::CompileReport& r) {
  json j;
  j["U"] = r.total_units;
  j["p"] = r.units_per_pass;
  j["R"] = r.recirculations;
  j["passes"] = r.passes;
  j["bound"] = r.pass_bound;
  j["C"] = r.max_width;
  j["stages_per_pass"] = r.stages_per_pass;
  j["stage_budget"] = r.stage_budget;
  j["conv_bits"] = r.conv_bits;
  j["fc_bits"] = r.fc_bits;
  j["header_bits"] = r.header_bits;
  j["actual_header_bits"] = r.actual_header_bits;
  j["entries_per_mat"] = r.entries_per_mat;
  j["entries_per_kind"] = r.entries_per_kind;
  j["total_entries"] = r.total_entries;
  return j;
}

void print_report(const quark::CompileReport& r, bool as_json) {
  if (as_json) {
    std::cout << report_to_json(r).dump(2) << "\n";
    return;
  }
  std::cout << "units (U):            " << r.total_units << "\n"
            << "units per pass (p):   " << r.units_per_pass << "\n"
            << "passes:               " << r.passes << "\n"
            << "recirculations (R):   " << r.recirculations << "\n"
            << "pass bound:           " << r.pass_bound << "\n"
            << "max width (C):        " << r.max_width << "\n"
            << "stages per pass:      " << r.stages_per_pass << " / " << r.stage_budget << "\n"
            << "Conv_bits:            " << r.conv_bits << "\n"
            << "Fc_bits:              " << r.fc_bits << "\n"
            << "Header_bits:          " << r.header_bits << "\n"
            << "header bits (actual): " << r.actual_header_bits << "\n"
            << "table entries:        " << r.total_entries << "\n";
  for (const auto& [kind, count] : r.entries_per_kind)
    std::cout << "  " << kind << ": " << count << "\n";
}

json metrics_to_json(const quark::Metrics& m) {
  json j;
  j["accuracy"] = m.accuracy;
  j["macro_f1"] = m.macro_f1;
  j["precision"] = m.precision;
  j["recall"] = m.recall;
  j["f1"] = m.f1;
  j["confusion"] = m.confusion;
  j["evaluated"] = m.evaluated;
  j["unclassified"] = m.unclassified;
  return j;
}

struct GenDataArgs {
  uint64_t seed = 1;
  int flows_per_class = 200;
  int classes = 2;
  int n_packets = 8;
  double test_fraction = 0.25;
  std::string profile = "per_packet";
  std::string out_dir = ".";
};

int cmd_gen_data(const GenDataArgs& a) {
  quark::TraceGenConfig cfg;
  cfg.seed = a.seed;
  cfg.flows_per_class = a.flows_per_class;
  cfg.test_fraction = a.test_fraction;
  cfg.flow.n_packets = a.n_packets;
  cfg.flow.profile = a.profile;
  cfg.min_packets = std::max(10, a.n_packets);
  cfg.max_packets = cfg.min_packets + 4;
  cfg.profiles = quark::default_profiles(a.classes);
  quark::SyntheticData data = quark::generate_synthetic(cfg);

  namespace fs = std::filesystem;
  fs::create_directories(a.out_dir);
  auto path = [&](const char* name) { return (fs::path(a.out_dir) / name).string(); };
  quark::save_trace(data.train_packets, path("trace_train.csv"));
  quark::save_trace(data.test_packets, path("trace_test.csv"));
  quark::save_labels(data.train_labels, path("labels_train.csv"));
  quark::save_labels(data.test_labels, path("labels_test.csv"));
  quark::save_dataset(data.train_set, path("dataset_train.csv"));
  quark::save_dataset(data.test_set, path("dataset_test.csv"));
  quark::save_feature_norm(data.norm, path("featnorm.json"));
  std::cout << "wrote " << data.train_set.size() << " training and " << data.test_set.size()
            << " test flows to " << a.out_dir << "\n";
  return 0;
}

struct TrainArgs {
  std::string data;
  std::string featnorm;
  std::string out = "model.json";
  std::string conv = "16,16,16";
  std::string fc = "16,15";
  int input_channels = 1;
  double lr = 0.05;
  int epochs = 30;
  int batch = 32;
  uint64_t seed = 1;
  bool qat = false;
  int qat_bits = 7;
  int qat_epochs = 10;
};

quark::ModelShape shape_from_args(const TrainArgs& a, int feature_width) {
  quark::ModelShape shape;
  shape.input_channels = a.input_channels;
  if (feature_width % a.input_channels != 0)
    quark::fail(quark::ErrorKind::kDimension, "feature width not divisible by input channels");
  shape.input_features = feature_width / a.input_channels;
  int ch = shape.input_channels;
  for (int c : parse_int_list(a.conv)) {
    shape.conv.push_back({ch, c});
    ch = c;
  }
  int width = shape.flattened_conv_width();
  for (int f : parse_int_list(a.fc)) {
    shape.fc.push_back({width, f});
    width = f;
  }
  return shape;
}

int cmd_train(const TrainArgs& a) {
  quark::Dataset data = quark::load_dataset(a.data);
  if (data.size() == 0) quark::fail(quark::ErrorKind::kInvalidArgument, "empty dataset");
  quark::ModelShape shape = shape_from_args(a, static_cast<int>(data.features[0].size()));
  quark::CnnModel model = quark::init_model(shape, a.seed);
  if (!a.featnorm.empty()) model.feature_norm = quark::load_feature_norm(a.featnorm);

  quark::TrainConfig cfg;
  cfg.learning_rate = a.lr;
  cfg.epochs = a.epochs;
  cfg.batch_size = a.batch;
  cfg.seed = a.seed;
  cfg.qat_enabled = a.qat;
  cfg.qat_bits = a.qat_bits;
  cfg.qat_epochs = a.qat_epochs;
  model = quark::train(model, data, cfg);
  double acc = quark::evaluate_accuracy(model, data);
  quark::save_model(model, a.out);
  std::cout << "trained model written to " << a.out << " (training accuracy " << acc << ")\n";
  return 0;
}

struct PruneArgs {
  std::string model;
  std::string out = "pruned.json";
  double rate = 0.8;
  std::string data;
  int retrain_epochs = 10;
  double lr = 0.02;
  int batch = 32;
  uint64_t seed = 1;
  bool as_json = false;
};

int cmd_prune(const PruneArgs& a) {
  quark::CnnModel model = quark::load_model(a.model);
  auto [pruned, report] = quark::prune_channels(model, a.rate);
  if (!a.data.empty()) {
    quark::Dataset data = quark::load_dataset(a.data);
    quark::TrainConfig cfg;
    cfg.learning_rate = a.lr;
    cfg.epochs = a.retrain_epochs;
    cfg.batch_size = a.batch;
    cfg.seed = a.seed;
    pruned = quark::train(pruned, data, cfg);  // fine-tune and recalibrate ranges
  }
  quark::save_model(pruned, a.out);
  if (a.as_json) {
    json j;
    j["rate"] = report.rate;
    j["flops_before"] = report.flops_before;
    j["flops_after"] = report.flops_after;
    j["kept_conv"] = report.kept_conv;
    j["kept_fc_hidden"] = report.kept_fc_hidden;
    std::cout << j.dump(2) << "\n";
  } else {
    std::cout << "pruned model written to " << a.out << "\n"
              << "FLOPs: " << report.flops_before << " -> " << report.flops_after << " ("
              << (1.0 - static_cast<double>(report.flops_after) / report.flops_before) * 100.0
              << "% reduction)\n";
  }
  return 0;
}

int cmd_quantize(const std::string& model_path, int bits, const std::string& out) {
  quark::CnnModel model = quark::load_model(model_path);
  quark::QuantizedModel qm = quark::quantize_model(model, bits);
  quark::save_quantized_model(qm, out);
  std::cout << "quantized model (" << bits << "-bit) written to " << out << "\n";
  return 0;
}

int cmd_compile(const std::string& model_path, const quark::CompileOptions& opt,
                const std::string& out, bool as_json) {
  quark::QuantizedModel qm = quark::load_quantized_model(model_path);
  auto [prog, report] = quark::compile(qm, opt);
  quark::save_program(prog, out);
  log_info("program written to " + out);
  print_report(report, as_json);
  return 0;
}

int cmd_validate(const std::string& program_path) {
  quark::PipelineProgram prog = quark::load_program(program_path);
  quark::ValidationReport report = quark::validate_program(prog);
  if (report.ok()) {
    std::cout << "program ok: " << prog.stages_per_pass << " stages/pass, "
              << prog.mats.size() << " tables, " << prog.passes << " passes\n";
    return 0;
  }
  for (const std::string& v : report.violations) std::cout << "violation: " << v << "\n";
  return 2;
}

int cmd_simulate(const std::string& program_path, const std::string& features_path,
                 const std::string& trace_path, bool as_json) {
  quark::PipelineProgram prog = quark::load_program(program_path);
  std::vector<int> q_x = load_features(features_path);
  quark::SimOptions opts;
  if (!trace_path.empty()) opts.trace = quark::TraceMode::kOn;
  quark::InferenceResult result = quark::run_inference(prog, q_x, opts);
  if (!trace_path.empty()) {
    json traces = json::array();
    for (const auto& pass : result.traces) {
      json p;
      p["pass"] = pass.pass_index;
      p["stages"] = json::array();
      for (const auto& stage : pass.stages) {
        json s;
        s["name"] = stage.name;
        json writes = json::array();
        for (const auto& [field, value] : stage.writes)
          writes.push_back(json::array({prog.fields[field].name, value}));
        s["writes"] = writes;
        json events = json::array();
        for (const auto& ev : stage.mat_events)
          events.push_back(json{{"mat", ev.mat}, {"key", ev.key}, {"hit", ev.hit}});
        s["mat_events"] = events;
        p["stages"].push_back(s);
      }
      traces.push_back(p);
    }
    std::ofstream out(trace_path, std::ios::binary);
    if (!out) quark::fail(quark::ErrorKind::kIo, "cannot write " + trace_path);
    out << traces.dump() << "\n";
  }
  if (as_json) {
    json j;
    j["class"] = result.cls;
    j["passes_used"] = result.passes_used;
    j["logits"] = result.logits;
    std::cout << j.dump() << "\n";
  } else {
    std::cout << "class " << result.cls << " after " << result.passes_used << " passes\n";
  }
  return 0;
}

int cmd_oracle(const std::string& model_path, const std::string& features_path, bool as_json) {
  quark::QuantizedModel qm = quark::load_quantized_model(model_path);
  std::vector<int> q_x = load_features(features_path);
  quark::QuantForwardResult result = quark::quantized_forward(qm, q_x);
  if (as_json) {
    json j;
    j["class"] = result.cls;
    j["logits"] = result.logits;
    j["activations"] = result.activations;
    std::cout << j.dump() << "\n";
  } else {
    std::cout << "class " << result.cls << "\n";
  }
  return 0;
}

struct ClassifyArgs {
  std::string program;
  std::string model;
  std::string trace;
  std::string labels;
  std::string out = "results.csv";
  int64_t iat_limit_us = 60'000'000;
  int64_t capacity = 65536;
  bool as_json = false;
};

int cmd_classify(const ClassifyArgs& a) {
  quark::PipelineProgram prog = quark::load_program(a.program);
  quark::QuantizedModel qm = quark::load_quantized_model(a.model);
  std::vector<quark::PacketRecord> packets = quark::load_trace(a.trace);
  std::map<quark::FlowKey, int> labels;
  if (!a.labels.empty()) labels = quark::load_labels(a.labels);
  quark::FlowConfig cfg;
  cfg.iat_limit_us = a.iat_limit_us;
  cfg.capacity = static_cast<size_t>(a.capacity);
  quark::ClassifyResult result =
      quark::classify_trace(packets, prog, qm, cfg, a.labels.empty() ? nullptr : &labels);
  quark::save_results(result.flows, a.out);
  if (!result.oracle_match) {
    std::cout << "error: simulator diverged from the integer reference\n";
    return 2;
  }
  if (a.as_json) {
    json j;
    j["inferences"] = result.inferences;
    j["oracle_match"] = result.oracle_match;
    j["metrics"] = metrics_to_json(result.metrics);
    std::cout << j.dump(2) << "\n";
  } else {
    std::cout << result.inferences << " inferences, results written to " << a.out << "\n";
    if (!a.labels.empty()) {
      std::cout << "accuracy " << result.metrics.accuracy << ", macro F1 "
                << result.metrics.macro_f1 << " over " << result.metrics.evaluated
                << " labeled flows\n";
    }
  }
  return 0;
}

int cmd_report(const std::string& program_path, bool as_json) {
  quark::PipelineProgram prog = quark::load_program(program_path);
  print_report(quark::resource_report(prog), as_json);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  const char* log_env = std::getenv("QUARK_LOG");
  g_verbose = log_env != nullptr && std::string(log_env) != "" && std::string(log_env) != "quiet";

  CLI::App app{"quark: CNN-to-dataplane toolchain (train, prune, quantize, compile, simulate)"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* c_gen = app.add_subcommand("gen-data", "generate a labeled synthetic packet trace");
  c_gen->add_option("--seed", gen.seed);
  c_gen->add_option("--flows-per-class", gen.flows_per_class);
  c_gen->add_option("--classes", gen.classes);
  c_gen->add_option("--n-packets", gen.n_packets);
  c_gen->add_option("--test-fraction", gen.test_fraction);
  c_gen->add_option("--profile", gen.profile)->check(CLI::IsMember({"per_packet", "extended"}));
  c_gen->add_option("--out-dir", gen.out_dir);

  TrainArgs train;
  auto* c_train = app.add_subcommand("train", "train the float model");
  c_train->add_option("--data", train.data)->required();
  c_train->add_option("--featnorm", train.featnorm);
  c_train->add_option("--out", train.out);
  c_train->add_option("--conv", train.conv);
  c_train->add_option("--fc", train.fc);
  c_train->add_option("--input-channels", train.input_channels);
  c_train->add_option("--lr", train.lr);
  c_train->add_option("--epochs", train.epochs);
  c_train->add_option("--batch", train.batch);
  c_train->add_option("--seed", train.seed);
  c_train->add_flag("--qat", train.qat);
  c_train->add_option("--qat-bits", train.qat_bits);
  c_train->add_option("--qat-epochs", train.qat_epochs);

  PruneArgs prune;
  auto* c_prune = app.add_subcommand("prune", "channel-prune a trained model");
  c_prune->add_option("--model", prune.model)->required();
  c_prune->add_option("--out", prune.out);
  c_prune->add_option("--rate", prune.rate);
  c_prune->add_option("--data", prune.data);
  c_prune->add_option("--retrain-epochs", prune.retrain_epochs);
  c_prune->add_option("--lr", prune.lr);
  c_prune->add_option("--batch", prune.batch);
  c_prune->add_option("--seed", prune.seed);
  c_prune->add_flag("--json", prune.as_json);

  std::string q_model, q_out = "qmodel.json";
  int q_bits = 7;
  auto* c_quant = app.add_subcommand("quantize", "quantize a calibrated model");
  c_quant->add_option("--model", q_model)->required();
  c_quant->add_option("--bits", q_bits);
  c_quant->add_option("--out", q_out);

  std::string comp_model, comp_out = "prog.json";
  quark::CompileOptions comp_opt;
  bool comp_json = false;
  auto* c_comp = app.add_subcommand("compile", "compile a quantized model into a pipeline program");
  c_comp->add_option("--model", comp_model)->required();
  c_comp->add_option("--stages", comp_opt.stage_budget);
  c_comp->add_option("-p,--units-per-pass", comp_opt.units_per_pass);
  c_comp->add_option("--mult-cap", comp_opt.mult_table_cap);
  c_comp->add_option("--quant-cap", comp_opt.quant_table_cap);
  c_comp->add_option("--out", comp_out);
  c_comp->add_flag("--json", comp_json);

  std::string val_prog;
  auto* c_val = app.add_subcommand("validate", "statically check a compiled program");
  c_val->add_option("--program", val_prog)->required();

  std::string sim_prog, sim_features, sim_trace;
  bool sim_json = false;
  auto* c_sim = app.add_subcommand("simulate", "run one inference on the pipeline simulator");
  c_sim->add_option("--program", sim_prog)->required();
  c_sim->add_option("--features", sim_features)->required();
  c_sim->add_option("--trace", sim_trace);
  c_sim->add_flag("--json", sim_json);

  std::string or_model, or_features;
  bool or_json = false;
  auto* c_or = app.add_subcommand("oracle", "run the integer reference inference");
  c_or->add_option("--model", or_model)->required();
  c_or->add_option("--features", or_features)->required();
  c_or->add_flag("--json", or_json);

  ClassifyArgs cls;
  auto* c_cls = app.add_subcommand("classify", "replay a packet trace through the pipeline");
  c_cls->add_option("--program", cls.program)->required();
  c_cls->add_option("--model", cls.model)->required();
  c_cls->add_option("--trace", cls.trace)->required();
  c_cls->add_option("--labels", cls.labels);
  c_cls->add_option("--out", cls.out);
  c_cls->add_option("--iat-limit-us", cls.iat_limit_us);
  c_cls->add_option("--flow-capacity", cls.capacity);
  c_cls->add_flag("--json", cls.as_json);

  std::string rep_prog;
  bool rep_json = false;
  auto* c_rep = app.add_subcommand("report", "print resource usage of a compiled program");
  c_rep->add_option("--program", rep_prog)->required();
  c_rep->add_flag("--json", rep_json);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (c_gen->parsed()) return cmd_gen_data(gen);
    if (c_train->parsed()) return cmd_train(train);
    if (c_prune->parsed()) return cmd_prune(prune);
    if (c_quant->parsed()) return cmd_quantize(q_model, q_bits, q_out);
    if (c_comp->parsed()) return cmd_compile(comp_model, comp_opt, comp_out, comp_json);
    if (c_val->parsed()) return cmd_validate(val_prog);
    if (c_sim->parsed()) return cmd_simulate(sim_prog, sim_features, sim_trace, sim_json);
    if (c_or->parsed()) return cmd_oracle(or_model, or_features, or_json);
    if (c_cls->parsed()) return cmd_classify(cls);
    if (c_rep->parsed()) return cmd_report(rep_prog, rep_json);
  } catch (const quark::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.kind() == quark::ErrorKind::kValidation ? 2 : 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 1;
}
