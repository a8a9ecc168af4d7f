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

#include "quark/flow.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "quark/rng.hpp"

namespace quark {

int feature_width(const FlowConfig& cfg) {
  int base = 2 * cfg.n_packets;
  return cfg.profile == "extended" ? base + 9 : base;
}

// ---------------------------------------------------------------------------
// Flow table

FlowRecord* FlowTable::find(const FlowKey& key) {
  auto it = index_.find(key);
  return it == index_.end() ? nullptr : &it->second->second;
}

void FlowTable::set_prediction(const FlowKey& key, int cls) {
  FlowRecord* rec = find(key);
  if (rec == nullptr) fail(ErrorKind::kInvalidArgument, "prediction for unknown flow");
  rec->state = FlowState::kPredicted;
  rec->predicted_class = cls;
}

FlowRecord& FlowTable::touch(const FlowKey& key) {
  auto it = index_.find(key);
  if (it != index_.end()) {
    lru_.splice(lru_.begin(), lru_, it->second);
    return lru_.front().second;
  }
  if (lru_.size() >= cfg_.capacity) {
    index_.erase(lru_.back().first);
    lru_.pop_back();
  }
  lru_.emplace_front(key, FlowRecord{});
  index_[key] = lru_.begin();
  return lru_.front().second;
}

IngestResult FlowTable::ingest(const PacketRecord& pkt) {
  if (pkt.length < 0) fail(ErrorKind::kInvalidArgument, "negative packet length");
  IngestResult result;
  result.key = pkt.key;
  FlowRecord& rec = touch(pkt.key);

  bool fin = (pkt.tcp_flags & kFlagFin) != 0;
  bool idle = rec.packet_count >= 1 && pkt.ts_us - rec.last_ts > cfg_.iat_limit_us;
  if (fin || idle) rec = FlowRecord{};
  if (fin) return result;  // the FIN packet itself is not counted

  if (rec.state == FlowState::kPredicted) {
    result.kind = IngestResult::kPredicted;
    result.predicted_class = rec.predicted_class;
    return result;
  }
  if (rec.packet_count >= cfg_.n_packets) return result;  // frozen, awaiting prediction

  int64_t iat = rec.packet_count >= 1 ? pkt.ts_us - rec.last_ts : 0;
  if (iat < 0) fail(ErrorKind::kParse, "timestamps must be non-decreasing within a trace");
  if (rec.packet_count == 0) {
    rec.length_max = rec.length_min = pkt.length;
  } else {
    rec.length_max = std::max<int64_t>(rec.length_max, pkt.length);
    rec.length_min = std::min<int64_t>(rec.length_min, pkt.length);
  }
  rec.length_total += pkt.length;
  const int bits[6] = {kFlagFin, kFlagSyn, kFlagAck, kFlagPsh, kFlagRst, kFlagEce};
  for (int i = 0; i < 6; ++i)
    if (pkt.tcp_flags & bits[i]) ++rec.flag_counts[i];
  rec.last_ts = pkt.ts_us;
  rec.iat_total += iat;
  rec.pkt_lengths.push_back(pkt.length);
  rec.pkt_iats.push_back(iat);
  ++rec.packet_count;

  if (rec.packet_count == cfg_.n_packets) result.kind = IngestResult::kInferenceTriggered;
  return result;
}

// ---------------------------------------------------------------------------
// Features

std::vector<double> raw_flow_features(const FlowRecord& rec, const FlowConfig& cfg) {
  if (rec.packet_count != cfg.n_packets)
    fail(ErrorKind::kInvalidArgument, "flow has not collected n packets");
  std::vector<double> raw;
  raw.reserve(feature_width(cfg));
  for (int i = 0; i < cfg.n_packets; ++i) raw.push_back(static_cast<double>(rec.pkt_lengths[i]));
  for (int i = 0; i < cfg.n_packets; ++i) raw.push_back(static_cast<double>(rec.pkt_iats[i]));
  if (cfg.profile == "extended") {
    raw.push_back(static_cast<double>(rec.length_max));
    raw.push_back(static_cast<double>(rec.length_min));
    raw.push_back(static_cast<double>(rec.length_total));
    for (int64_t c : rec.flag_counts) raw.push_back(static_cast<double>(c));
  }
  return raw;
}

std::vector<double> normalize_features(const std::vector<double>& raw, const FeatureNorm& norm) {
  if (norm.bounds.size() != raw.size())
    fail(ErrorKind::kCalibration, "normalization bounds missing or of the wrong width");
  std::vector<double> out(raw.size());
  for (size_t i = 0; i < raw.size(); ++i) {
    const ValueRange& b = norm.bounds[i];
    double v = b.hi > b.lo ? (raw[i] - b.lo) / (b.hi - b.lo) : 0.0;
    out[i] = std::clamp(v, 0.0, 1.0);
  }
  return out;
}

std::vector<int> featurize(const FlowRecord& rec, const FlowConfig& cfg, const FeatureNorm& norm,
                           const QuantParams& input_params) {
  std::vector<double> normalized = normalize_features(raw_flow_features(rec, cfg), norm);
  std::vector<int> q;
  q.reserve(normalized.size());
  for (double v : normalized) q.push_back(quantize(v, input_params));
  return q;
}

// ---------------------------------------------------------------------------
// Synthetic traces

std::vector<ClassProfile> default_profiles(int num_classes) {
  // Length/IAT envelopes chosen so classes are learnable but margins stay
  // moderate; see the dataset notes in the README.
  static const ClassProfile kBank[] = {
      {80, 500, 200, 9000, 0.10, 0.90},
      {850, 1450, 3000, 42000, 0.55, 0.95},
      {380, 1000, 40, 1600, 0.30, 0.80},
      {80, 500, 24000, 110000, 0.05, 0.70},
      {1100, 1500, 150, 5000, 0.70, 0.99},
      {60, 220, 600, 30000, 0.20, 0.60},
  };
  if (num_classes < 2 || num_classes > 6)
    fail(ErrorKind::kInvalidArgument, "default profiles cover 2..6 classes");
  return {kBank, kBank + num_classes};
}

std::vector<ClassProfile> overlapped_profiles(int num_classes) {
  // Envelopes overlap heavily and shared bursts, tiny control packets and
  // long idle gaps stretch the observed ranges, so no single feature
  // separates the classes and the aggregate signal occupies a small part of
  // each feature's range.
  auto with_tails = [](ClassProfile p) {
    p.p_len_burst = 0.12;
    p.p_len_low = 0.10;
    p.p_iat_gap = 0.10;
    return p;
  };
  static const ClassProfile kBank[] = {
      {260, 560, 700, 7600, 0.20, 0.90},
      {400, 700, 2600, 12000, 0.45, 0.90},
      {330, 630, 1500, 9500, 0.30, 0.90},
      {370, 670, 1100, 8800, 0.60, 0.90},
  };
  if (num_classes < 2 || num_classes > 4)
    fail(ErrorKind::kInvalidArgument, "overlapped profiles cover 2..4 classes");
  std::vector<ClassProfile> out;
  for (int c = 0; c < num_classes; ++c) out.push_back(with_tails(kBank[c]));
  return out;
}

namespace {

PacketRecord make_packet(Rng& rng, const ClassProfile& p, const FlowKey& key, int64_t ts) {
  PacketRecord pkt;
  pkt.ts_us = ts;
  pkt.key = key;
  double roll = rng.next_double();
  if (roll < p.p_len_burst) {
    pkt.length = static_cast<int>(rng.next_uniform(p.burst_len_lo, p.burst_len_hi));
  } else if (roll < p.p_len_burst + p.p_len_low) {
    pkt.length = static_cast<int>(rng.next_uniform(p.low_len_lo, p.low_len_hi));
  } else {
    pkt.length = static_cast<int>(rng.next_uniform(p.len_lo, p.len_hi));
  }
  pkt.tcp_flags = 0;
  if (rng.next_double() < p.p_ack) pkt.tcp_flags |= kFlagAck;
  if (rng.next_double() < p.p_psh) pkt.tcp_flags |= kFlagPsh;
  return pkt;
}

int64_t next_gap(Rng& rng, const ClassProfile& p) {
  bool idle = rng.next_double() < p.p_iat_gap;
  return static_cast<int64_t>(idle ? rng.next_uniform(p.gap_lo_us, p.gap_hi_us)
                                   : rng.next_uniform(p.iat_lo_us, p.iat_hi_us));
}

}  // namespace

SyntheticData generate_synthetic(const TraceGenConfig& cfg) {
  std::vector<ClassProfile> profiles =
      cfg.profiles.empty() ? default_profiles(2) : cfg.profiles;
  if (profiles.size() < 2) fail(ErrorKind::kInvalidArgument, "need at least two class profiles");
  if (cfg.min_packets < cfg.flow.n_packets)
    fail(ErrorKind::kInvalidArgument, "flows must carry at least n packets");

  Rng rng(cfg.seed);
  SyntheticData out;
  std::vector<PacketRecord> all_train, all_test;
  int test_start = cfg.flows_per_class -
                   static_cast<int>(std::ceil(cfg.flows_per_class * cfg.test_fraction));

  for (size_t cls = 0; cls < profiles.size(); ++cls) {
    for (int f = 0; f < cfg.flows_per_class; ++f) {
      FlowKey key;
      key.src_ip = (10u << 24) | (static_cast<uint32_t>(cls) << 16) | ((f >> 8) << 8) | (f & 0xff);
      key.dst_ip = (192u << 24) | (168u << 16) | (static_cast<uint32_t>(cls) << 8) | 1;
      key.src_port = static_cast<uint16_t>(1024 + (f % 60000));
      key.dst_port = static_cast<uint16_t>(cls < 1 ? 443 : 80 + cls);
      key.proto = 6;
      int packets = rng.next_int(cfg.min_packets, cfg.max_packets);
      int64_t ts = static_cast<int64_t>(rng.next_below(1'000'000));
      bool is_test = f >= test_start;
      auto& sink = is_test ? all_test : all_train;
      auto& labels = is_test ? out.test_labels : out.train_labels;
      labels[key] = static_cast<int>(cls);
      for (int i = 0; i < packets; ++i) {
        sink.push_back(make_packet(rng, profiles[cls], key, ts));
        ts += next_gap(rng, profiles[cls]);
      }
    }
  }
  std::stable_sort(all_train.begin(), all_train.end(),
                   [](const PacketRecord& a, const PacketRecord& b) { return a.ts_us < b.ts_us; });
  std::stable_sort(all_test.begin(), all_test.end(),
                   [](const PacketRecord& a, const PacketRecord& b) { return a.ts_us < b.ts_us; });
  out.train_packets = std::move(all_train);
  out.test_packets = std::move(all_test);

  out.norm.n_packets = cfg.flow.n_packets;
  out.norm.profile = cfg.flow.profile;
  out.train_set = build_dataset(out.train_packets, out.train_labels, cfg.flow, nullptr, &out.norm);
  out.test_set = build_dataset(out.test_packets, out.test_labels, cfg.flow, &out.norm, nullptr);
  return out;
}

Dataset build_dataset(const std::vector<PacketRecord>& packets,
                      const std::map<FlowKey, int>& labels, const FlowConfig& cfg,
                      const FeatureNorm* use_norm, FeatureNorm* out_norm) {
  FlowTable table(cfg);
  std::vector<std::pair<FlowKey, std::vector<double>>> raw_rows;
  for (const PacketRecord& pkt : packets) {
    IngestResult r = table.ingest(pkt);
    if (r.kind == IngestResult::kInferenceTriggered) {
      FlowRecord* rec = table.find(r.key);
      raw_rows.emplace_back(r.key, raw_flow_features(*rec, cfg));
    }
  }

  FeatureNorm norm;
  if (use_norm != nullptr) {
    norm = *use_norm;
  } else {
    norm.n_packets = cfg.n_packets;
    norm.profile = cfg.profile;
    norm.bounds.assign(feature_width(cfg), ValueRange{0.0, 0.0});
    bool first = true;
    for (const auto& [key, raw] : raw_rows) {
      for (size_t i = 0; i < raw.size(); ++i) {
        if (first) norm.bounds[i] = {raw[i], raw[i]};
        norm.bounds[i].lo = std::min(norm.bounds[i].lo, raw[i]);
        norm.bounds[i].hi = std::max(norm.bounds[i].hi, raw[i]);
      }
      first = false;
    }
    if (out_norm != nullptr) *out_norm = norm;
  }

  Dataset data;
  for (const auto& [key, raw] : raw_rows) {
    auto it = labels.find(key);
    if (it == labels.end()) continue;
    data.features.push_back(normalize_features(raw, norm));
    data.labels.push_back(it->second);
    data.num_classes = std::max(data.num_classes, it->second + 1);
  }
  return data;
}

// ---------------------------------------------------------------------------
// Classification

Metrics compute_metrics(const std::vector<FlowOutcome>& flows, int num_classes) {
  Metrics m;
  m.confusion.assign(num_classes, std::vector<int64_t>(num_classes, 0));
  int64_t correct = 0;
  for (const FlowOutcome& f : flows) {
    if (f.label < 0) continue;
    if (f.predicted < 0) {
      ++m.unclassified;
      continue;
    }
    ++m.evaluated;
    if (f.label < num_classes && f.predicted < num_classes) ++m.confusion[f.label][f.predicted];
    if (f.label == f.predicted) ++correct;
  }
  m.accuracy = m.evaluated > 0 ? static_cast<double>(correct) / m.evaluated : 0.0;
  m.precision.assign(num_classes, 0.0);
  m.recall.assign(num_classes, 0.0);
  m.f1.assign(num_classes, 0.0);
  for (int c = 0; c < num_classes; ++c) {
    int64_t tp = m.confusion[c][c], fp = 0, fn = 0;
    for (int o = 0; o < num_classes; ++o) {
      if (o != c) {
        fp += m.confusion[o][c];
        fn += m.confusion[c][o];
      }
    }
    m.precision[c] = tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
    m.recall[c] = tp + fn > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
    m.f1[c] = m.precision[c] + m.recall[c] > 0
                  ? 2.0 * m.precision[c] * m.recall[c] / (m.precision[c] + m.recall[c])
                  : 0.0;
    m.macro_f1 += m.f1[c] / num_classes;
  }
  return m;
}

ClassifyResult classify_trace(const std::vector<PacketRecord>& packets,
                              const PipelineProgram& prog, const QuantizedModel& qm,
                              const FlowConfig& cfg_in, const std::map<FlowKey, int>* labels) {
  FlowConfig cfg = cfg_in;
  if (!qm.feature_norm.empty()) {
    cfg.n_packets = qm.feature_norm.n_packets;
    cfg.profile = qm.feature_norm.profile;
  } else {
    fail(ErrorKind::kCalibration, "quantized model carries no feature normalization bounds");
  }

  ClassifyResult result;
  FlowTable table(cfg);
  std::map<FlowKey, size_t> row_of;
  SimOptions sim_opts;
  sim_opts.trace = TraceMode::kOff;

  for (const PacketRecord& pkt : packets) {
    if (row_of.find(pkt.key) == row_of.end()) {
      row_of[pkt.key] = result.flows.size();
      FlowOutcome row;
      row.key = pkt.key;
      if (labels != nullptr) {
        auto it = labels->find(pkt.key);
        if (it != labels->end()) row.label = it->second;
      }
      result.flows.push_back(row);
    }
    IngestResult r = table.ingest(pkt);
    if (r.kind != IngestResult::kInferenceTriggered) continue;

    FlowRecord* rec = table.find(r.key);
    std::vector<int> q_x = featurize(*rec, cfg, qm.feature_norm, qm.input_params);
    InferenceResult sim = run_inference(prog, q_x, sim_opts);
    QuantForwardResult oracle = quantized_forward(qm, q_x);
    if (sim.cls != oracle.cls || sim.logits != oracle.logits ||
        sim.activations != oracle.activations)
      result.oracle_match = false;
    table.set_prediction(r.key, sim.cls);
    ++result.inferences;
    FlowOutcome& row = result.flows[row_of[pkt.key]];
    row.predicted = sim.cls;
    row.passes_used = sim.passes_used;
  }

  int num_classes = static_cast<int>(prog.output_slots.size());
  result.metrics = compute_metrics(result.flows, num_classes);
  return result;
}

// ---------------------------------------------------------------------------
// CSV and JSON files

std::string format_ip(uint32_t ip) {
  std::ostringstream os;
  os << ((ip >> 24) & 0xff) << '.' << ((ip >> 16) & 0xff) << '.' << ((ip >> 8) & 0xff) << '.'
     << (ip & 0xff);
  return os.str();
}

uint32_t parse_ip(const std::string& s) {
  uint32_t parts[4] = {0, 0, 0, 0};
  int idx = 0;
  uint32_t cur = 0;
  bool any = false;
  for (char c : s) {
    if (c == '.') {
      if (!any || idx >= 3) fail(ErrorKind::kParse, "bad IPv4 address '" + s + "'");
      parts[idx++] = cur;
      cur = 0;
      any = false;
    } else if (c >= '0' && c <= '9') {
      cur = cur * 10 + static_cast<uint32_t>(c - '0');
      if (cur > 255) fail(ErrorKind::kParse, "bad IPv4 address '" + s + "'");
      any = true;
    } else {
      fail(ErrorKind::kParse, "bad IPv4 address '" + s + "'");
    }
  }
  if (!any || idx != 3) fail(ErrorKind::kParse, "bad IPv4 address '" + s + "'");
  parts[3] = cur;
  return (parts[0] << 24) | (parts[1] << 16) | (parts[2] << 8) | parts[3];
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  return cells;
}

int64_t parse_int(const std::string& s, const std::string& where) {
  try {
    size_t pos = 0;
    int64_t v = std::stoll(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    fail(ErrorKind::kParse, where + ": bad integer '" + s + "'");
  }
}

}  // namespace

void save_trace(const std::vector<PacketRecord>& packets, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path);
  out << "ts_us,src_ip,dst_ip,src_port,dst_port,proto,pkt_len,tcp_flags\n";
  for (const PacketRecord& p : packets) {
    out << p.ts_us << ',' << format_ip(p.key.src_ip) << ',' << format_ip(p.key.dst_ip) << ','
        << p.key.src_port << ',' << p.key.dst_port << ',' << static_cast<int>(p.key.proto) << ','
        << p.length << ',' << p.tcp_flags << '\n';
  }
}

std::vector<PacketRecord> load_trace(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot read " + path);
  std::vector<PacketRecord> packets;
  std::string line;
  size_t line_no = 0;
  int64_t prev_ts = INT64_MIN;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line_no == 1 && line.rfind("ts_us", 0) == 0) continue;  // header
    std::string where = path + ":" + std::to_string(line_no);
    auto cells = split_csv(line);
    if (cells.size() != 8) fail(ErrorKind::kParse, where + ": expected 8 columns");
    PacketRecord p;
    p.ts_us = parse_int(cells[0], where);
    p.key.src_ip = parse_ip(cells[1]);
    p.key.dst_ip = parse_ip(cells[2]);
    p.key.src_port = static_cast<uint16_t>(parse_int(cells[3], where));
    p.key.dst_port = static_cast<uint16_t>(parse_int(cells[4], where));
    p.key.proto = static_cast<uint8_t>(parse_int(cells[5], where));
    p.length = static_cast<int>(parse_int(cells[6], where));
    p.tcp_flags = static_cast<int>(parse_int(cells[7], where));
    if (p.ts_us < prev_ts)
      fail(ErrorKind::kParse, where + ": timestamps must be non-decreasing");
    prev_ts = p.ts_us;
    packets.push_back(p);
  }
  return packets;
}

void save_labels(const std::map<FlowKey, int>& labels, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path);
  out << "src_ip,dst_ip,src_port,dst_port,proto,label\n";
  for (const auto& [key, label] : labels) {
    out << format_ip(key.src_ip) << ',' << format_ip(key.dst_ip) << ',' << key.src_port << ','
        << key.dst_port << ',' << static_cast<int>(key.proto) << ',' << label << '\n';
  }
}

std::map<FlowKey, int> load_labels(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot read " + path);
  std::map<FlowKey, int> labels;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line_no == 1 && line.rfind("src_ip", 0) == 0) continue;
    std::string where = path + ":" + std::to_string(line_no);
    auto cells = split_csv(line);
    if (cells.size() != 6) fail(ErrorKind::kParse, where + ": expected 6 columns");
    FlowKey key;
    key.src_ip = parse_ip(cells[0]);
    key.dst_ip = parse_ip(cells[1]);
    key.src_port = static_cast<uint16_t>(parse_int(cells[2], where));
    key.dst_port = static_cast<uint16_t>(parse_int(cells[3], where));
    key.proto = static_cast<uint8_t>(parse_int(cells[4], where));
    labels[key] = static_cast<int>(parse_int(cells[5], where));
  }
  return labels;
}

void save_results(const std::vector<FlowOutcome>& flows, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path);
  out << "src_ip,dst_ip,src_port,dst_port,proto,predicted_class,passes_used\n";
  for (const FlowOutcome& f : flows) {
    out << format_ip(f.key.src_ip) << ',' << format_ip(f.key.dst_ip) << ',' << f.key.src_port
        << ',' << f.key.dst_port << ',' << static_cast<int>(f.key.proto) << ',' << f.predicted
        << ',' << f.passes_used << '\n';
  }
}

void save_feature_norm(const FeatureNorm& norm, const std::string& path) {
  nlohmann::json j;
  j["n_packets"] = norm.n_packets;
  j["profile"] = norm.profile;
  j["bounds"] = nlohmann::json::array();
  for (const auto& b : norm.bounds) j["bounds"].push_back(nlohmann::json::array({b.lo, b.hi}));
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path);
  out << j.dump(2) << "\n";
}

FeatureNorm load_feature_norm(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot read " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    fail(ErrorKind::kParse, std::string("feature norm JSON: ") + e.what());
  }
  FeatureNorm norm;
  norm.n_packets = j.at("n_packets").get<int>();
  norm.profile = j.at("profile").get<std::string>();
  for (const auto& b : j.at("bounds"))
    norm.bounds.push_back(ValueRange{b[0].get<double>(), b[1].get<double>()});
  return norm;
}

}  // namespace quark
