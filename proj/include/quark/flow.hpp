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

#ifndef QUARK_FLOW_HPP_
#define QUARK_FLOW_HPP_

#include <cstdint>
#include <list>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "quark/sim.hpp"
#include "quark/trainer.hpp"

namespace quark {

// TCP flag bits as carried in the trace files.
constexpr int kFlagFin = 1;
constexpr int kFlagSyn = 2;
constexpr int kFlagRst = 4;
constexpr int kFlagPsh = 8;
constexpr int kFlagAck = 16;
constexpr int kFlagEce = 64;

struct FlowKey {
  uint32_t src_ip = 0;
  uint32_t dst_ip = 0;
  uint16_t src_port = 0;
  uint16_t dst_port = 0;
  uint8_t proto = 0;

  auto tie() const { return std::tie(src_ip, dst_ip, src_port, dst_port, proto); }
  bool operator==(const FlowKey& o) const { return tie() == o.tie(); }
  bool operator<(const FlowKey& o) const { return tie() < o.tie(); }
};

struct FlowKeyHash {
  size_t operator()(const FlowKey& k) const {
    uint64_t h = 1469598103934665603ull;
    auto mix = [&h](uint64_t v) {
      h ^= v;
      h *= 1099511628211ull;
    };
    mix(k.src_ip);
    mix(k.dst_ip);
    mix(k.src_port);
    mix(k.dst_port);
    mix(k.proto);
    return static_cast<size_t>(h);
  }
};

struct PacketRecord {
  int64_t ts_us = 0;
  FlowKey key;
  int length = 0;
  int tcp_flags = 0;
};

enum class FlowState { kCollecting, kPredicted };

struct FlowRecord {
  int64_t length_max = 0;
  int64_t length_min = 0;
  int64_t length_total = 0;
  // Cumulative flag counts in Table order: FIN, SYN, ACK, PSH, RST, ECE.
  int64_t flag_counts[6] = {0, 0, 0, 0, 0, 0};
  int64_t last_ts = 0;
  int64_t iat_total = 0;
  int packet_count = 0;
  FlowState state = FlowState::kCollecting;
  int predicted_class = -1;
  std::vector<int64_t> pkt_lengths;  // first n packets
  std::vector<int64_t> pkt_iats;
};

struct FlowConfig {
  int n_packets = 8;
  int64_t iat_limit_us = 60'000'000;
  size_t capacity = 65536;
  std::string profile = "per_packet";  // or "extended"
};

// Feature slots per flow for a profile: 2n per-packet slots, plus
// length_max/min/total and the six flag counts for "extended".
int feature_width(const FlowConfig& cfg);

struct IngestResult {
  enum Kind { kForwarded, kPredicted, kInferenceTriggered } kind = kForwarded;
  int predicted_class = -1;
  FlowKey key;
};

// Per-flow state keyed by the exact 5-tuple, bounded by capacity with LRU
// eviction.
class FlowTable {
 public:
  explicit FlowTable(const FlowConfig& cfg) : cfg_(cfg) {}

  // FIN or an inter-arrival gap beyond the limit reinitializes the flow's
  // record; a cached prediction short-circuits; the n-th packet of a
  // collecting flow triggers inference.
  IngestResult ingest(const PacketRecord& pkt);

  FlowRecord* find(const FlowKey& key);
  void set_prediction(const FlowKey& key, int cls);
  size_t size() const { return lru_.size(); }
  const FlowConfig& config() const { return cfg_; }

 private:
  FlowRecord& touch(const FlowKey& key);

  FlowConfig cfg_;
  std::list<std::pair<FlowKey, FlowRecord>> lru_;  // front = most recent
  std::unordered_map<FlowKey, std::list<std::pair<FlowKey, FlowRecord>>::iterator, FlowKeyHash>
      index_;
};

// Raw (unnormalized) feature vector of a fully collected flow.
std::vector<double> raw_flow_features(const FlowRecord& rec, const FlowConfig& cfg);

// Min-max normalization against training-set bounds, clipped to [0, 1].
std::vector<double> normalize_features(const std::vector<double>& raw, const FeatureNorm& norm);

// Raw features -> normalized -> quantized with the model input parameters.
std::vector<int> featurize(const FlowRecord& rec, const FlowConfig& cfg,
                           const FeatureNorm& norm, const QuantParams& input_params);

// ---------------------------------------------------------------------------
// Synthetic traces

struct ClassProfile {
  double len_lo = 64;
  double len_hi = 512;
  double iat_lo_us = 100;
  double iat_hi_us = 10000;
  double p_psh = 0.1;
  double p_ack = 0.9;
  // Heavy-tail components: occasional full-size bursts, tiny control
  // packets and long idle gaps. Shared across classes they carry no label
  // signal but stretch the recorded feature and activation ranges, as real
  // traffic does.
  double p_len_burst = 0.0;
  double burst_len_lo = 1400;
  double burst_len_hi = 1500;
  double p_len_low = 0.0;
  double low_len_lo = 80;
  double low_len_hi = 150;
  double p_iat_gap = 0.0;
  double gap_lo_us = 300000;
  double gap_hi_us = 1200000;
};

std::vector<ClassProfile> default_profiles(int num_classes);

// Heavily overlapping envelopes: no single feature separates the classes, so
// classification hinges on aggregating many weak per-packet signals. Useful
// for studying precision loss under coarse quantization.
std::vector<ClassProfile> overlapped_profiles(int num_classes);

struct TraceGenConfig {
  uint64_t seed = 1;
  int flows_per_class = 100;
  int min_packets = 10;
  int max_packets = 14;
  double test_fraction = 0.25;
  std::vector<ClassProfile> profiles;  // empty: default_profiles
  FlowConfig flow;
};

struct SyntheticData {
  std::vector<PacketRecord> train_packets;
  std::vector<PacketRecord> test_packets;
  std::map<FlowKey, int> train_labels;
  std::map<FlowKey, int> test_labels;
  Dataset train_set;  // normalized feature vectors
  Dataset test_set;
  FeatureNorm norm;   // bounds frozen from the training flows
};

// Deterministic per seed; class profiles drive packet length / IAT / flag
// distributions. Needs at least two profiles.
SyntheticData generate_synthetic(const TraceGenConfig& cfg);

// Replays packets through a FlowTable and assembles normalized feature
// vectors per flow. Bounds are taken from `norm` when given, otherwise
// computed from these flows and written to it.
Dataset build_dataset(const std::vector<PacketRecord>& packets,
                      const std::map<FlowKey, int>& labels, const FlowConfig& cfg,
                      const FeatureNorm* use_norm, FeatureNorm* out_norm);

// ---------------------------------------------------------------------------
// End-to-end classification

struct FlowOutcome {
  FlowKey key;
  int predicted = -1;
  int label = -1;
  int64_t passes_used = 0;
};

struct Metrics {
  double accuracy = 0.0;
  std::vector<double> precision, recall, f1;
  double macro_f1 = 0.0;
  std::vector<std::vector<int64_t>> confusion;  // [true][predicted]
  int64_t evaluated = 0;
  int64_t unclassified = 0;
};

Metrics compute_metrics(const std::vector<FlowOutcome>& flows, int num_classes);

struct ClassifyResult {
  std::vector<FlowOutcome> flows;  // first-seen order
  Metrics metrics;
  int64_t inferences = 0;
  bool oracle_match = true;  // simulator agreed with quantized_forward everywhere
};

// Drives ingest packet by packet; each trigger runs the pipeline simulator,
// cross-checks it against the integer reference, and caches the prediction.
ClassifyResult classify_trace(const std::vector<PacketRecord>& packets,
                              const PipelineProgram& prog, const QuantizedModel& qm,
                              const FlowConfig& cfg,
                              const std::map<FlowKey, int>* labels);

// ---------------------------------------------------------------------------
// CSV formats

void save_trace(const std::vector<PacketRecord>& packets, const std::string& path);
std::vector<PacketRecord> load_trace(const std::string& path);
void save_labels(const std::map<FlowKey, int>& labels, const std::string& path);
std::map<FlowKey, int> load_labels(const std::string& path);
void save_results(const std::vector<FlowOutcome>& flows, const std::string& path);

void save_feature_norm(const FeatureNorm& norm, const std::string& path);
FeatureNorm load_feature_norm(const std::string& path);

std::string format_ip(uint32_t ip);
uint32_t parse_ip(const std::string& s);

}  // namespace quark

#endif  // QUARK_FLOW_HPP_
