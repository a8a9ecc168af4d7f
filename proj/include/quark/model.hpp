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

#ifndef QUARK_MODEL_HPP_
#define QUARK_MODEL_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include "quark/error.hpp"

namespace quark {

// 1D-CNN layout: a stack of pointwise (kernel-1) convolutional layers, each
// followed by ReLU and maxpool(window 2, stride 2, odd tail passes through),
// then dense layers with ReLU on all but the last. Spatial reduction comes
// only from pooling, so the feature length after conv layer n is
// ceil(T / 2^n).
struct ConvLayerShape {
  int in_channels = 1;
  int out_channels = 1;
};

struct FcLayerShape {
  int in_features = 1;
  int out_features = 1;
};

struct ModelShape {
  int input_features = 1;  // T, per input channel
  int input_channels = 1;
  std::vector<ConvLayerShape> conv;
  std::vector<FcLayerShape> fc;  // may be empty for conv-only pipelines

  int num_layers() const { return static_cast<int>(conv.size() + fc.size()); }

  // Feature length entering conv layer n (0-based).
  int conv_input_length(int n) const;
  // Feature length after conv layer n's pooling, i.e. ceil(T / 2^(n+1)).
  int conv_output_length(int n) const;
  // Flattened width of the tensor leaving the conv stack.
  int flattened_conv_width() const;
  // Element count of the tensor at layer boundary i (0 = input).
  int boundary_size(int boundary) const;

  void validate() const;
};

struct ValueRange {
  double lo = 0.0;
  double hi = 0.0;
};

// Input normalization metadata carried with a trained model so downstream
// feature extraction reproduces the training-time preprocessing.
struct FeatureNorm {
  int n_packets = 0;
  std::string profile;             // "per_packet" or "extended"
  std::vector<ValueRange> bounds;  // per feature slot, raw-value min/max

  bool empty() const { return bounds.empty(); }
};

struct CnnModel {
  ModelShape shape;
  // conv_w[n][c_out][c_in], one weight per channel pair (kernel size 1).
  std::vector<std::vector<std::vector<double>>> conv_w;
  std::vector<std::vector<double>> conv_b;  // conv_b[n][c_out]
  // fc_w[m][t_out][t_in]
  std::vector<std::vector<std::vector<double>>> fc_w;
  std::vector<std::vector<double>> fc_b;

  // Recorded activation ranges: input plus one range per layer boundary
  // (a1..a_{L-1}, y). Empty until a calibration pass has run.
  ValueRange input_range;
  std::vector<ValueRange> boundary_ranges;

  FeatureNorm feature_norm;

  bool calibrated() const {
    return boundary_ranges.size() == static_cast<size_t>(shape.num_layers());
  }
  void validate() const;
};

struct Tensor1D {
  int channels = 0;
  int length = 0;
  std::vector<double> v;  // channel-major: v[c * length + t]

  Tensor1D() = default;
  Tensor1D(int c, int len);

  double& at(int c, int t) { return v[static_cast<size_t>(c) * length + t]; }
  double at(int c, int t) const { return v[static_cast<size_t>(c) * length + t]; }
  int size() const { return channels * length; }
};

struct ForwardResult {
  Tensor1D output;
  // One tensor per layer boundary, in order; back() == output.
  std::vector<Tensor1D> boundaries;
};

// Float reference forward pass. Deterministic: fixed iteration order, no
// reassociation.
ForwardResult forward(const CnnModel& model, const Tensor1D& input);

// 2 FLOPs per multiply-accumulate plus one per bias add. Depends on shape
// only.
int64_t count_flops(const ModelShape& shape);
int64_t count_flops(const CnnModel& model);

// Index of the maximum element; ties resolve to the lowest index.
int argmax_class(const Tensor1D& output);

// Builds a model with Gaussian weights scaled by fan-in. No ranges recorded.
CnnModel init_model(const ModelShape& shape, uint64_t seed);

// JSON (de)serialization. Schema documented in the repository README.
void save_model(const CnnModel& model, const std::string& path);
CnnModel load_model(const std::string& path);
std::string model_to_json(const CnnModel& model);
CnnModel model_from_json(const std::string& text);

}  // namespace quark

#endif  // QUARK_MODEL_HPP_
