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

#ifndef QUARK_TRAINER_HPP_
#define QUARK_TRAINER_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include "quark/model.hpp"
#include "quark/quantizer.hpp"

namespace quark {

struct Dataset {
  std::vector<std::vector<double>> features;
  std::vector<int> labels;
  int num_classes = 0;

  size_t size() const { return features.size(); }
};

struct TrainConfig {
  double learning_rate = 0.05;
  int epochs = 30;       // 0 = calibration pass only
  int batch_size = 32;
  uint64_t seed = 1;
  bool qat_enabled = false;
  int qat_bits = 7;
  int qat_epochs = 10;   // fine-tune epochs when qat_enabled
};

// Running min/max of the layer-boundary tensors, accumulated over every
// forward pass of a training run.
struct RangeTracker {
  bool any = false;
  ValueRange input{0.0, 0.0};
  std::vector<ValueRange> boundaries;

  void update_input(double v);
  void update_boundary(size_t layer, double v);
};

// Mini-batch SGD on cross-entropy, single-threaded and deterministic for a
// given seed. Activation ranges are the running min/max observed across the
// training forward passes, widened by a final calibration pass over the
// dataset and extended to include zero. With qat_enabled the float phase is
// followed by a fake-quantized fine-tune using the straight-through
// estimator.
CnnModel train(const CnnModel& model, const Dataset& data, const TrainConfig& cfg);

// Runs forward passes over the dataset and records input/boundary ranges.
void calibrate_ranges(CnnModel& model, const Dataset& data);

double evaluate_accuracy(const CnnModel& model, const Dataset& data);

// Forward value through a fake-quantize node: scale * (Clamp(Round(r / scale
// + Z)) - Z). Idempotent; carries the quantization error of the target
// bit-width.
double fake_quantize(double r, const QuantParams& p);

// Saturated straight-through estimator: the gradient passes through where the
// forward value stayed in range and is zero where it clamped.
inline double ste_backward(double upstream_grad, bool clamped) {
  return clamped ? 0.0 : upstream_grad;
}

enum class QatMode {
  kOff,        // plain float forward
  kFull,       // fake-quantize (round + clamp) on weights and boundaries
  kClampOnly,  // clamp-only surrogate; the exact function the STE gradient
               // differentiates, used by the finite-difference checks
};

struct ModelGradients {
  std::vector<std::vector<std::vector<double>>> conv_w;
  std::vector<std::vector<double>> conv_b;
  std::vector<std::vector<std::vector<double>>> fc_w;
  std::vector<std::vector<double>> fc_b;
};

struct LossResult {
  double loss = 0.0;
  ModelGradients grads;
  // Hash of every discrete decision taken in the forward pass (ReLU signs,
  // pool winners, clamp flags). Finite-difference checks compare signatures
  // at r-h / r / r+h to skip points that sit on a kink.
  uint64_t decision_signature = 0;
};

// Per-layer weight fake-quantize parameters derived from the current weight
// tensors (ranges extended to include zero).
std::vector<QuantParams> qat_weight_params(const CnnModel& model, int bits);

// Mean cross-entropy over the batch plus analytic gradients. QAT modes
// require a calibrated model (boundary ranges drive the activation
// fake-quantize parameters). Weight fake-quantize parameters are derived
// from the current weights unless `fixed_weight_params` pins them, which the
// finite-difference checks rely on (perturbing a tensor extreme must not
// move the quantization grid mid-check).
LossResult loss_and_gradients(const CnnModel& model,
                              const std::vector<std::vector<double>>& features,
                              const std::vector<int>& labels, QatMode mode, int qat_bits,
                              const std::vector<QuantParams>* fixed_weight_params = nullptr,
                              RangeTracker* ranges = nullptr);

struct PruneReport {
  double rate = 0.0;
  std::vector<std::vector<int>> kept_conv;       // kept channel indices per conv layer
  std::vector<std::vector<int>> kept_fc_hidden;  // kept outputs per hidden fc layer
  int64_t flops_before = 0;
  int64_t flops_after = 0;
};

// Structured pruning of hidden widths: conv output channels and hidden fc
// outputs ranked by the L1 norm of their producing weight rows, lowest
// removed so that kept = max(1, round((1 - rate) * width)). Consumers'
// input slices are removed consistently; the final layer keeps its width.
std::pair<CnnModel, PruneReport> prune_channels(const CnnModel& model, double rate);

Dataset load_dataset(const std::string& path);
void save_dataset(const Dataset& data, const std::string& path);

}  // namespace quark

#endif  // QUARK_TRAINER_HPP_
