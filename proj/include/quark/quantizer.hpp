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

#ifndef QUARK_QUANTIZER_HPP_
#define QUARK_QUANTIZER_HPP_

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "quark/model.hpp"

namespace quark {

// Rounding rule, fixed project-wide: round half away from zero. The
// integer-only inference path and the pipeline tables must agree on it, so
// every Round in this codebase goes through these two helpers.
double round_half_away(double x);
int64_t round_shift_half_away(int64_t value, int shift);  // value / 2^shift, rounded

struct QuantParams {
  double scale = 1.0;
  int zero_point = 0;
  int bits = 8;
  bool is_signed = true;
  int qmin = -128;
  int qmax = 127;
};

// (qmin, qmax) for a bit-width. bits must be in [2, 16].
std::pair<int, int> compute_qrange(int bits, bool is_signed);

// scale = (r_hi - r_lo) / (qmax - qmin). Degenerate range (r_hi == r_lo)
// falls back to scale 1 / zero-point 0 so constant tensors survive
// calibration.
double compute_scale(double r_lo, double r_hi, int qmin, int qmax);

// zero_point = Round(qmax - r_hi / scale), clamped into [qmin, qmax].
int compute_zero_point(double r_hi, double scale, int qmin, int qmax);

// Full parameter derivation from a recorded float range.
QuantParams make_quant_params(double r_lo, double r_hi, int bits, bool is_signed);

int quantize(double r, const QuantParams& p);
double dequantize(int q, const QuantParams& p);

// Per-layer rescaler: multiplier = scale_w * scale_x / scale_a, approximated
// as mantissa * 2^-shift with a 15-bit mantissa so the relative error stays
// within 2^-15.
struct Requantizer {
  double multiplier = 1.0;
  int32_t mantissa = 1 << 14;  // in [2^14, 2^15) except for tiny multipliers
  int shift = 14;
  int zero_point = 0;  // of the output tensor
};

// mantissa = Round(multiplier * 2^shift) with the largest shift <= 31 that
// keeps the mantissa below 2^15.
std::pair<int32_t, int> approx_multiplier(double multiplier);

Requantizer make_requantizer(double scale_w, double scale_x, double scale_a,
                             int zero_point_a);

// acc * mantissa * 2^-shift (rounded half away from zero on the magnitude)
// plus the output zero-point, clamped. The simulator's quantization tables
// and its shift-sequence fallback must match this bit for bit.
int requantize(int32_t acc, const Requantizer& rq, int qmin, int qmax);

enum class LayerKind { kConv, kFc };

struct QuantizedLayer {
  LayerKind kind = LayerKind::kConv;
  std::vector<std::vector<int>> weights;  // [out][in], values in w_params range
  std::vector<int32_t> biases;            // scale_w * scale_x, zero-point 0
  QuantParams w_params;
  QuantParams a_params;  // output tensor of this layer
  Requantizer requant;
  bool apply_relu = true;
};

struct QuantizedModel {
  ModelShape shape;
  int bits = 8;
  QuantParams input_params;
  std::vector<QuantizedLayer> layers;  // conv layers first, then fc
  FeatureNorm feature_norm;

  const QuantParams& layer_input_params(int layer) const {
    return layer == 0 ? input_params : layers[layer - 1].a_params;
  }
};

// Quantizes a calibrated model: per-tensor signed parameters from the
// recorded ranges (extended to include zero), weights via the clamp/round
// rule, 32-bit biases, and one requantizer per layer.
QuantizedModel quantize_model(const CnnModel& model, int bits);

struct QuantForwardResult {
  int cls = 0;
  // Post-pool (conv) / post-activation (fc) integers per layer, channel-major.
  std::vector<std::vector<int>> activations;
  std::vector<int> logits;
};

// Integer-only reference inference: 32-bit checked accumulation of offset
// products, bias add, requantize, ReLU as max(q, zero_point), integer
// maxpool. This is the oracle the pipeline simulator is tested against.
QuantForwardResult quantized_forward(const QuantizedModel& qm, const std::vector<int>& q_x);

// Quantizes a float input tensor (channel-major) with the model input params.
std::vector<int> quantize_input(const QuantizedModel& qm, const std::vector<double>& x);

void save_quantized_model(const QuantizedModel& qm, const std::string& path);
QuantizedModel load_quantized_model(const std::string& path);
std::string quantized_model_to_json(const QuantizedModel& qm);
QuantizedModel quantized_model_from_json(const std::string& text);

}  // namespace quark

#endif  // QUARK_QUANTIZER_HPP_
