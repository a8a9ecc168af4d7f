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

#include "quark/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "json.hpp"

namespace quark {

double round_half_away(double x) { return std::round(x); }

int64_t round_shift_half_away(int64_t value, int shift) {
  if (shift <= 0) return value << -shift;
  int64_t mag = value < 0 ? -value : value;
  int64_t rounded = (mag + (int64_t{1} << (shift - 1))) >> shift;
  return value < 0 ? -rounded : rounded;
}

std::pair<int, int> compute_qrange(int bits, bool is_signed) {
  if (bits < 2 || bits > 16) fail(ErrorKind::kInvalidArgument, "bit-width must be in [2, 16]");
  if (is_signed) return {-(1 << (bits - 1)), (1 << (bits - 1)) - 1};
  return {0, (1 << bits) - 1};
}

double compute_scale(double r_lo, double r_hi, int qmin, int qmax) {
  if (r_hi < r_lo) fail(ErrorKind::kInvalidArgument, "range upper bound below lower bound");
  if (r_hi == r_lo) return 1.0;  // degenerate-range convention
  return (r_hi - r_lo) / (qmax - qmin);
}

int compute_zero_point(double r_hi, double scale, int qmin, int qmax) {
  if (scale <= 0.0) fail(ErrorKind::kInvalidArgument, "scale must be positive");
  double z = round_half_away(qmax - r_hi / scale);
  if (z < qmin) return qmin;
  if (z > qmax) return qmax;
  return static_cast<int>(z);
}

QuantParams make_quant_params(double r_lo, double r_hi, int bits, bool is_signed) {
  auto [qmin, qmax] = compute_qrange(bits, is_signed);
  QuantParams p;
  p.bits = bits;
  p.is_signed = is_signed;
  p.qmin = qmin;
  p.qmax = qmax;
  if (r_hi == r_lo) {
    p.scale = 1.0;
    p.zero_point = 0;
    return p;
  }
  p.scale = compute_scale(r_lo, r_hi, qmin, qmax);
  p.zero_point = compute_zero_point(r_hi, p.scale, qmin, qmax);
  return p;
}

int quantize(double r, const QuantParams& p) {
  double q = round_half_away(r / p.scale + p.zero_point);
  if (q < p.qmin) return p.qmin;
  if (q > p.qmax) return p.qmax;
  return static_cast<int>(q);
}

double dequantize(int q, const QuantParams& p) { return p.scale * (q - p.zero_point); }

std::pair<int32_t, int> approx_multiplier(double multiplier) {
  if (!(multiplier > 0.0)) fail(ErrorKind::kInvalidArgument, "requantization multiplier must be > 0");
  // Largest shift <= 31 whose rounded mantissa stays below 2^15. For normal
  // multipliers this lands the mantissa in [2^14, 2^15), bounding the
  // relative error by 2^-15.
  int shift = 31;
  for (int n = 0; n <= 31; ++n) {
    double m = round_half_away(multiplier * std::ldexp(1.0, n));
    if (m >= 32768.0) {
      shift = n - 1;
      break;
    }
  }
  if (shift < 0) fail(ErrorKind::kInvalidArgument, "multiplier too large to approximate");
  auto mantissa = static_cast<int32_t>(round_half_away(multiplier * std::ldexp(1.0, shift)));
  if (mantissa <= 0)
    fail(ErrorKind::kInvalidArgument, "multiplier too small to approximate");
  return {mantissa, shift};
}

Requantizer make_requantizer(double scale_w, double scale_x, double scale_a,
                             int zero_point_a) {
  Requantizer rq;
  rq.multiplier = scale_w * scale_x / scale_a;
  auto [mantissa, shift] = approx_multiplier(rq.multiplier);
  rq.mantissa = mantissa;
  rq.shift = shift;
  rq.zero_point = zero_point_a;
  // With shift < 31 the mantissa is normalized into [2^14, 2^15), which
  // bounds the relative error by 2^-15. Only degenerate layers (multiplier
  // below ~2^-17, from dead activations) hit the shift cap and take a
  // coarser mantissa; oracle and simulator still share it bit for bit.
  return rq;
}

int requantize(int32_t acc, const Requantizer& rq, int qmin, int qmax) {
  int64_t prod = static_cast<int64_t>(acc) * rq.mantissa;
  int64_t q = round_shift_half_away(prod, rq.shift) + rq.zero_point;
  if (q < qmin) return qmin;
  if (q > qmax) return qmax;
  return static_cast<int>(q);
}

namespace {

constexpr int32_t kAccMax = std::numeric_limits<int32_t>::max();
constexpr int32_t kAccMin = std::numeric_limits<int32_t>::min();

int32_t checked_acc_add(int32_t acc, int64_t term, const char* where) {
  int64_t next = static_cast<int64_t>(acc) + term;
  if (next > kAccMax || next < kAccMin)
    fail(ErrorKind::kOverflow, std::string("32-bit accumulator overflow in ") + where);
  return static_cast<int32_t>(next);
}

QuantParams weight_params(const std::vector<std::vector<double>>& w, int bits) {
  double lo = 0.0, hi = 0.0;  // ranges always include zero
  for (const auto& row : w)
    for (double x : row) {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
  return make_quant_params(lo, hi, bits, /*is_signed=*/true);
}

std::vector<std::vector<int>> quantize_weights(const std::vector<std::vector<double>>& w,
                                               const QuantParams& p) {
  std::vector<std::vector<int>> q(w.size());
  for (size_t i = 0; i < w.size(); ++i) {
    q[i].reserve(w[i].size());
    for (double x : w[i]) q[i].push_back(quantize(x, p));
  }
  return q;
}

std::vector<int32_t> quantize_biases(const std::vector<double>& b, double scale_b) {
  std::vector<int32_t> q;
  q.reserve(b.size());
  for (double x : b) {
    double v = round_half_away(x / scale_b);
    if (v > kAccMax || v < kAccMin)
      fail(ErrorKind::kOverflow, "bias does not fit a 32-bit integer after quantization");
    q.push_back(static_cast<int32_t>(v));
  }
  return q;
}

ValueRange include_zero(ValueRange r) {
  r.lo = std::min(r.lo, 0.0);
  r.hi = std::max(r.hi, 0.0);
  return r;
}

}  // namespace

QuantizedModel quantize_model(const CnnModel& model, int bits) {
  model.validate();
  if (!model.calibrated())
    fail(ErrorKind::kCalibration, "model has no recorded activation ranges; calibrate first");
  compute_qrange(bits, true);  // validates the bit-width

  QuantizedModel qm;
  qm.shape = model.shape;
  qm.bits = bits;
  qm.feature_norm = model.feature_norm;
  ValueRange in = include_zero(model.input_range);
  qm.input_params = make_quant_params(in.lo, in.hi, bits, true);

  int num_conv = static_cast<int>(model.shape.conv.size());
  int num_layers = model.shape.num_layers();
  for (int layer = 0; layer < num_layers; ++layer) {
    bool is_conv = layer < num_conv;
    QuantizedLayer ql;
    ql.kind = is_conv ? LayerKind::kConv : LayerKind::kFc;
    const auto& w = is_conv ? model.conv_w[layer] : model.fc_w[layer - num_conv];
    const auto& b = is_conv ? model.conv_b[layer] : model.fc_b[layer - num_conv];
    ql.w_params = weight_params(w, bits);
    ql.weights = quantize_weights(w, ql.w_params);

    ValueRange out = include_zero(model.boundary_ranges[layer]);
    ql.a_params = make_quant_params(out.lo, out.hi, bits, true);

    const QuantParams& xp = layer == 0 ? qm.input_params : qm.layers.back().a_params;
    double scale_b = ql.w_params.scale * xp.scale;
    ql.biases = quantize_biases(b, scale_b);
    ql.requant = make_requantizer(ql.w_params.scale, xp.scale, ql.a_params.scale,
                                  ql.a_params.zero_point);
    // conv layers always carry ReLU; the final fc layer emits raw logits
    ql.apply_relu = is_conv || (layer + 1 < num_layers);
    qm.layers.push_back(std::move(ql));
  }
  return qm;
}

std::vector<int> quantize_input(const QuantizedModel& qm, const std::vector<double>& x) {
  std::vector<int> q;
  q.reserve(x.size());
  for (double v : x) q.push_back(quantize(v, qm.input_params));
  return q;
}

QuantForwardResult quantized_forward(const QuantizedModel& qm, const std::vector<int>& q_x) {
  const ModelShape& shape = qm.shape;
  if (static_cast<int>(q_x.size()) != shape.input_channels * shape.input_features)
    fail(ErrorKind::kDimension, "quantized input size does not match model shape");
  for (int v : q_x) {
    if (v < qm.input_params.qmin || v > qm.input_params.qmax)
      fail(ErrorKind::kInvalidArgument, "quantized input outside the input parameter range");
  }

  QuantForwardResult result;
  std::vector<int> cur = q_x;  // channel-major
  int length = shape.input_features;
  int num_conv = static_cast<int>(shape.conv.size());

  for (int layer = 0; layer < shape.num_layers(); ++layer) {
    const QuantizedLayer& ql = qm.layers[layer];
    const QuantParams& xp = qm.layer_input_params(layer);
    const QuantParams& ap = ql.a_params;
    int zw = ql.w_params.zero_point;
    int zx = xp.zero_point;
    int za = ap.zero_point;

    if (ql.kind == LayerKind::kConv) {
      int c_out = shape.conv[layer].out_channels;
      int c_in = shape.conv[layer].in_channels;
      int pooled_len = (length + 1) / 2;
      std::vector<int> out(static_cast<size_t>(c_out) * pooled_len);
      for (int co = 0; co < c_out; ++co) {
        for (int j = 0; j < pooled_len; ++j) {
          int pooled = 0;
          for (int half = 0; half < 2; ++half) {
            int t = 2 * j + half;
            if (t >= length) break;
            int32_t acc = 0;
            for (int ci = 0; ci < c_in; ++ci) {
              int64_t term = static_cast<int64_t>(ql.weights[co][ci] - zw) *
                             (cur[static_cast<size_t>(ci) * length + t] - zx);
              acc = checked_acc_add(acc, term, "conv accumulation");
            }
            acc = checked_acc_add(acc, ql.biases[co], "conv bias add");
            int q = requantize(acc, ql.requant, ap.qmin, ap.qmax);
            q = std::max(q, za);  // ReLU: q == za maps to r == 0
            pooled = half == 0 ? q : std::max(pooled, q);
          }
          out[static_cast<size_t>(co) * pooled_len + j] = pooled;
        }
      }
      result.activations.push_back(out);
      cur = std::move(out);
      length = pooled_len;
    } else {
      int t_out = shape.fc[layer - num_conv].out_features;
      int t_in = shape.fc[layer - num_conv].in_features;
      if (static_cast<int>(cur.size()) != t_in)
        fail(ErrorKind::kDimension, "fc input width mismatch");
      std::vector<int> out(t_out);
      for (int to = 0; to < t_out; ++to) {
        int32_t acc = 0;
        for (int ti = 0; ti < t_in; ++ti) {
          int64_t term = static_cast<int64_t>(ql.weights[to][ti] - zw) * (cur[ti] - zx);
          acc = checked_acc_add(acc, term, "fc accumulation");
        }
        acc = checked_acc_add(acc, ql.biases[to], "fc bias add");
        int q = requantize(acc, ql.requant, ap.qmin, ap.qmax);
        if (ql.apply_relu) q = std::max(q, za);
        out[to] = q;
      }
      result.activations.push_back(out);
      cur = std::move(out);
      length = t_out;
    }
  }

  result.logits = cur;
  int best = 0;
  for (size_t i = 1; i < cur.size(); ++i)
    if (cur[i] > cur[best]) best = static_cast<int>(i);
  result.cls = best;
  return result;
}

// ---------------------------------------------------------------------------
// JSON serialization

namespace {

using nlohmann::json;

json params_to_json(const QuantParams& p) {
  return json{{"S", p.scale}, {"Z", p.zero_point}, {"b", p.bits}, {"signed", p.is_signed}};
}

QuantParams params_from_json(const json& j) {
  QuantParams p;
  p.scale = j.at("S").get<double>();
  p.zero_point = j.at("Z").get<int>();
  p.bits = j.at("b").get<int>();
  p.is_signed = j.at("signed").get<bool>();
  auto [qmin, qmax] = compute_qrange(p.bits, p.is_signed);
  p.qmin = qmin;
  p.qmax = qmax;
  if (p.zero_point < qmin || p.zero_point > qmax)
    fail(ErrorKind::kParse, "zero-point outside the quantized range");
  if (!(p.scale > 0.0)) fail(ErrorKind::kParse, "scale must be positive");
  return p;
}

}  // namespace

std::string quantized_model_to_json(const QuantizedModel& qm) {
  json j;
  j["schema"] = "quark-qmodel-v1";
  json shape;
  shape["input_features"] = qm.shape.input_features;
  shape["input_channels"] = qm.shape.input_channels;
  shape["conv"] = json::array();
  for (const auto& l : qm.shape.conv)
    shape["conv"].push_back({{"in", l.in_channels}, {"out", l.out_channels}});
  shape["fc"] = json::array();
  for (const auto& l : qm.shape.fc)
    shape["fc"].push_back({{"in", l.in_features}, {"out", l.out_features}});
  j["shape"] = shape;
  j["bits"] = qm.bits;
  j["input_params"] = params_to_json(qm.input_params);
  j["layers"] = json::array();
  for (const auto& l : qm.layers) {
    json layer;
    layer["kind"] = l.kind == LayerKind::kConv ? "conv" : "fc";
    layer["q_weights"] = l.weights;
    layer["q_biases"] = l.biases;
    layer["w_params"] = params_to_json(l.w_params);
    layer["a_params"] = params_to_json(l.a_params);
    layer["requant"] = json{{"M", l.requant.multiplier},
                            {"M0", l.requant.mantissa},
                            {"n", l.requant.shift}};
    layer["apply_relu"] = l.apply_relu;
    j["layers"].push_back(layer);
  }
  if (!qm.feature_norm.empty()) {
    json fn;
    fn["n_packets"] = qm.feature_norm.n_packets;
    fn["profile"] = qm.feature_norm.profile;
    fn["bounds"] = json::array();
    for (const auto& b : qm.feature_norm.bounds) fn["bounds"].push_back(json::array({b.lo, b.hi}));
    j["feature_norm"] = fn;
  }
  return j.dump(2) + "\n";
}

QuantizedModel quantized_model_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const std::exception& e) {
    fail(ErrorKind::kParse, std::string("quantized model JSON: ") + e.what());
  }
  QuantizedModel qm;
  const json& shape = j.at("shape");
  qm.shape.input_features = shape.at("input_features").get<int>();
  qm.shape.input_channels = shape.at("input_channels").get<int>();
  for (const auto& l : shape.at("conv"))
    qm.shape.conv.push_back({l.at("in").get<int>(), l.at("out").get<int>()});
  for (const auto& l : shape.at("fc"))
    qm.shape.fc.push_back({l.at("in").get<int>(), l.at("out").get<int>()});
  qm.shape.validate();
  qm.bits = j.at("bits").get<int>();
  qm.input_params = params_from_json(j.at("input_params"));
  for (const auto& l : j.at("layers")) {
    QuantizedLayer ql;
    ql.kind = l.at("kind").get<std::string>() == "conv" ? LayerKind::kConv : LayerKind::kFc;
    ql.weights = l.at("q_weights").get<std::vector<std::vector<int>>>();
    ql.biases = l.at("q_biases").get<std::vector<int32_t>>();
    ql.w_params = params_from_json(l.at("w_params"));
    ql.a_params = params_from_json(l.at("a_params"));
    ql.requant.multiplier = l.at("requant").at("M").get<double>();
    ql.requant.mantissa = l.at("requant").at("M0").get<int32_t>();
    ql.requant.shift = l.at("requant").at("n").get<int>();
    ql.requant.zero_point = ql.a_params.zero_point;
    ql.apply_relu = l.at("apply_relu").get<bool>();
    for (const auto& row : ql.weights)
      for (int w : row)
        if (w < ql.w_params.qmin || w > ql.w_params.qmax)
          fail(ErrorKind::kParse, "quantized weight outside its parameter range");
    qm.layers.push_back(std::move(ql));
  }
  if (j.contains("feature_norm")) {
    const json& fn = j.at("feature_norm");
    qm.feature_norm.n_packets = fn.at("n_packets").get<int>();
    qm.feature_norm.profile = fn.at("profile").get<std::string>();
    for (const auto& b : fn.at("bounds"))
      qm.feature_norm.bounds.push_back(ValueRange{b[0].get<double>(), b[1].get<double>()});
  }
  return qm;
}

void save_quantized_model(const QuantizedModel& qm, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path);
  out << quantized_model_to_json(qm);
}

QuantizedModel load_quantized_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return quantized_model_from_json(ss.str());
}

}  // namespace quark
