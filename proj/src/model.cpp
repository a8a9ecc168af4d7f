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

#include "quark/model.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "quark/rng.hpp"

namespace quark {

namespace {

int ceil_div(int a, int b) { return (a + b - 1) / b; }

void check_finite(const std::vector<double>& v, const char* what) {
  for (double x : v) {
    if (!std::isfinite(x)) fail(ErrorKind::kNumeric, std::string(what) + ": non-finite value");
  }
}

}  // namespace

int ModelShape::conv_input_length(int n) const {
  int len = input_features;
  for (int i = 0; i < n; ++i) len = ceil_div(len, 2);
  return len;
}

int ModelShape::conv_output_length(int n) const { return ceil_div(conv_input_length(n), 2); }

int ModelShape::flattened_conv_width() const {
  if (conv.empty()) return input_channels * input_features;
  int n = static_cast<int>(conv.size()) - 1;
  return conv.back().out_channels * conv_output_length(n);
}

int ModelShape::boundary_size(int boundary) const {
  if (boundary == 0) return input_channels * input_features;
  int idx = boundary - 1;
  if (idx < static_cast<int>(conv.size()))
    return conv[idx].out_channels * conv_output_length(idx);
  return fc[idx - conv.size()].out_features;
}

void ModelShape::validate() const {
  if (input_features < 1 || input_channels < 1)
    fail(ErrorKind::kDimension, "input dimensions must be >= 1");
  if (conv.empty()) fail(ErrorKind::kDimension, "at least one convolutional layer required");
  int ch = input_channels;
  for (size_t n = 0; n < conv.size(); ++n) {
    if (conv[n].in_channels < 1 || conv[n].out_channels < 1)
      fail(ErrorKind::kDimension, "channel counts must be >= 1");
    if (conv[n].in_channels != ch)
      fail(ErrorKind::kDimension, "conv layer " + std::to_string(n) + " input channels do not chain");
    ch = conv[n].out_channels;
  }
  int width = flattened_conv_width();
  for (size_t m = 0; m < fc.size(); ++m) {
    if (fc[m].in_features < 1 || fc[m].out_features < 1)
      fail(ErrorKind::kDimension, "fc feature counts must be >= 1");
    if (fc[m].in_features != width)
      fail(ErrorKind::kDimension, "fc layer " + std::to_string(m) + " input width does not chain");
    width = fc[m].out_features;
  }
}

void CnnModel::validate() const {
  shape.validate();
  if (conv_w.size() != shape.conv.size() || conv_b.size() != shape.conv.size())
    fail(ErrorKind::kDimension, "conv parameter count does not match shape");
  for (size_t n = 0; n < conv_w.size(); ++n) {
    if (conv_w[n].size() != static_cast<size_t>(shape.conv[n].out_channels))
      fail(ErrorKind::kDimension, "conv weight rows do not match shape");
    for (const auto& row : conv_w[n]) {
      if (row.size() != static_cast<size_t>(shape.conv[n].in_channels))
        fail(ErrorKind::kDimension, "conv weight cols do not match shape");
      check_finite(row, "conv weights");
    }
    if (conv_b[n].size() != static_cast<size_t>(shape.conv[n].out_channels))
      fail(ErrorKind::kDimension, "conv bias size does not match shape");
    check_finite(conv_b[n], "conv biases");
  }
  if (fc_w.size() != shape.fc.size() || fc_b.size() != shape.fc.size())
    fail(ErrorKind::kDimension, "fc parameter count does not match shape");
  for (size_t m = 0; m < fc_w.size(); ++m) {
    if (fc_w[m].size() != static_cast<size_t>(shape.fc[m].out_features))
      fail(ErrorKind::kDimension, "fc weight rows do not match shape");
    for (const auto& row : fc_w[m]) {
      if (row.size() != static_cast<size_t>(shape.fc[m].in_features))
        fail(ErrorKind::kDimension, "fc weight cols do not match shape");
      check_finite(row, "fc weights");
    }
    if (fc_b[m].size() != static_cast<size_t>(shape.fc[m].out_features))
      fail(ErrorKind::kDimension, "fc bias size does not match shape");
    check_finite(fc_b[m], "fc biases");
  }
}

Tensor1D::Tensor1D(int c, int len) : channels(c), length(len) {
  if (c < 1 || len < 1) fail(ErrorKind::kDimension, "tensor dimensions must be positive");
  v.assign(static_cast<size_t>(c) * len, 0.0);
}

ForwardResult forward(const CnnModel& model, const Tensor1D& input) {
  const ModelShape& shape = model.shape;
  if (input.length != shape.input_features || input.channels != shape.input_channels)
    fail(ErrorKind::kDimension, "input tensor does not match model shape");

  ForwardResult result;
  Tensor1D cur = input;

  for (size_t n = 0; n < shape.conv.size(); ++n) {
    int c_out = shape.conv[n].out_channels;
    int c_in = shape.conv[n].in_channels;
    Tensor1D conv_out(c_out, cur.length);
    for (int co = 0; co < c_out; ++co) {
      for (int t = 0; t < cur.length; ++t) {
        double acc = 0.0;
        for (int ci = 0; ci < c_in; ++ci) acc += model.conv_w[n][co][ci] * cur.at(ci, t);
        acc += model.conv_b[n][co];
        conv_out.at(co, t) = acc > 0.0 ? acc : 0.0;  // ReLU
      }
    }
    // maxpool window 2 stride 2; odd tail passes through
    Tensor1D pooled(c_out, ceil_div(cur.length, 2));
    for (int co = 0; co < c_out; ++co) {
      for (int j = 0; j < pooled.length; ++j) {
        double a = conv_out.at(co, 2 * j);
        double b = (2 * j + 1 < conv_out.length) ? conv_out.at(co, 2 * j + 1) : a;
        pooled.at(co, j) = a > b ? a : b;
      }
    }
    result.boundaries.push_back(pooled);
    cur = std::move(pooled);
  }

  // Flatten channel-major into a 1 x width vector for the dense stack.
  Tensor1D flat(1, cur.size());
  flat.v = cur.v;
  cur = std::move(flat);

  for (size_t m = 0; m < shape.fc.size(); ++m) {
    bool last = (m + 1 == shape.fc.size());
    Tensor1D out(1, shape.fc[m].out_features);
    for (int to = 0; to < out.length; ++to) {
      double acc = 0.0;
      for (int ti = 0; ti < cur.length; ++ti) acc += model.fc_w[m][to][ti] * cur.v[ti];
      acc += model.fc_b[m][to];
      out.v[to] = (!last && acc < 0.0) ? 0.0 : acc;
    }
    result.boundaries.push_back(out);
    cur = std::move(out);
  }

  result.output = result.boundaries.back();
  return result;
}

int64_t count_flops(const ModelShape& shape) {
  int64_t flops = 0;
  for (size_t n = 0; n < shape.conv.size(); ++n) {
    int64_t len = shape.conv_input_length(static_cast<int>(n));
    flops += 2LL * shape.conv[n].in_channels * shape.conv[n].out_channels * len;
    flops += static_cast<int64_t>(shape.conv[n].out_channels) * len;  // bias adds
  }
  for (const auto& layer : shape.fc) {
    flops += 2LL * layer.in_features * layer.out_features;
    flops += layer.out_features;
  }
  return flops;
}

int64_t count_flops(const CnnModel& model) { return count_flops(model.shape); }

int argmax_class(const Tensor1D& output) {
  if (output.size() < 1) fail(ErrorKind::kDimension, "argmax of empty tensor");
  int best = 0;
  for (int i = 1; i < output.size(); ++i) {
    if (output.v[i] > output.v[best]) best = i;
  }
  return best;
}

CnnModel init_model(const ModelShape& shape, uint64_t seed) {
  shape.validate();
  Rng rng(seed);
  CnnModel model;
  model.shape = shape;
  // Small positive biases keep ReLU units alive on non-negative inputs.
  for (const auto& layer : shape.conv) {
    double stddev = std::sqrt(2.0 / layer.in_channels);
    std::vector<std::vector<double>> w(layer.out_channels,
                                       std::vector<double>(layer.in_channels));
    for (auto& row : w)
      for (auto& x : row) x = rng.next_normal(0.0, stddev);
    model.conv_w.push_back(std::move(w));
    model.conv_b.emplace_back(layer.out_channels, 0.01);
  }
  for (const auto& layer : shape.fc) {
    double stddev = std::sqrt(2.0 / layer.in_features);
    std::vector<std::vector<double>> w(layer.out_features,
                                       std::vector<double>(layer.in_features));
    for (auto& row : w)
      for (auto& x : row) x = rng.next_normal(0.0, stddev);
    model.fc_w.push_back(std::move(w));
    model.fc_b.emplace_back(layer.out_features, 0.01);
  }
  return model;
}

// ---------------------------------------------------------------------------
// JSON serialization

namespace {

using nlohmann::json;

json range_to_json(const ValueRange& r) { return json::array({r.lo, r.hi}); }

ValueRange range_from_json(const json& j) {
  if (!j.is_array() || j.size() != 2) fail(ErrorKind::kParse, "range must be [lo, hi]");
  return ValueRange{j[0].get<double>(), j[1].get<double>()};
}

}  // namespace

std::string model_to_json(const CnnModel& model) {
  json j;
  j["schema"] = "quark-model-v1";
  json shape;
  shape["input_features"] = model.shape.input_features;
  shape["input_channels"] = model.shape.input_channels;
  shape["conv"] = json::array();
  for (const auto& l : model.shape.conv)
    shape["conv"].push_back({{"in", l.in_channels}, {"out", l.out_channels}});
  shape["fc"] = json::array();
  for (const auto& l : model.shape.fc)
    shape["fc"].push_back({{"in", l.in_features}, {"out", l.out_features}});
  j["shape"] = shape;

  j["conv_layers"] = json::array();
  for (size_t n = 0; n < model.conv_w.size(); ++n)
    j["conv_layers"].push_back({{"weights", model.conv_w[n]}, {"biases", model.conv_b[n]}});
  j["fc_layers"] = json::array();
  for (size_t m = 0; m < model.fc_w.size(); ++m)
    j["fc_layers"].push_back({{"weights", model.fc_w[m]}, {"biases", model.fc_b[m]}});

  if (model.calibrated()) {
    json ranges;
    ranges["x"] = range_to_json(model.input_range);
    int layers = model.shape.num_layers();
    for (int i = 0; i < layers - 1; ++i)
      ranges["a" + std::to_string(i + 1)] = range_to_json(model.boundary_ranges[i]);
    ranges["y"] = range_to_json(model.boundary_ranges[layers - 1]);
    j["ranges"] = ranges;
  }

  if (!model.feature_norm.empty()) {
    json fn;
    fn["n_packets"] = model.feature_norm.n_packets;
    fn["profile"] = model.feature_norm.profile;
    fn["bounds"] = json::array();
    for (const auto& b : model.feature_norm.bounds) fn["bounds"].push_back(range_to_json(b));
    j["feature_norm"] = fn;
  }
  return j.dump(2) + "\n";
}

CnnModel model_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const std::exception& e) {
    fail(ErrorKind::kParse, std::string("model JSON: ") + e.what());
  }
  CnnModel model;
  const json& shape = j.at("shape");
  model.shape.input_features = shape.at("input_features").get<int>();
  model.shape.input_channels = shape.at("input_channels").get<int>();
  for (const auto& l : shape.at("conv"))
    model.shape.conv.push_back({l.at("in").get<int>(), l.at("out").get<int>()});
  for (const auto& l : shape.at("fc"))
    model.shape.fc.push_back({l.at("in").get<int>(), l.at("out").get<int>()});

  for (const auto& l : j.at("conv_layers")) {
    model.conv_w.push_back(l.at("weights").get<std::vector<std::vector<double>>>());
    model.conv_b.push_back(l.at("biases").get<std::vector<double>>());
  }
  for (const auto& l : j.at("fc_layers")) {
    model.fc_w.push_back(l.at("weights").get<std::vector<std::vector<double>>>());
    model.fc_b.push_back(l.at("biases").get<std::vector<double>>());
  }

  if (j.contains("ranges")) {
    const json& ranges = j.at("ranges");
    model.input_range = range_from_json(ranges.at("x"));
    int layers = model.shape.num_layers();
    for (int i = 0; i < layers - 1; ++i)
      model.boundary_ranges.push_back(range_from_json(ranges.at("a" + std::to_string(i + 1))));
    model.boundary_ranges.push_back(range_from_json(ranges.at("y")));
  }

  if (j.contains("feature_norm")) {
    const json& fn = j.at("feature_norm");
    model.feature_norm.n_packets = fn.at("n_packets").get<int>();
    model.feature_norm.profile = fn.at("profile").get<std::string>();
    for (const auto& b : fn.at("bounds")) model.feature_norm.bounds.push_back(range_from_json(b));
  }

  model.validate();
  return model;
}

void save_model(const CnnModel& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path);
  out << model_to_json(model);
}

CnnModel load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return model_from_json(ss.str());
}

}  // namespace quark
