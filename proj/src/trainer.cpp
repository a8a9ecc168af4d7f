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

#include "quark/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "quark/rng.hpp"

namespace quark {

double fake_quantize(double r, const QuantParams& p) {
  return dequantize(quantize(r, p), p);
}

namespace {

int ceil_div(int a, int b) { return (a + b - 1) / b; }

void sig_mix(uint64_t& sig, uint64_t v) {
  sig ^= v + 0x9e3779b97f4a7c15ull + (sig << 6) + (sig >> 2);
}

QuantParams tensor_params(const std::vector<std::vector<double>>& w, int bits) {
  double lo = 0.0, hi = 0.0;
  for (const auto& row : w)
    for (double x : row) {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
  return make_quant_params(lo, hi, bits, true);
}

QuantParams range_params(ValueRange r, int bits) {
  r.lo = std::min(r.lo, 0.0);
  r.hi = std::max(r.hi, 0.0);
  return make_quant_params(r.lo, r.hi, bits, true);
}

// Fake-quantize node evaluation for one mode. Returns the forward value and
// sets clamped for the STE mask.
double fq_node(double r, const QuantParams& p, QatMode mode, bool& clamped) {
  double lo = p.scale * (p.qmin - p.zero_point);
  double hi = p.scale * (p.qmax - p.zero_point);
  if (mode == QatMode::kClampOnly) {
    clamped = r < lo || r > hi;
    return std::clamp(r, lo, hi);
  }
  double pre = round_half_away(r / p.scale + p.zero_point);
  clamped = pre < p.qmin || pre > p.qmax;
  return fake_quantize(r, p);
}

struct SampleCache {
  // Per layer: input vector, relu mask, pool winner index per pooled element,
  // boundary fq mask, boundary output.
  std::vector<std::vector<double>> inputs;
  std::vector<std::vector<char>> relu_mask;
  std::vector<std::vector<int>> pool_src;
  std::vector<std::vector<char>> fq_mask;
  std::vector<double> logits;
};

struct QatWeights {
  // Per layer: weights actually used in the forward pass plus the STE mask.
  std::vector<std::vector<std::vector<double>>> w;
  std::vector<std::vector<std::vector<char>>> mask;
  std::vector<QuantParams> params;
};

QatWeights prepare_weights(const CnnModel& model, QatMode mode, int bits, uint64_t& sig,
                           const std::vector<QuantParams>* fixed_params) {
  QatWeights qw;
  int num_conv = static_cast<int>(model.shape.conv.size());
  int layers = model.shape.num_layers();
  for (int layer = 0; layer < layers; ++layer) {
    const auto& w = layer < num_conv ? model.conv_w[layer] : model.fc_w[layer - num_conv];
    if (mode == QatMode::kOff) {
      qw.w.push_back(w);
      qw.mask.emplace_back();
      qw.params.emplace_back();
      continue;
    }
    QuantParams p = fixed_params != nullptr ? fixed_params->at(layer) : tensor_params(w, bits);
    std::vector<std::vector<double>> used(w.size());
    std::vector<std::vector<char>> mask(w.size());
    for (size_t i = 0; i < w.size(); ++i) {
      used[i].resize(w[i].size());
      mask[i].resize(w[i].size());
      for (size_t k = 0; k < w[i].size(); ++k) {
        bool clamped = false;
        used[i][k] = fq_node(w[i][k], p, mode, clamped);
        mask[i][k] = clamped ? 0 : 1;
        sig_mix(sig, clamped ? 1 : 0);
      }
    }
    qw.w.push_back(std::move(used));
    qw.mask.push_back(std::move(mask));
    qw.params.push_back(p);
  }
  return qw;
}

SampleCache forward_cached(const CnnModel& model, const QatWeights& qw,
                           const std::vector<double>& x, QatMode mode, int bits,
                           uint64_t& sig, RangeTracker* ranges) {
  const ModelShape& shape = model.shape;
  int num_conv = static_cast<int>(shape.conv.size());
  SampleCache cache;
  std::vector<double> cur = x;
  int length = shape.input_features;
  if (ranges != nullptr)
    for (double v : x) ranges->update_input(v);

  for (int layer = 0; layer < shape.num_layers(); ++layer) {
    cache.inputs.push_back(cur);
    bool is_conv = layer < num_conv;
    bool last = layer + 1 == shape.num_layers();
    const auto& w = qw.w[layer];
    const auto& b = is_conv ? model.conv_b[layer] : model.fc_b[layer - num_conv];

    std::vector<double> out;
    std::vector<char> relu_mask;
    std::vector<int> pool_src;
    if (is_conv) {
      int c_out = shape.conv[layer].out_channels;
      int c_in = shape.conv[layer].in_channels;
      std::vector<double> z(static_cast<size_t>(c_out) * length);
      relu_mask.resize(z.size());
      for (int co = 0; co < c_out; ++co) {
        for (int t = 0; t < length; ++t) {
          double acc = b[co];
          for (int ci = 0; ci < c_in; ++ci)
            acc += w[co][ci] * cur[static_cast<size_t>(ci) * length + t];
          size_t idx = static_cast<size_t>(co) * length + t;
          relu_mask[idx] = acc > 0.0 ? 1 : 0;
          z[idx] = acc > 0.0 ? acc : 0.0;
          sig_mix(sig, relu_mask[idx]);
        }
      }
      int pooled_len = ceil_div(length, 2);
      out.resize(static_cast<size_t>(c_out) * pooled_len);
      pool_src.resize(out.size());
      for (int co = 0; co < c_out; ++co) {
        for (int j = 0; j < pooled_len; ++j) {
          int a_idx = co * length + 2 * j;
          int winner = a_idx;
          if (2 * j + 1 < length && z[a_idx + 1] > z[a_idx]) winner = a_idx + 1;
          out[static_cast<size_t>(co) * pooled_len + j] = z[winner];
          pool_src[static_cast<size_t>(co) * pooled_len + j] = winner;
          sig_mix(sig, static_cast<uint64_t>(winner));
        }
      }
      length = pooled_len;
    } else {
      int t_out = shape.fc[layer - num_conv].out_features;
      int t_in = shape.fc[layer - num_conv].in_features;
      out.resize(t_out);
      relu_mask.resize(t_out);
      for (int to = 0; to < t_out; ++to) {
        double acc = b[to];
        for (int ti = 0; ti < t_in; ++ti) acc += w[to][ti] * cur[ti];
        if (last) {
          out[to] = acc;
          relu_mask[to] = 1;
        } else {
          relu_mask[to] = acc > 0.0 ? 1 : 0;
          out[to] = acc > 0.0 ? acc : 0.0;
          sig_mix(sig, relu_mask[to]);
        }
      }
    }

    if (ranges != nullptr)
      for (double v : out) ranges->update_boundary(layer, v);  // pre-quantization values
    std::vector<char> fq_mask(out.size(), 1);
    if (mode != QatMode::kOff) {
      QuantParams p = range_params(model.boundary_ranges[layer], bits);
      for (size_t i = 0; i < out.size(); ++i) {
        bool clamped = false;
        out[i] = fq_node(out[i], p, mode, clamped);
        fq_mask[i] = clamped ? 0 : 1;
        sig_mix(sig, clamped ? 1 : 0);
      }
    }
    cache.relu_mask.push_back(std::move(relu_mask));
    cache.pool_src.push_back(std::move(pool_src));
    cache.fq_mask.push_back(std::move(fq_mask));
    cur = out;
  }
  cache.logits = cur;
  return cache;
}

ModelGradients zero_gradients(const ModelShape& shape) {
  ModelGradients g;
  for (const auto& l : shape.conv) {
    g.conv_w.emplace_back(l.out_channels, std::vector<double>(l.in_channels, 0.0));
    g.conv_b.emplace_back(l.out_channels, 0.0);
  }
  for (const auto& l : shape.fc) {
    g.fc_w.emplace_back(l.out_features, std::vector<double>(l.in_features, 0.0));
    g.fc_b.emplace_back(l.out_features, 0.0);
  }
  return g;
}

void backward_sample(const CnnModel& model, const QatWeights& qw, const SampleCache& cache,
                     int label, double inv_batch, QatMode mode, ModelGradients& grads) {
  const ModelShape& shape = model.shape;
  int num_conv = static_cast<int>(shape.conv.size());
  int layers = shape.num_layers();

  // Softmax cross-entropy gradient on the logits.
  const std::vector<double>& logits = cache.logits;
  double max_logit = *std::max_element(logits.begin(), logits.end());
  double denom = 0.0;
  for (double v : logits) denom += std::exp(v - max_logit);
  std::vector<double> g(logits.size());
  for (size_t i = 0; i < logits.size(); ++i)
    g[i] = (std::exp(logits[i] - max_logit) / denom - (static_cast<int>(i) == label ? 1.0 : 0.0)) *
           inv_batch;

  for (int layer = layers - 1; layer >= 0; --layer) {
    bool is_conv = layer < num_conv;
    const auto& input = cache.inputs[layer];
    // Boundary fake-quantize node (saturated STE).
    if (mode != QatMode::kOff) {
      for (size_t i = 0; i < g.size(); ++i) g[i] = ste_backward(g[i], !cache.fq_mask[layer][i]);
    }

    if (is_conv) {
      int c_out = shape.conv[layer].out_channels;
      int c_in = shape.conv[layer].in_channels;
      int in_len = static_cast<int>(input.size()) / c_in;
      // Unpool: route each pooled gradient to its winning pre-pool element,
      // then apply the ReLU mask.
      std::vector<double> gz(static_cast<size_t>(c_out) * in_len, 0.0);
      for (size_t i = 0; i < g.size(); ++i) {
        int src = cache.pool_src[layer][i];
        if (cache.relu_mask[layer][src]) gz[src] += g[i];
      }
      std::vector<double> gx(input.size(), 0.0);
      for (int co = 0; co < c_out; ++co) {
        for (int t = 0; t < in_len; ++t) {
          double gv = gz[static_cast<size_t>(co) * in_len + t];
          if (gv == 0.0) continue;
          grads.conv_b[layer][co] += gv;
          for (int ci = 0; ci < c_in; ++ci) {
            grads.conv_w[layer][co][ci] += gv * input[static_cast<size_t>(ci) * in_len + t];
            gx[static_cast<size_t>(ci) * in_len + t] += gv * qw.w[layer][co][ci];
          }
        }
      }
      g = std::move(gx);
    } else {
      int m = layer - num_conv;
      int t_out = shape.fc[m].out_features;
      int t_in = shape.fc[m].in_features;
      bool last = layer + 1 == layers;
      std::vector<double> gx(t_in, 0.0);
      for (int to = 0; to < t_out; ++to) {
        double gv = g[to];
        if (!last && !cache.relu_mask[layer][to]) gv = 0.0;
        if (gv == 0.0) continue;
        grads.fc_b[m][to] += gv;
        for (int ti = 0; ti < t_in; ++ti) {
          grads.fc_w[m][to][ti] += gv * input[ti];
          gx[ti] += gv * qw.w[layer][to][ti];
        }
      }
      g = std::move(gx);
    }
  }

  // Weight fake-quantize nodes: mask the accumulated weight gradients.
  if (mode != QatMode::kOff) {
    for (int layer = 0; layer < layers; ++layer) {
      auto& gw = layer < num_conv ? grads.conv_w[layer] : grads.fc_w[layer - num_conv];
      for (size_t i = 0; i < gw.size(); ++i)
        for (size_t k = 0; k < gw[i].size(); ++k)
          gw[i][k] = ste_backward(gw[i][k], !qw.mask[layer][i][k]);
    }
  }
}

double sample_loss(const std::vector<double>& logits, int label) {
  double max_logit = *std::max_element(logits.begin(), logits.end());
  double denom = 0.0;
  for (double v : logits) denom += std::exp(v - max_logit);
  return -(logits[label] - max_logit - std::log(denom));
}

}  // namespace

std::vector<QuantParams> qat_weight_params(const CnnModel& model, int bits) {
  std::vector<QuantParams> params;
  int num_conv = static_cast<int>(model.shape.conv.size());
  for (int layer = 0; layer < model.shape.num_layers(); ++layer) {
    const auto& w = layer < num_conv ? model.conv_w[layer] : model.fc_w[layer - num_conv];
    params.push_back(tensor_params(w, bits));
  }
  return params;
}

void RangeTracker::update_input(double v) {
  if (!any) input = {v, v};
  input.lo = std::min(input.lo, v);
  input.hi = std::max(input.hi, v);
  any = true;
}

void RangeTracker::update_boundary(size_t layer, double v) {
  if (boundaries.size() <= layer) boundaries.resize(layer + 1, ValueRange{v, v});
  boundaries[layer].lo = std::min(boundaries[layer].lo, v);
  boundaries[layer].hi = std::max(boundaries[layer].hi, v);
}

LossResult loss_and_gradients(const CnnModel& model,
                              const std::vector<std::vector<double>>& features,
                              const std::vector<int>& labels, QatMode mode, int qat_bits,
                              const std::vector<QuantParams>* fixed_weight_params,
                              RangeTracker* ranges) {
  if (features.empty() || features.size() != labels.size())
    fail(ErrorKind::kInvalidArgument, "batch features and labels must be nonempty and aligned");
  if (mode != QatMode::kOff && !model.calibrated())
    fail(ErrorKind::kCalibration, "QAT requires recorded activation ranges");

  LossResult result;
  result.grads = zero_gradients(model.shape);
  uint64_t sig = 0;
  QatWeights qw = prepare_weights(model, mode, qat_bits, sig, fixed_weight_params);
  double inv_batch = 1.0 / static_cast<double>(features.size());
  for (size_t s = 0; s < features.size(); ++s) {
    SampleCache cache = forward_cached(model, qw, features[s], mode, qat_bits, sig, ranges);
    result.loss += sample_loss(cache.logits, labels[s]) * inv_batch;
    backward_sample(model, qw, cache, labels[s], inv_batch, mode, result.grads);
  }
  result.decision_signature = sig;
  return result;
}

void calibrate_ranges(CnnModel& model, const Dataset& data) {
  if (data.size() == 0) fail(ErrorKind::kInvalidArgument, "calibration dataset is empty");
  int layers = model.shape.num_layers();
  ValueRange input{0.0, 0.0};
  std::vector<ValueRange> bounds(layers, ValueRange{0.0, 0.0});
  bool first = true;
  for (const auto& row : data.features) {
    Tensor1D x(model.shape.input_channels, model.shape.input_features);
    if (static_cast<int>(row.size()) != x.size())
      fail(ErrorKind::kDimension, "dataset feature width does not match model input");
    x.v = row;
    ForwardResult fr = forward(model, x);
    for (double v : row) {
      if (first) input = {v, v};
      input.lo = std::min(input.lo, v);
      input.hi = std::max(input.hi, v);
    }
    for (int i = 0; i < layers; ++i) {
      for (double v : fr.boundaries[i].v) {
        if (first) bounds[i] = {v, v};
        bounds[i].lo = std::min(bounds[i].lo, v);
        bounds[i].hi = std::max(bounds[i].hi, v);
      }
      first = false;
    }
  }
  // Ranges always include zero so the zero-point is exact and ReLU has a
  // representable fixed point.
  input.lo = std::min(input.lo, 0.0);
  input.hi = std::max(input.hi, 0.0);
  for (auto& b : bounds) {
    b.lo = std::min(b.lo, 0.0);
    b.hi = std::max(b.hi, 0.0);
  }
  model.input_range = input;
  model.boundary_ranges = bounds;
}

namespace {

void apply_gradients(CnnModel& model, const ModelGradients& g, double lr) {
  for (size_t n = 0; n < model.conv_w.size(); ++n) {
    for (size_t i = 0; i < model.conv_w[n].size(); ++i)
      for (size_t k = 0; k < model.conv_w[n][i].size(); ++k)
        model.conv_w[n][i][k] -= lr * g.conv_w[n][i][k];
    for (size_t i = 0; i < model.conv_b[n].size(); ++i)
      model.conv_b[n][i] -= lr * g.conv_b[n][i];
  }
  for (size_t m = 0; m < model.fc_w.size(); ++m) {
    for (size_t i = 0; i < model.fc_w[m].size(); ++i)
      for (size_t k = 0; k < model.fc_w[m][i].size(); ++k)
        model.fc_w[m][i][k] -= lr * g.fc_w[m][i][k];
    for (size_t i = 0; i < model.fc_b[m].size(); ++i)
      model.fc_b[m][i] -= lr * g.fc_b[m][i];
  }
}

void sgd_epochs(CnnModel& model, const Dataset& data, int epochs, QatMode mode,
                const TrainConfig& cfg, Rng& rng, RangeTracker& ranges) {
  std::vector<size_t> order(data.size());
  std::iota(order.begin(), order.end(), size_t{0});
  for (int epoch = 0; epoch < epochs; ++epoch) {
    rng.shuffle(order);
    for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
      size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<std::vector<double>> feats;
      std::vector<int> labels;
      feats.reserve(end - start);
      for (size_t i = start; i < end; ++i) {
        feats.push_back(data.features[order[i]]);
        labels.push_back(data.labels[order[i]]);
      }
      LossResult batch =
          loss_and_gradients(model, feats, labels, mode, cfg.qat_bits, nullptr, &ranges);
      if (!std::isfinite(batch.loss))
        fail(ErrorKind::kNumeric, "training aborted: non-finite loss at epoch " +
                                      std::to_string(epoch) + ", batch offset " +
                                      std::to_string(start));
      apply_gradients(model, batch.grads, cfg.learning_rate);
    }
  }
}

// Widen the calibrated ranges with the running min/max seen while training.
void merge_tracker(CnnModel& model, const RangeTracker& ranges) {
  if (!ranges.any) return;
  model.input_range.lo = std::min(model.input_range.lo, ranges.input.lo);
  model.input_range.hi = std::max(model.input_range.hi, ranges.input.hi);
  for (size_t i = 0; i < model.boundary_ranges.size() && i < ranges.boundaries.size(); ++i) {
    model.boundary_ranges[i].lo = std::min(model.boundary_ranges[i].lo, ranges.boundaries[i].lo);
    model.boundary_ranges[i].hi = std::max(model.boundary_ranges[i].hi, ranges.boundaries[i].hi);
  }
}

}  // namespace

CnnModel train(const CnnModel& model0, const Dataset& data, const TrainConfig& cfg) {
  model0.validate();
  if (data.size() == 0) fail(ErrorKind::kInvalidArgument, "training dataset is empty");
  if (cfg.learning_rate <= 0.0) fail(ErrorKind::kInvalidArgument, "learning rate must be > 0");
  if (cfg.epochs < 0) fail(ErrorKind::kInvalidArgument, "epoch count must be >= 0");
  if (cfg.batch_size < 1) fail(ErrorKind::kInvalidArgument, "batch size must be >= 1");
  int width = model0.shape.boundary_size(model0.shape.num_layers());
  for (int label : data.labels) {
    if (label < 0 || label >= width)
      fail(ErrorKind::kInvalidArgument, "label outside the model's output width");
  }

  CnnModel model = model0;
  Rng rng(cfg.seed);
  RangeTracker ranges;
  if (cfg.epochs > 0) sgd_epochs(model, data, cfg.epochs, QatMode::kOff, cfg, rng, ranges);
  calibrate_ranges(model, data);
  merge_tracker(model, ranges);
  if (cfg.qat_enabled && cfg.qat_epochs > 0) {
    RangeTracker qat_ranges;
    sgd_epochs(model, data, cfg.qat_epochs, QatMode::kFull, cfg, rng, qat_ranges);
    calibrate_ranges(model, data);
    merge_tracker(model, qat_ranges);
  }
  return model;
}

double evaluate_accuracy(const CnnModel& model, const Dataset& data) {
  if (data.size() == 0) fail(ErrorKind::kInvalidArgument, "evaluation dataset is empty");
  int correct = 0;
  for (size_t i = 0; i < data.size(); ++i) {
    Tensor1D x(model.shape.input_channels, model.shape.input_features);
    x.v = data.features[i];
    ForwardResult fr = forward(model, x);
    if (argmax_class(fr.output) == data.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

// ---------------------------------------------------------------------------
// Pruning

namespace {

std::vector<int> select_kept(const std::vector<std::vector<double>>& w, double rate) {
  int width = static_cast<int>(w.size());
  int kept = std::max(1, static_cast<int>(round_half_away((1.0 - rate) * width)));
  std::vector<std::pair<double, int>> ranked(width);
  for (int i = 0; i < width; ++i) {
    double importance = 0.0;
    for (double x : w[i]) importance += std::abs(x);
    ranked[i] = {importance, i};
  }
  // Highest importance first; ties keep the lower channel index.
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  std::vector<int> indices;
  indices.reserve(kept);
  for (int i = 0; i < kept; ++i) indices.push_back(ranked[i].second);
  std::sort(indices.begin(), indices.end());
  return indices;
}

std::vector<std::vector<double>> slice_rows_cols(const std::vector<std::vector<double>>& w,
                                                 const std::vector<int>& rows,
                                                 const std::vector<int>& cols) {
  std::vector<std::vector<double>> out;
  out.reserve(rows.size());
  for (int r : rows) {
    std::vector<double> row;
    row.reserve(cols.size());
    for (int c : cols) row.push_back(w[r][c]);
    out.push_back(std::move(row));
  }
  return out;
}

std::vector<int> iota_vec(int n) {
  std::vector<int> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

}  // namespace

std::pair<CnnModel, PruneReport> prune_channels(const CnnModel& model, double rate) {
  model.validate();
  if (rate < 0.0 || rate >= 1.0)
    fail(ErrorKind::kInvalidArgument, "pruning rate must be in [0, 1)");

  PruneReport report;
  report.rate = rate;
  report.flops_before = count_flops(model.shape);

  CnnModel out = model;
  int num_conv = static_cast<int>(model.shape.conv.size());
  std::vector<int> prev_kept = iota_vec(model.shape.input_channels);

  for (int n = 0; n < num_conv; ++n) {
    std::vector<int> kept = select_kept(model.conv_w[n], rate);
    report.kept_conv.push_back(kept);
    out.conv_w[n] = slice_rows_cols(model.conv_w[n], kept, prev_kept);
    std::vector<double> biases;
    for (int c : kept) biases.push_back(model.conv_b[n][c]);
    out.conv_b[n] = std::move(biases);
    out.shape.conv[n].in_channels = static_cast<int>(prev_kept.size());
    out.shape.conv[n].out_channels = static_cast<int>(kept.size());
    prev_kept = std::move(kept);
  }

  // Flattened conv output columns surviving into the first fc layer:
  // channel-major, so channel c contributes the contiguous block
  // [c * len, (c + 1) * len).
  int tail_len = model.shape.conv_output_length(num_conv - 1);
  std::vector<int> prev_cols;
  for (int c : prev_kept)
    for (int t = 0; t < tail_len; ++t) prev_cols.push_back(c * tail_len + t);

  int num_fc = static_cast<int>(model.shape.fc.size());
  for (int m = 0; m < num_fc; ++m) {
    bool last = m + 1 == num_fc;
    std::vector<int> kept =
        last ? iota_vec(model.shape.fc[m].out_features) : select_kept(model.fc_w[m], rate);
    if (!last) report.kept_fc_hidden.push_back(kept);
    out.fc_w[m] = slice_rows_cols(model.fc_w[m], kept, prev_cols);
    std::vector<double> biases;
    for (int t : kept) biases.push_back(model.fc_b[m][t]);
    out.fc_b[m] = std::move(biases);
    out.shape.fc[m].in_features = static_cast<int>(prev_cols.size());
    out.shape.fc[m].out_features = static_cast<int>(kept.size());
    prev_cols = std::move(kept);
  }

  out.validate();
  report.flops_after = count_flops(out.shape);
  return {out, report};
}

// ---------------------------------------------------------------------------
// Dataset CSV

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot read " + path);
  Dataset data;
  std::string line;
  size_t line_no = 0;
  size_t width = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<double> fields;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        fields.push_back(std::stod(cell));
      } catch (const std::exception&) {
        fail(ErrorKind::kParse, path + ":" + std::to_string(line_no) + ": bad number '" + cell + "'");
      }
    }
    if (fields.size() < 2)
      fail(ErrorKind::kParse, path + ":" + std::to_string(line_no) + ": need features and a label");
    if (width == 0) width = fields.size();
    if (fields.size() != width)
      fail(ErrorKind::kParse, path + ":" + std::to_string(line_no) + ": inconsistent column count");
    int label = static_cast<int>(fields.back());
    if (label < 0 || fields.back() != label)
      fail(ErrorKind::kParse, path + ":" + std::to_string(line_no) + ": label must be a non-negative integer");
    fields.pop_back();
    data.features.push_back(std::move(fields));
    data.labels.push_back(label);
    data.num_classes = std::max(data.num_classes, label + 1);
  }
  return data;
}

void save_dataset(const Dataset& data, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path);
  out.precision(17);
  for (size_t i = 0; i < data.size(); ++i) {
    for (double v : data.features[i]) out << v << ',';
    out << data.labels[i] << '\n';
  }
}

}  // namespace quark
