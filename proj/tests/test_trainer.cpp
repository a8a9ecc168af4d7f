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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>

#include "doctest.h"
#include "quark/trainer.hpp"
#include "test_util.hpp"

using namespace quark;

namespace {

// Two linearly separable blobs in feature space.
Dataset separable_dataset(uint64_t seed, int per_class, int width) {
  Rng rng(seed);
  Dataset data;
  data.num_classes = 2;
  for (int cls = 0; cls < 2; ++cls) {
    for (int i = 0; i < per_class; ++i) {
      std::vector<double> row(width);
      for (auto& v : row)
        v = cls == 0 ? rng.next_uniform(0.0, 0.35) : rng.next_uniform(0.6, 1.0);
      data.features.push_back(row);
      data.labels.push_back(cls);
    }
  }
  return data;
}

ModelShape tiny_shape(int width) {
  ModelShape shape;
  shape.input_features = width;
  shape.input_channels = 1;
  shape.conv = {{1, 3}};
  shape.fc = {{3 * ((width + 1) / 2), 4}, {4, 2}};
  return shape;
}

}  // namespace

TEST_CASE("train: separable synthetic set converges above 95% accuracy") {
  Dataset data = separable_dataset(5, 60, 8);
  CnnModel model = init_model(tiny_shape(8), 2);
  TrainConfig cfg;
  cfg.epochs = 40;
  cfg.seed = 9;
  model = train(model, data, cfg);
  CHECK(evaluate_accuracy(model, data) >= 0.95);
  CHECK(model.calibrated());
}

TEST_CASE("train: zero epochs returns the model unchanged, ranges recorded") {
  Dataset data = separable_dataset(6, 20, 8);
  CnnModel model = init_model(tiny_shape(8), 3);
  TrainConfig cfg;
  cfg.epochs = 0;
  CnnModel out = train(model, data, cfg);
  CHECK(out.conv_w == model.conv_w);
  CHECK(out.fc_w == model.fc_w);
  CHECK(out.calibrated());
  CHECK_FALSE(model.calibrated());
}

TEST_CASE("train: identical seeds give bitwise-identical weights") {
  Dataset data = separable_dataset(7, 30, 8);
  CnnModel model = init_model(tiny_shape(8), 4);
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.seed = 1234;
  CnnModel a = train(model, data, cfg);
  CnnModel b = train(model, data, cfg);
  CHECK(a.conv_w == b.conv_w);
  CHECK(a.fc_w == b.fc_w);
  CHECK(a.conv_b == b.conv_b);
  CHECK(a.fc_b == b.fc_b);
  cfg.seed = 1235;
  CnnModel c = train(model, data, cfg);
  CHECK(a.fc_w != c.fc_w);
}

TEST_CASE("train: range recording brackets every observed activation") {
  Dataset data = separable_dataset(8, 25, 8);
  CnnModel model = init_model(tiny_shape(8), 5);
  TrainConfig cfg;
  cfg.epochs = 3;
  model = train(model, data, cfg);
  for (size_t i = 0; i < data.size(); ++i) {
    Tensor1D x(1, 8);
    x.v = data.features[i];
    ForwardResult fr = forward(model, x);
    for (int layer = 0; layer < model.shape.num_layers(); ++layer) {
      for (double v : fr.boundaries[layer].v) {
        CHECK(v >= model.boundary_ranges[layer].lo - 1e-12);
        CHECK(v <= model.boundary_ranges[layer].hi + 1e-12);
      }
    }
  }
}

TEST_CASE("fake_quantize: grid fixed points, saturation, hand value") {
  QuantParams p{0.25, 0, 8, true, -128, 127};
  // values already on the grid pass through unchanged
  CHECK(fake_quantize(1.75, p) == 1.75);
  CHECK(fake_quantize(-3.25, p) == -3.25);
  // beyond the range: saturates at scale * (qmax - Z)
  CHECK(fake_quantize(1e9, p) == 0.25 * 127);
  CHECK(fake_quantize(-1e9, p) == 0.25 * -128);
  // Round(0.30 / 0.25) = Round(1.2) = 1 -> 0.25
  CHECK(fake_quantize(0.30, p) == 0.25);
}

TEST_CASE("fake_quantize: idempotent over random parameters") {
  Rng rng(43);
  for (int trial = 0; trial < 200; ++trial) {
    QuantParams p = make_quant_params(rng.next_uniform(-4, 0), rng.next_uniform(0.1, 4),
                                      rng.next_int(3, 8), true);
    double r = rng.next_uniform(-6, 6);
    double once = fake_quantize(r, p);
    CHECK(fake_quantize(once, p) == once);
  }
}

TEST_CASE("ste_backward: identity in range, zero when clamped") {
  CHECK(ste_backward(0.7, false) == 0.7);
  CHECK(ste_backward(-1.5, false) == -1.5);
  CHECK(ste_backward(0.7, true) == 0.0);
}

TEST_CASE("qat gradients match central finite differences off the kinks") {
  // The STE backward is the exact derivative of the clamp envelope (the
  // fake-quantize node with rounding stripped), so finite differences of the
  // clamp-only network validate the whole backward pass: conv/fc transposes,
  // pool routing, ReLU masks and clamp masks. Points whose decision
  // signature changes inside the probe interval are skipped.
  Rng rng(47);
  int models_checked = 0, grads_checked = 0;
  while (models_checked < 20) {
    CnnModel model = quark_test::random_model(rng);
    quark_test::calibrate_random(model, rng, 32);
    std::vector<std::vector<double>> feats;
    std::vector<int> labels;
    int classes = model.shape.fc.back().out_features;
    for (int i = 0; i < 6; ++i) {
      feats.push_back(quark_test::random_input(rng, model.shape));
      labels.push_back(rng.next_int(0, classes - 1));
    }
    std::vector<QuantParams> frozen = qat_weight_params(model, 8);
    LossResult base = loss_and_gradients(model, feats, labels, QatMode::kClampOnly, 8, &frozen);
    ++models_checked;

    int num_conv = static_cast<int>(model.shape.conv.size());
    for (int probe = 0; probe < 6; ++probe) {
      int layer = rng.next_int(0, model.shape.num_layers() - 1);
      bool is_conv = layer < num_conv;
      auto& w = is_conv ? model.conv_w[layer] : model.fc_w[layer - num_conv];
      int i = rng.next_int(0, static_cast<int>(w.size()) - 1);
      int k = rng.next_int(0, static_cast<int>(w[i].size()) - 1);
      double analytic = is_conv ? base.grads.conv_w[layer][i][k]
                                : base.grads.fc_w[layer - num_conv][i][k];
      double h = 1e-4;
      double saved = w[i][k];
      w[i][k] = saved + h;
      LossResult up = loss_and_gradients(model, feats, labels, QatMode::kClampOnly, 8, &frozen);
      w[i][k] = saved - h;
      LossResult down = loss_and_gradients(model, feats, labels, QatMode::kClampOnly, 8, &frozen);
      w[i][k] = saved;
      if (up.decision_signature != base.decision_signature ||
          down.decision_signature != base.decision_signature)
        continue;  // a kink sits inside the probe interval
      double fd = (up.loss - down.loss) / (2 * h);
      double diff = std::abs(fd - analytic);
      if (diff > 1e-7) {  // beneath that, central differences are pure noise
        CHECK(diff / std::max(std::abs(analytic), std::abs(fd)) <= 1e-4);
      }
      ++grads_checked;
    }
  }
  CHECK(grads_checked >= 60);  // the filter must not eat the test
}

TEST_CASE("qat training keeps the separable task learnable") {
  Dataset data = separable_dataset(11, 50, 8);
  CnnModel model = init_model(tiny_shape(8), 6);
  TrainConfig cfg;
  cfg.epochs = 40;
  cfg.qat_enabled = true;
  cfg.qat_bits = 7;
  cfg.qat_epochs = 10;
  cfg.seed = 21;
  model = train(model, data, cfg);
  CHECK(evaluate_accuracy(model, data) >= 0.95);
}

TEST_CASE("prune_channels: rate 0 is the identity") {
  Rng rng(51);
  CnnModel m = quark_test::random_model(rng);
  auto [pruned, report] = prune_channels(m, 0.0);
  CHECK(pruned.conv_w == m.conv_w);
  CHECK(pruned.fc_w == m.fc_w);
  CHECK(report.flops_before == report.flops_after);
  for (size_t n = 0; n < report.kept_conv.size(); ++n)
    CHECK(static_cast<int>(report.kept_conv[n].size()) == m.shape.conv[n].out_channels);
}

TEST_CASE("prune_channels: the all-zero channel goes first") {
  CnnModel m;
  m.shape.input_features = 4;
  m.shape.input_channels = 1;
  m.shape.conv = {{1, 2}};
  m.shape.fc = {{4, 2}};
  m.conv_w = {{{0.0}, {0.8}}};  // channel 0 contributes nothing
  m.conv_b = {{0.1, 0.2}};
  m.fc_w = {{{1, 2, 3, 4}, {5, 6, 7, 8}}};
  m.fc_b = {{0.0, 0.0}};
  auto [pruned, report] = prune_channels(m, 0.5);
  CHECK(report.kept_conv[0] == std::vector<int>{1});
  CHECK(pruned.conv_w[0][0][0] == 0.8);
  CHECK(pruned.conv_b[0][0] == 0.2);
  // fc keeps the columns fed by channel 1: flat indices 2, 3
  CHECK(pruned.fc_w[0][0] == std::vector<double>{3, 4});
  CHECK(pruned.fc_w[0][1] == std::vector<double>{7, 8});
}

TEST_CASE("prune_channels: importance ties keep the lower index") {
  CnnModel m;
  m.shape.input_features = 4;
  m.shape.input_channels = 1;
  m.shape.conv = {{1, 3}};
  m.shape.fc = {{6, 2}};
  m.conv_w = {{{0.5}, {-0.5}, {0.5}}};  // identical L1 everywhere
  m.conv_b = {{0, 0, 0}};
  m.fc_w = {std::vector<std::vector<double>>(2, std::vector<double>(6, 0.1))};
  m.fc_b = {{0, 0}};
  auto [pruned, report] = prune_channels(m, 0.5);
  // kept = max(1, round(0.5 * 3)) = 2, ties resolved to channels 0 and 1
  CHECK(report.kept_conv[0] == std::vector<int>{0, 1});
  (void)pruned;
}

TEST_CASE("prune_channels: pruned forward equals the hand-sliced model") {
  Rng rng(53);
  for (int trial = 0; trial < 20; ++trial) {
    quark_test::RandomModelOptions opt;
    opt.max_channels = 4;
    CnnModel m = quark_test::random_model(rng, opt);
    double rate = rng.next_uniform(0.0, 0.75);
    auto [pruned, report] = prune_channels(m, rate);

    // Independent slicing oracle: zero out the dropped channels in the
    // original model and compare against the pruned forward. Zeroing a
    // dropped conv channel removes exactly its contribution because its
    // consumers' weights for that slice were deleted.
    for (int trial2 = 0; trial2 < 3; ++trial2) {
      std::vector<double> x = quark_test::random_input(rng, m.shape);
      Tensor1D pruned_in(pruned.shape.input_channels, pruned.shape.input_features);
      pruned_in.v = x;
      ForwardResult got = forward(pruned, pruned_in);

      auto want = quark_test::oracle_forward(m, x);
      // project the oracle's final tensor is not directly comparable when
      // hidden widths changed; instead rebuild a sliced copy by hand.
      CnnModel sliced = m;
      sliced.shape = pruned.shape;
      sliced.conv_w.clear();
      sliced.conv_b.clear();
      sliced.fc_w.clear();
      sliced.fc_b.clear();
      std::vector<int> prev(m.shape.input_channels);
      for (int c = 0; c < m.shape.input_channels; ++c) prev[c] = c;
      for (size_t n = 0; n < m.conv_w.size(); ++n) {
        std::vector<std::vector<double>> w;
        std::vector<double> b;
        for (int keep : report.kept_conv[n]) {
          std::vector<double> row;
          for (int p : prev) row.push_back(m.conv_w[n][keep][p]);
          w.push_back(row);
          b.push_back(m.conv_b[n][keep]);
        }
        sliced.conv_w.push_back(w);
        sliced.conv_b.push_back(b);
        prev = report.kept_conv[n];
      }
      int tail = m.shape.conv_output_length(static_cast<int>(m.conv_w.size()) - 1);
      std::vector<int> cols;
      for (int c : prev)
        for (int t = 0; t < tail; ++t) cols.push_back(c * tail + t);
      for (size_t fm = 0; fm < m.fc_w.size(); ++fm) {
        bool lastfc = fm + 1 == m.fc_w.size();
        std::vector<int> rows;
        if (lastfc) {
          for (size_t r = 0; r < m.fc_w[fm].size(); ++r) rows.push_back(static_cast<int>(r));
        } else {
          rows = report.kept_fc_hidden[fm];
        }
        std::vector<std::vector<double>> w;
        std::vector<double> b;
        for (int r : rows) {
          std::vector<double> row;
          for (int c : cols) row.push_back(m.fc_w[fm][r][c]);
          w.push_back(row);
          b.push_back(m.fc_b[fm][r]);
        }
        sliced.fc_w.push_back(w);
        sliced.fc_b.push_back(b);
        cols = rows;  // next layer's columns are indexed by original outputs
      }
      ForwardResult want2 = forward(sliced, pruned_in);
      CHECK(got.output.v == want2.output.v);
      (void)want;
    }
  }
}

TEST_CASE("prune_channels: kept counts follow max(1, round((1-rate)*C))") {
  ModelShape shape;
  shape.input_features = 16;
  shape.input_channels = 1;
  shape.conv = {{1, 16}, {16, 16}, {16, 16}};
  shape.fc = {{32, 16}, {16, 15}};
  CnnModel m = init_model(shape, 77);
  for (double rate : {0.1, 0.25, 0.5, 0.8, 0.9, 0.95}) {
    auto [pruned, report] = prune_channels(m, rate);
    int expect = std::max(1, static_cast<int>(std::round((1.0 - rate) * 16)));
    for (const auto& kept : report.kept_conv) CHECK(static_cast<int>(kept.size()) == expect);
    CHECK(static_cast<int>(report.kept_fc_hidden[0].size()) == expect);
    CHECK(pruned.shape.fc.back().out_features == 15);  // output head untouched
    CHECK(report.flops_after < report.flops_before);
  }
}

TEST_CASE("prune_channels: invalid rates") {
  Rng rng(55);
  CnnModel m = quark_test::random_model(rng);
  CHECK_THROWS_AS(prune_channels(m, 1.0), Error);
  CHECK_THROWS_AS(prune_channels(m, 1.5), Error);
  CHECK_THROWS_AS(prune_channels(m, -0.1), Error);
}

TEST_CASE("train: a diverging run aborts with a diagnostic instead of NaN weights") {
  Dataset data = separable_dataset(17, 20, 8);
  CnnModel model = init_model(tiny_shape(8), 7);
  TrainConfig cfg;
  cfg.learning_rate = 1e150;  // guaranteed blow-up
  cfg.epochs = 5;
  try {
    train(model, data, cfg);
    FAIL("expected the non-finite loss abort");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kNumeric);
    CHECK(std::string(e.what()).find("epoch") != std::string::npos);
  }
}

TEST_CASE("train: labels outside the output width are rejected") {
  Dataset data = separable_dataset(13, 10, 8);
  data.labels[0] = 9;
  CnnModel model = init_model(tiny_shape(8), 6);
  CHECK_THROWS_AS(train(model, data, TrainConfig{}), Error);
}

TEST_CASE("dataset csv round-trip") {
  Dataset data = separable_dataset(15, 8, 5);
  std::string path = "/tmp/quark_test_dataset.csv";
  save_dataset(data, path);
  Dataset back = load_dataset(path);
  REQUIRE(back.size() == data.size());
  CHECK(back.labels == data.labels);
  for (size_t i = 0; i < data.size(); ++i)
    for (size_t k = 0; k < data.features[i].size(); ++k)
      CHECK(back.features[i][k] == doctest::Approx(data.features[i][k]).epsilon(1e-15));
  std::remove(path.c_str());
}
