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
#include <cstdio>

#include "doctest.h"
#include "quark/model.hpp"
#include "test_util.hpp"

using namespace quark;

namespace {

CnnModel one_conv_identity() {
  CnnModel m;
  m.shape.input_features = 4;
  m.shape.input_channels = 1;
  m.shape.conv = {{1, 1}};
  m.conv_w = {{{1.0}}};
  m.conv_b = {{0.0}};
  return m;
}

}  // namespace

TEST_CASE("forward: identity conv weight, relu and pooling") {
  CnnModel m = one_conv_identity();
  Tensor1D x(1, 4);
  x.v = {3, -2, 5, 1};
  ForwardResult r = forward(m, x);
  REQUIRE(r.output.length == 2);
  CHECK(r.output.v[0] == 3.0);  // max(relu(3), relu(-2))
  CHECK(r.output.v[1] == 5.0);  // max(relu(5), relu(1))
}

TEST_CASE("forward: all-zero weights leave only relu(bias)") {
  CnnModel m = one_conv_identity();
  m.conv_w = {{{0.0}}};
  m.conv_b = {{-0.5}};
  Tensor1D x(1, 4);
  x.v = {9, 9, 9, 9};
  ForwardResult r = forward(m, x);
  for (double v : r.output.v) CHECK(v == 0.0);  // relu(-0.5)

  m.conv_b = {{0.75}};
  r = forward(m, x);
  for (double v : r.output.v) CHECK(v == 0.75);
}

TEST_CASE("forward: odd-length input pools the tail element through") {
  CnnModel m = one_conv_identity();
  m.shape.input_features = 5;
  Tensor1D x(1, 5);
  x.v = {1, 2, 3, 4, 5};
  ForwardResult r = forward(m, x);
  REQUIRE(r.output.length == 3);
  CHECK(r.output.v[2] == 5.0);
}

TEST_CASE("forward: matches the nested-loop oracle on random models") {
  Rng rng(2024);
  for (int trial = 0; trial < 50; ++trial) {
    CnnModel m = quark_test::random_model(rng);
    std::vector<double> x = quark_test::random_input(rng, m.shape);
    Tensor1D input(m.shape.input_channels, m.shape.input_features);
    input.v = x;
    ForwardResult got = forward(m, input);
    auto want = quark_test::oracle_forward(m, x);
    REQUIRE(got.boundaries.size() == want.size());
    for (size_t layer = 0; layer < want.size(); ++layer) {
      std::vector<double> flat;
      for (const auto& row : want[layer])
        for (double v : row) flat.push_back(v);
      REQUIRE(got.boundaries[layer].v.size() == flat.size());
      for (size_t i = 0; i < flat.size(); ++i)
        CHECK(got.boundaries[layer].v[i] == doctest::Approx(flat[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("forward: deterministic, relu non-negative, pool halves the length") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    CnnModel m = quark_test::random_model(rng);
    Tensor1D x(m.shape.input_channels, m.shape.input_features);
    x.v = quark_test::random_input(rng, m.shape);
    ForwardResult a = forward(m, x);
    ForwardResult b = forward(m, x);
    CHECK(a.output.v == b.output.v);  // bitwise
    int len = m.shape.input_features;
    for (size_t n = 0; n < m.shape.conv.size(); ++n) {
      CHECK(a.boundaries[n].length == (len + 1) / 2);
      for (double v : a.boundaries[n].v) CHECK(v >= 0.0);
      len = (len + 1) / 2;
    }
  }
}

TEST_CASE("forward: shape mismatch raises a dimension error") {
  CnnModel m = one_conv_identity();
  Tensor1D x(1, 3);
  x.v = {1, 2, 3};
  CHECK_THROWS_AS(forward(m, x), Error);
}

TEST_CASE("count_flops: single fc layer fixture") {
  // 4->2 dense alone: 2*(4*2) multiply-adds + 2 bias adds = 18.
  ModelShape fc_only;
  fc_only.input_features = 4;
  fc_only.fc = {{4, 2}};
  CHECK(count_flops(fc_only) == 18);
}

TEST_CASE("count_flops: reference architecture pruning ratio lands in [0.90, 0.96]") {
  ModelShape full;
  full.input_features = 16;
  full.input_channels = 1;
  full.conv = {{1, 16}, {16, 16}, {16, 16}};
  full.fc = {{32, 16}, {16, 15}};
  // kept = max(1, round(0.2 * 16)) = 3 for every hidden width at rate 0.8
  ModelShape pruned;
  pruned.input_features = 16;
  pruned.input_channels = 1;
  pruned.conv = {{1, 3}, {3, 3}, {3, 3}};
  pruned.fc = {{6, 3}, {3, 15}};
  double ratio = 1.0 - static_cast<double>(count_flops(pruned)) / count_flops(full);
  CHECK(ratio >= 0.90);
  CHECK(ratio <= 0.96);
  // Hand count: 768+4224+2112+1040+495 and 144+168+84+39+105.
  CHECK(count_flops(full) == 8639);
  CHECK(count_flops(pruned) == 540);
}

TEST_CASE("count_flops: independent of weight values, quadratic in channels") {
  Rng rng(11);
  CnnModel a = quark_test::random_model(rng);
  CnnModel b = a;
  for (auto& layer : b.conv_w)
    for (auto& row : layer)
      for (auto& w : row) w *= 17.0;
  CHECK(count_flops(a) == count_flops(b));

  // Doubling every conv channel count multiplies conv FLOPs by 4 (oracle
  // recount with the closed form, bias adds excluded).
  ModelShape shape;
  shape.input_features = 8;
  shape.conv = {{1, 2}, {2, 4}};
  auto conv_mults = [](const ModelShape& s) {
    int64_t total = 0;
    for (size_t n = 0; n < s.conv.size(); ++n)
      total += 2LL * s.conv[n].in_channels * s.conv[n].out_channels * s.conv_input_length(n);
    return total;
  };
  ModelShape doubled = shape;
  doubled.conv = {{1, 4}, {4, 8}};
  // input channel of layer 0 stays 1, so layer 0 scales by 2 and layer 1 by 4
  CHECK(conv_mults(doubled) == 2 * (2LL * 1 * 2 * 8) + 4 * (2LL * 2 * 4 * 4));
}

TEST_CASE("argmax_class: ties resolve to the lowest index") {
  Tensor1D t(1, 2);
  t.v = {0.1, 0.9};
  CHECK(argmax_class(t) == 1);
  t.v = {0.5, 0.5};
  CHECK(argmax_class(t) == 0);

  Rng rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    Tensor1D v(1, rng.next_int(1, 9));
    for (auto& x : v.v) x = rng.next_uniform(-1, 1);
    int best = 0;
    for (int i = 1; i < v.length; ++i)
      if (v.v[i] > v.v[best]) best = i;
    CHECK(argmax_class(v) == best);
  }

  Tensor1D empty;
  CHECK_THROWS_AS(argmax_class(empty), Error);
}

TEST_CASE("model shape invariants") {
  ModelShape shape;
  shape.input_features = 16;
  shape.conv = {{1, 4}, {4, 4}};
  shape.fc = {{16, 2}};
  shape.validate();
  CHECK(shape.conv_output_length(0) == 8);
  CHECK(shape.conv_output_length(1) == 4);
  CHECK(shape.flattened_conv_width() == 16);

  ModelShape bad = shape;
  bad.fc[0].in_features = 15;  // does not chain
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = shape;
  bad.conv[1].in_channels = 3;
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("model json round-trip preserves weights and ranges") {
  Rng rng(5);
  CnnModel m = quark_test::random_model(rng);
  quark_test::calibrate_random(m, rng);
  m.feature_norm.n_packets = 8;
  m.feature_norm.profile = "per_packet";
  m.feature_norm.bounds.assign(16, ValueRange{0.0, 1500.0});
  std::string text = model_to_json(m);
  CnnModel back = model_from_json(text);
  CHECK(back.conv_w == m.conv_w);
  CHECK(back.fc_w == m.fc_w);
  CHECK(back.boundary_ranges.size() == m.boundary_ranges.size());
  CHECK(back.input_range.lo == m.input_range.lo);
  CHECK(back.feature_norm.bounds.size() == m.feature_norm.bounds.size());
  CHECK(model_to_json(back) == text);
}
