// Copyright 2026 The szdl Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "oracles.hpp"
#include "szdl/model.hpp"
#include "test_util.hpp"

namespace szdl {
namespace {

ModelConfig toy_config() {
  ModelConfig c;
  c.input_extent = 16;
  c.width_num = 1;
  c.width_den = 16;
  c.se_ratio = 4;
  return c;
}

Tensor<double> random_batch(std::size_t n, std::size_t e, Rng& rng) {
  return Tensor<double>(Shape{n, 1, e, e, e}, oracle::uniform(n * e * e * e, rng, 0.0, 1.0));
}

TEST(ModelStructure, LayerCountsAndOrder) {
  const Model<float> m(ModelConfig{}, 1);
  const auto h = m.layer_histogram();
  EXPECT_EQ(h.at("conv"), 8U);
  EXPECT_EQ(h.at("batchnorm"), 8U);
  EXPECT_EQ(h.at("se"), 8U);
  EXPECT_EQ(h.at("maxpool"), 4U);
  EXPECT_EQ(h.at("dense"), 3U);
  EXPECT_EQ(h.at("dropout"), 2U);
  EXPECT_EQ(h.at("downsample"), 1U);
  EXPECT_EQ(h.at("sigmoid"), 1U);
  EXPECT_EQ(h.at("softmax"), 1U);

  std::string order;
  for (const auto& l : m.layers()) order += std::string(layer_kind(l)) + " ";
  const std::string unit = "conv batchnorm se relu ";
  const std::string expected = "downsample " + unit + "maxpool " + unit + "maxpool " + unit + unit + "maxpool " +
                               unit + unit + "maxpool " + unit + unit +
                               "flatten dropout dense relu dropout dense sigmoid dense softmax ";
  EXPECT_EQ(order, expected);
}

TEST(ModelStructure, DefaultBlockShapes) {
  const Model<float> m(ModelConfig{}, 1);
  const std::vector<std::array<std::size_t, 4>> expected{
      {64, 48, 48, 48}, {128, 24, 24, 24}, {256, 12, 12, 12}, {512, 6, 6, 6}, {512, 6, 6, 6}};
  EXPECT_EQ(m.block_shapes(), expected);
  EXPECT_EQ(m.config().final_extent(), 6U);
}

TEST(ModelStructure, ConfigErrors) {
  ModelConfig c;
  c.se_ratio = 7;
  EXPECT_SZDL_ERROR(c.validate(), ErrorCode::IndivisibleSERatio);
  c = ModelConfig{};
  c.input_extent = 40;
  EXPECT_SZDL_ERROR(c.validate(), ErrorCode::BadInputExtent);
  c = ModelConfig{};
  c.dropout_p = 1.0;
  EXPECT_SZDL_ERROR(c.validate(), ErrorCode::BadProbability);
  c = ModelConfig{};
  c.width_num = 1;
  c.width_den = 8;
  EXPECT_SZDL_ERROR(c.validate(), ErrorCode::IndivisibleSERatio);  // 8 channels, ratio 16
}

TEST(ModelStructure, ParameterCountMatchesClosedForm) {
  ModelConfig c;
  c.input_extent = 48;
  c.width_num = 1;
  c.width_den = 8;
  c.se_ratio = 8;
  const Model<float> m(c, 3);
  const std::vector<std::size_t> ch{8, 16, 32, 32, 64, 64, 64, 64};
  EXPECT_EQ(c.channels(), ch);
  std::size_t expected = 0;
  std::size_t cin = 1;
  for (std::size_t cout : ch) {
    const std::size_t r = cout / 8;
    expected += cout * cin * 27 + cout;             // conv
    expected += 2 * cout;                           // BN
    expected += 2 * cout * r + r + cout;            // SE
    cin = cout;
  }
  const std::size_t flat = 64 * 3 * 3 * 3;
  expected += flat * 128 + 128 + 128 * 16 + 16 + 16 * 2 + 2;
  EXPECT_EQ(m.parameter_count(), expected);
}

TEST(ModelStructure, ParameterNamesUniqueAndInitDeterministic) {
  const Model<float> a(toy_config(), 9);
  const Model<float> b(toy_config(), 9);
  const Model<float> c(toy_config(), 10);
  std::set<std::string> names;
  bool differs = false;
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    EXPECT_TRUE(names.insert(a.parameters()[i].name).second);
    const auto& pa = a.parameters()[i].tensor.values();
    const auto& pb = b.parameters()[i].tensor.values();
    const auto& pc = c.parameters()[i].tensor.values();
    EXPECT_EQ(std::memcmp(pa.data(), pb.data(), pa.size() * sizeof(float)), 0);
    differs = differs || std::memcmp(pa.data(), pc.data(), pa.size() * sizeof(float)) != 0;
  }
  EXPECT_TRUE(differs);
  EXPECT_NO_THROW(a.parameters().at(0));
}

TEST(SeBlock, Examples) {
  Rng rng(1);
  Tape<double> tape(false);
  const std::size_t C = 8;
  const Tensor<double> w1(Shape{C, 2}, oracle::uniform(2 * C, rng));
  const Tensor<double> b1(Shape{2}, oracle::uniform(2, rng));
  const Tensor<double> w2(Shape{2, C}, 0.0);

  const Tensor<double> zero(Shape{2, C, 2, 2, 2}, 0.0);
  const Tensor<double> gated_zero =
      se_block(tape, zero, w1, b1, Tensor<double>(Shape{2, C}, oracle::uniform(2 * C, rng)), Tensor<double>(Shape{C}, 0.3));
  for (double v : gated_zero.values()) EXPECT_EQ(v, 0.0);

  const Tensor<double> x(Shape{2, C, 2, 2, 2}, oracle::uniform(2 * C * 8, rng));
  const Tensor<double> open = se_block(tape, x, w1, b1, w2, Tensor<double>(Shape{C}, 20.0));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(open.values()[i], x.values()[i], 1e-6);

  Tensor<double> gate;
  const Tensor<double> half = se_block(tape, x, w1, b1, w2, Tensor<double>(Shape{C}, 0.0), &gate);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(half.values()[i], x.values()[i] / 2.0);
  for (double g : gate.values()) EXPECT_EQ(g, 0.5);
}

TEST(SeBlock, GatesStrictlyInsideUnitInterval) {
  Rng rng(2);
  Tape<double> tape(false);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t C = 4;
    Tensor<double> gate;
    se_block(tape, Tensor<double>(Shape{3, C, 2, 2, 2}, oracle::uniform(3 * C * 8, rng, -5, 5)),
             Tensor<double>(Shape{C, 1}, oracle::uniform(C, rng, -3, 3)), Tensor<double>(Shape{1}, 0.1),
             Tensor<double>(Shape{1, C}, oracle::uniform(C, rng, -3, 3)),
             Tensor<double>(Shape{C}, oracle::uniform(C, rng, -3, 3)), &gate);
    for (double g : gate.values()) {
      EXPECT_GT(g, 0.0);
      EXPECT_LT(g, 1.0);
    }
  }
}

TEST(ModelForward, ToyShapesAndSoftmaxRows) {
  Rng rng(3);
  Model<double> m(toy_config(), 4);
  Tape<double> tape(false);
  ForwardOptions o;
  o.capture_features = true;
  const auto out = m.forward(tape, random_batch(3, 16, rng), Mode::Eval, nullptr, o);
  EXPECT_EQ(out.logits.shape(), (Shape{3, 2}));
  EXPECT_EQ(out.features.shape(), (Shape{3, 32, 1, 1, 1}));
  for (std::size_t r = 0; r < 3; ++r) {
    const double p0 = out.probabilities.values()[2 * r];
    const double p1 = out.probabilities.values()[2 * r + 1];
    EXPECT_GE(p0, 0.0);
    EXPECT_LE(p1, 1.0);
    EXPECT_NEAR(p0 + p1, 1.0, 1e-6);
  }
}

TEST(ModelForward, FullResolutionInputIsDownsampled) {
  Rng rng(4);
  Model<double> m(toy_config(), 4);
  Tape<double> tape(false);
  const Tensor<double> full = random_batch(1, 32, rng);
  const auto a = m.forward(tape, full, Mode::Eval);
  const Tensor<double> half = ops::downsample2x(tape, full);
  const auto b = m.forward(tape, half, Mode::Eval);
  EXPECT_EQ(a.logits.values()[0], b.logits.values()[0]);
  EXPECT_SZDL_ERROR(m.forward(tape, random_batch(1, 24, rng), Mode::Eval), ErrorCode::ShapeMismatch);
}

TEST(ModelForward, NinetySixCubeGivesSixCubeFeatureMap) {
  ModelConfig c;
  c.width_num = 1;
  c.width_den = 16;
  c.se_ratio = 4;
  Model<float> m(c, 1);
  Tape<float> tape(false);
  ForwardOptions o;
  o.capture_features = true;
  const auto out = m.forward(tape, Tensor<float>(Shape{1, 1, 96, 96, 96}, 0.5F), Mode::Eval, nullptr, o);
  EXPECT_EQ(out.features.shape(), (Shape{1, 32, 6, 6, 6}));
}

TEST(ModelForward, EvalIsDeterministicAndPure) {
  Rng rng(5);
  Model<double> m(toy_config(), 6);
  {
    // Populate running statistics away from their defaults first.
    Tape<double> tape;
    Rng drop(1);
    m.forward(tape, random_batch(2, 16, rng), Mode::Train, &drop);
  }
  std::vector<std::vector<double>> before;
  for (const auto& p : m.parameters()) before.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
  for (const auto& b : m.buffers()) before.emplace_back(b.tensor.values().begin(), b.tensor.values().end());
  const Tensor<double> batch = random_batch(2, 16, rng);
  Tape<double> tape;
  const auto a = m.forward(tape, batch, Mode::Eval);
  const auto b = m.forward(tape, batch, Mode::Eval);
  for (std::size_t i = 0; i < a.logits.size(); ++i) EXPECT_EQ(a.logits.values()[i], b.logits.values()[i]);
  std::size_t k = 0;
  for (const auto& p : m.parameters()) {
    EXPECT_TRUE(std::equal(p.tensor.values().begin(), p.tensor.values().end(), before[k++].begin()));
  }
  for (const auto& buf : m.buffers()) {
    EXPECT_TRUE(std::equal(buf.tensor.values().begin(), buf.tensor.values().end(), before[k++].begin()));
  }
}

TEST(ModelForward, TrainModeUpdatesRunningStats) {
  Rng rng(6);
  Model<double> m(toy_config(), 6);
  Tape<double> tape;
  Rng drop(2);
  m.forward(tape, random_batch(2, 16, rng), Mode::Train, &drop);
  EXPECT_NE(m.buffer("block1.bn1.running_mean").values()[0], 0.0);
}

TEST(ModelForward, GradientFlowsToEveryLayer) {
  Rng rng(7);
  ModelConfig c = toy_config();
  c.dropout_p = 0.0;
  Model<double> m(c, 8);
  Tape<double> tape;
  const auto out = m.forward(tape, random_batch(4, 16, rng), Mode::Train);
  const std::vector<int> labels{0, 1, 1, 0};
  tape.backward(ops::cross_entropy(tape, out.logits, labels));
  std::map<std::string, bool> nonzero;
  for (const auto& p : m.parameters()) {
    std::string layer = p.name.substr(0, p.name.rfind('.'));
    if (const auto fc = layer.find(".fc"); fc != std::string::npos) layer.resize(fc);  // one SE block
    for (double g : p.tensor.grad()) {
      ASSERT_TRUE(std::isfinite(g)) << p.name;
      if (g != 0.0) nonzero[layer] = true;
    }
    nonzero.emplace(layer, false);
  }
  for (const auto& [layer, any] : nonzero) EXPECT_TRUE(any) << layer;
}

TEST(ModelForward, FrozenParamsAccumulateNothing) {
  Rng rng(8);
  Model<double> m(toy_config(), 8);
  m.zero_grad();
  Tape<double> tape;
  ForwardOptions o;
  o.frozen_params = true;
  o.capture_features = true;
  const auto out = m.forward(tape, random_batch(1, 16, rng), Mode::Eval, nullptr, o);
  tape.backward(ops::select(tape, out.logits, 1));
  for (const auto& p : m.parameters()) {
    for (double g : p.tensor.grad()) EXPECT_EQ(g, 0.0) << p.name;
  }
  bool any = false;
  for (double g : std::as_const(out.features).grad()) any = any || g != 0.0;
  EXPECT_TRUE(any);
}

TEST(PredictLikelihood, ZeroClassifierGivesHalf) {
  Model<double> m(toy_config(), 9);
  for (auto& p : m.parameters()) {
    if (p.name.rfind("classifier.dense3", 0) == 0) std::fill(p.tensor.values().begin(), p.tensor.values().end(), 0.0);
  }
  Rng rng(9);
  Volume v(Extents{16, 16, 16}, Spacing{1, 1, 1});
  for (float& x : v.storage()) x = static_cast<float>(rng() % 100) / 100.0F;
  EXPECT_EQ(predict_likelihood(m, v), 0.5);
}

TEST(PredictLikelihood, ComplementsClassZero) {
  Model<double> m(toy_config(), 10);
  Volume v(Extents{16, 16, 16}, Spacing{1, 1, 1}, 0.3F);
  v.at(3, 4, 5) = 0.9F;
  const double p1 = predict_likelihood(m, v);
  Tape<double> tape(false);
  const auto out = m.forward(tape, volume_to_tensor<double>(v), Mode::Eval);
  EXPECT_NEAR(p1 + out.probabilities.values()[0], 1.0, 1e-6);
  EXPECT_EQ(p1, out.probabilities.values()[1]);
}

TEST(VolumeToTensor, AxisOrder) {
  Volume v(Extents{4, 3, 2}, Spacing{1, 1, 1});
  for (std::size_t i = 0; i < v.size(); ++i) v.storage()[i] = static_cast<float>(i);
  const auto t = volume_to_tensor<float>(v);
  EXPECT_EQ(t.shape(), (Shape{1, 1, 2, 3, 4}));
  EXPECT_EQ(t.values()[1 + 4 * (2 + 3 * 1)], v.at(1, 2, 1));
}

TEST(CopyState, FloatToDoublePreservesValues) {
  Model<float> f(toy_config(), 11);
  Model<double> d(toy_config(), 12);
  copy_state(f, d);
  for (std::size_t i = 0; i < f.parameters().size(); ++i) {
    for (std::size_t j = 0; j < f.parameters()[i].tensor.size(); ++j) {
      EXPECT_EQ(static_cast<double>(f.parameters()[i].tensor.values()[j]), d.parameters()[i].tensor.values()[j]);
    }
  }
}

TEST(ModelConfigJson, RoundTripAndStrictness) {
  ModelConfig c = toy_config();
  c.dropout_p = 0.25;
  const ModelConfig back = model_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  nlohmann::json j = to_json(c);
  j["bogus"] = 1;
  EXPECT_SZDL_ERROR(model_config_from_json(j), ErrorCode::ConfigError);
}

}  // namespace
}  // namespace szdl
