// Copyright 2026 The szdl Authors
// SPDX-License-Identifier: Apache-2.0

// SE-VGG-11BN: five conv blocks (conv-BN-SE-ReLU units), four max-pools and a
// three-layer dense head.

#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "szdl/common.hpp"
#include "szdl/ops.hpp"
#include "szdl/tensor.hpp"
#include "szdl/volume.hpp"

namespace szdl {

struct ModelConfig {
  std::size_t input_extent = 96;  // per axis, after the optional x2 down-sampling
  std::size_t in_channels = 1;
  std::vector<std::size_t> block_channels{64, 128, 256, 256, 512, 512, 512, 512};
  std::size_t se_ratio = 16;
  std::array<std::size_t, 2> classifier_dims{128, 16};
  double dropout_p = 0.5;
  std::size_t num_classes = 2;
  std::size_t width_num = 1;  // channel multiplier width_num / width_den
  std::size_t width_den = 1;
  bool mid_sigmoid = true;     // sigmoid between dense 2 and dense 3
  bool se_after_relu = false;  // conv-BN-ReLU-SE instead of conv-BN-SE-ReLU
  ops::DownsampleMode downsample = ops::DownsampleMode::Mean;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;

  /// Channel count of each of the eight convolutions after width scaling.
  std::vector<std::size_t> channels() const;
  /// Extent of the final feature map (input_extent / 16).
  std::size_t final_extent() const { return input_extent / 16; }
  /// Throws BadInputExtent, IndivisibleSERatio, BadProbability or ConfigError.
  void validate() const;
};

nlohmann::json to_json(const ModelConfig& config);
/// Strict: unknown keys raise ConfigError. Missing keys keep their defaults.
ModelConfig model_config_from_json(const nlohmann::json& j);

namespace layers {
struct Downsample {};
struct Conv {
  std::string name;
  std::size_t weight, bias;  // parameter indices
};
struct BatchNorm {
  std::string name;
  std::size_t gamma, beta;            // parameter indices
  std::size_t running_mean, running_var;  // buffer indices
};
struct SqueezeExcite {
  std::string name;
  std::size_t fc1_weight, fc1_bias, fc2_weight, fc2_bias;
};
struct Relu {};
struct MaxPool {};
struct Flatten {};
struct Dropout {
  double p;
};
struct Dense {
  std::string name;
  std::size_t weight, bias;
};
struct Sigmoid {};
struct Softmax {};
}  // namespace layers

using Layer = std::variant<layers::Downsample, layers::Conv, layers::BatchNorm, layers::SqueezeExcite, layers::Relu,
                           layers::MaxPool, layers::Flatten, layers::Dropout, layers::Dense, layers::Sigmoid,
                           layers::Softmax>;

std::string_view layer_kind(const Layer& layer);

template <typename Real>
struct NamedBuffer {
  std::string name;
  Tensor<Real> tensor;  // never requires grad
};

/// Where ForwardOptions::capture_features taps the network.
enum class FeatureTap {
  ConvOutput,  // raw output of the last convolution layer
  UnitOutput,  // output of the last conv unit (after BN, SE and ReLU), the input to flatten
};

struct ForwardOptions {
  /// Run on detached aliases of the parameters: nothing is accumulated into
  /// parameter gradients.
  bool frozen_params = false;
  /// Keep the tapped activation as a grad-tracked tensor in ForwardResult::features.
  bool capture_features = false;
  FeatureTap tap = FeatureTap::ConvOutput;
};

template <typename Real>
struct ForwardResult {
  Tensor<Real> logits;         // [N, classes], input to the loss
  Tensor<Real> probabilities;  // softmax(logits)
  Tensor<Real> features;       // set when capture_features
};

template <typename Real>
class Model {
 public:
  /// Builds the stack and draws all parameters from `seed`.
  Model(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Parameter<Real>>& parameters() { return params_; }
  const std::vector<Parameter<Real>>& parameters() const { return params_; }
  std::vector<NamedBuffer<Real>>& buffers() { return buffers_; }
  const std::vector<NamedBuffer<Real>>& buffers() const { return buffers_; }

  /// Per-sample [C, D, H, W] after each of the five blocks.
  const std::vector<std::array<std::size_t, 4>>& block_shapes() const { return block_shapes_; }
  std::size_t parameter_count() const;
  std::map<std::string, std::size_t> layer_histogram() const;

  /// Input [N, C, E, E, E] or [N, C, 2E, 2E, 2E] (down-sampled internally).
  /// Train mode needs `dropout_rng` when dropout_p > 0.
  ForwardResult<Real> forward(Tape<Real>& tape, const Tensor<Real>& batch, Mode mode, Rng* dropout_rng = nullptr,
                              ForwardOptions options = {});

  void zero_grad();

  Parameter<Real>& parameter(const std::string& name);
  Tensor<Real>& buffer(const std::string& name);

 private:
  Tensor<Real> se_forward(Tape<Real>& tape, const Tensor<Real>& x, const layers::SqueezeExcite& se,
                          const std::vector<Tensor<Real>>& p);

  ModelConfig config_;
  std::vector<Layer> layers_;
  std::vector<Parameter<Real>> params_;
  std::vector<NamedBuffer<Real>> buffers_;
  std::vector<std::array<std::size_t, 4>> block_shapes_;
};

template <typename Real>
Model<Real> build_model(const ModelConfig& config, std::uint64_t seed) {
  return Model<Real>(config, seed);
}

/// SE block on its own: squeeze, C -> C/r -> C bottleneck, sigmoid gate, rescale.
/// w1 [C, C/r], b1 [C/r], w2 [C/r, C], b2 [C].
template <typename Real>
Tensor<Real> se_block(Tape<Real>& tape, const Tensor<Real>& x, const Tensor<Real>& w1, const Tensor<Real>& b1,
                      const Tensor<Real>& w2, const Tensor<Real>& b2, Tensor<Real>* gate_out = nullptr);

/// Volume -> [1, 1, nz, ny, nx] tensor (W axis = x).
template <typename Real>
Tensor<Real> volume_to_tensor(const Volume& volume);
/// Stacks equally sized volumes into [N, 1, nz, ny, nx].
template <typename Real>
Tensor<Real> stack_volumes(const std::vector<const Volume*>& volumes);

/// Eval-mode softmax probability of class 1.
template <typename Real>
double predict_likelihood(Model<Real>& model, const Volume& volume);

/// Copies values between models of the same config (e.g. float -> double).
template <typename To, typename From>
void copy_state(const Model<From>& from, Model<To>& to);

extern template class Model<float>;
extern template class Model<double>;

}  // namespace szdl
