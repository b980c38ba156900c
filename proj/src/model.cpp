// Copyright 2026 The szdl Authors
// SPDX-License-Identifier: Apache-2.0

#include "szdl/model.hpp"

#include <cmath>
#include <random>
#include <set>

namespace szdl {

namespace {

// Convolution units per block; blocks 1-2 have one, 3-5 have two.
constexpr std::array<std::size_t, 5> kUnitsPerBlock{1, 1, 2, 2, 2};

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

}  // namespace

std::vector<std::size_t> ModelConfig::channels() const {
  if (width_num == 0 || width_den == 0) throw Error(ErrorCode::ConfigError, "width scale must be positive");
  std::vector<std::size_t> out;
  for (std::size_t c : block_channels) {
    if ((c * width_num) % width_den != 0) {
      throw Error(ErrorCode::ConfigError, "width scale " + std::to_string(width_num) + "/" +
                                              std::to_string(width_den) + " does not divide " + std::to_string(c));
    }
    out.push_back(c * width_num / width_den);
  }
  return out;
}

void ModelConfig::validate() const {
  if (input_extent == 0 || input_extent % 16 != 0) {
    throw Error(ErrorCode::BadInputExtent, "input_extent must be a positive multiple of 16, got " +
                                               std::to_string(input_extent));
  }
  if (block_channels.size() != 8) throw Error(ErrorCode::ConfigError, "block_channels needs 8 entries");
  if (in_channels == 0 || num_classes < 2) throw Error(ErrorCode::ConfigError, "bad in_channels/num_classes");
  if (classifier_dims[0] == 0 || classifier_dims[1] == 0) {
    throw Error(ErrorCode::ConfigError, "classifier widths must be positive");
  }
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw Error(ErrorCode::BadProbability, "dropout_p must be in [0, 1)");
  if (!(bn_eps > 0.0) || !(bn_momentum >= 0.0 && bn_momentum <= 1.0)) {
    throw Error(ErrorCode::ConfigError, "bn_eps must be > 0 and bn_momentum in [0, 1]");
  }
  for (std::size_t c : channels()) {
    if (c == 0) throw Error(ErrorCode::ConfigError, "scaled channel count is zero");
    if (se_ratio == 0 || c % se_ratio != 0) {
      throw Error(ErrorCode::IndivisibleSERatio,
                  "se_ratio " + std::to_string(se_ratio) + " does not divide " + std::to_string(c));
    }
  }
}

nlohmann::json to_json(const ModelConfig& c) {
  return nlohmann::json{
      {"input_extent", c.input_extent},
      {"in_channels", c.in_channels},
      {"block_channels", c.block_channels},
      {"se_ratio", c.se_ratio},
      {"classifier_dims", c.classifier_dims},
      {"dropout_p", c.dropout_p},
      {"num_classes", c.num_classes},
      {"width_scale", {c.width_num, c.width_den}},
      {"mid_sigmoid", c.mid_sigmoid},
      {"se_after_relu", c.se_after_relu},
      {"downsample", c.downsample == ops::DownsampleMode::Mean ? "mean" : "nearest"},
      {"bn_eps", c.bn_eps},
      {"bn_momentum", c.bn_momentum},
  };
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw Error(ErrorCode::ConfigError, "model config must be an object");
  ModelConfig c;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "input_extent") {
        c.input_extent = v.get<std::size_t>();
      } else if (key == "in_channels") {
        c.in_channels = v.get<std::size_t>();
      } else if (key == "block_channels") {
        c.block_channels = v.get<std::vector<std::size_t>>();
      } else if (key == "se_ratio") {
        c.se_ratio = v.get<std::size_t>();
      } else if (key == "classifier_dims") {
        c.classifier_dims = v.get<std::array<std::size_t, 2>>();
      } else if (key == "dropout_p") {
        c.dropout_p = v.get<double>();
      } else if (key == "num_classes") {
        c.num_classes = v.get<std::size_t>();
      } else if (key == "width_scale") {
        const auto w = v.get<std::array<std::size_t, 2>>();
        c.width_num = w[0];
        c.width_den = w[1];
      } else if (key == "mid_sigmoid") {
        c.mid_sigmoid = v.get<bool>();
      } else if (key == "se_after_relu") {
        c.se_after_relu = v.get<bool>();
      } else if (key == "downsample") {
        const auto s = v.get<std::string>();
        if (s == "mean") {
          c.downsample = ops::DownsampleMode::Mean;
        } else if (s == "nearest") {
          c.downsample = ops::DownsampleMode::Nearest;
        } else {
          throw Error(ErrorCode::ConfigError, "downsample must be \"mean\" or \"nearest\"");
        }
      } else if (key == "bn_eps") {
        c.bn_eps = v.get<double>();
      } else if (key == "bn_momentum") {
        c.bn_momentum = v.get<double>();
      } else {
        throw Error(ErrorCode::ConfigError, "unknown model config key \"" + key + "\"");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("model config: ") + e.what());
  }
  return c;
}

std::string_view layer_kind(const Layer& layer) {
  return std::visit(Overloaded{
                        [](const layers::Downsample&) { return std::string_view("downsample"); },
                        [](const layers::Conv&) { return std::string_view("conv"); },
                        [](const layers::BatchNorm&) { return std::string_view("batchnorm"); },
                        [](const layers::SqueezeExcite&) { return std::string_view("se"); },
                        [](const layers::Relu&) { return std::string_view("relu"); },
                        [](const layers::MaxPool&) { return std::string_view("maxpool"); },
                        [](const layers::Flatten&) { return std::string_view("flatten"); },
                        [](const layers::Dropout&) { return std::string_view("dropout"); },
                        [](const layers::Dense&) { return std::string_view("dense"); },
                        [](const layers::Sigmoid&) { return std::string_view("sigmoid"); },
                        [](const layers::Softmax&) { return std::string_view("softmax"); },
                    },
                    layer);
}

template <typename Real>
Model<Real>::Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  const std::vector<std::size_t> ch = config_.channels();
  Rng rng(seed);

  auto add_param = [&](const std::string& name, Shape shape, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    std::vector<Real> v(shape_count(shape));
    for (Real& x : v) x = static_cast<Real>(u(rng));
    params_.push_back(make_parameter(name, Tensor<Real>(std::move(shape), std::move(v))));
    return params_.size() - 1;
  };
  auto add_const_param = [&](const std::string& name, std::size_t n, Real fill) {
    params_.push_back(make_parameter(name, Tensor<Real>(Shape{n}, fill)));
    return params_.size() - 1;
  };
  auto add_buffer = [&](const std::string& name, std::size_t n, Real fill) {
    buffers_.push_back(NamedBuffer<Real>{name, Tensor<Real>(Shape{n}, fill)});
    return buffers_.size() - 1;
  };

  layers_.push_back(layers::Downsample{});
  std::size_t cin = config_.in_channels;
  std::size_t extent = config_.input_extent;
  std::size_t unit = 0;
  for (std::size_t b = 0; b < 5; ++b) {
    const std::string block = "block" + std::to_string(b + 1);
    for (std::size_t u = 0; u < kUnitsPerBlock[b]; ++u, ++unit) {
      const std::size_t cout = ch[unit];
      const std::string idx = std::to_string(u + 1);
      const std::string conv = block + ".conv" + idx;
      const std::size_t w = add_param(conv + ".weight", Shape{cout, cin, 3, 3, 3}, cin * 27);
      const std::size_t bias = add_param(conv + ".bias", Shape{cout}, cin * 27);
      layers_.push_back(layers::Conv{conv, w, bias});

      const std::string bn = block + ".bn" + idx;
      layers::BatchNorm bl{bn, 0, 0, 0, 0};
      bl.gamma = add_const_param(bn + ".gamma", cout, Real(1));
      bl.beta = add_const_param(bn + ".beta", cout, Real(0));
      bl.running_mean = add_buffer(bn + ".running_mean", cout, Real(0));
      bl.running_var = add_buffer(bn + ".running_var", cout, Real(1));
      layers_.push_back(bl);

      const std::string se = block + ".se" + idx;
      const std::size_t red = cout / config_.se_ratio;
      layers::SqueezeExcite sl{se, 0, 0, 0, 0};
      sl.fc1_weight = add_param(se + ".fc1.weight", Shape{cout, red}, cout);
      sl.fc1_bias = add_param(se + ".fc1.bias", Shape{red}, cout);
      sl.fc2_weight = add_param(se + ".fc2.weight", Shape{red, cout}, red);
      sl.fc2_bias = add_param(se + ".fc2.bias", Shape{cout}, red);
      if (config_.se_after_relu) {
        layers_.push_back(layers::Relu{});
        layers_.push_back(sl);
      } else {
        layers_.push_back(sl);
        layers_.push_back(layers::Relu{});
      }
      cin = cout;
    }
    if (b < 4) {
      layers_.push_back(layers::MaxPool{});
      extent /= 2;
    }
    block_shapes_.push_back({cin, extent, extent, extent});
  }

  const std::size_t flat = cin * extent * extent * extent;
  const std::size_t h1 = config_.classifier_dims[0];
  const std::size_t h2 = config_.classifier_dims[1];
  layers_.push_back(layers::Flatten{});
  layers_.push_back(layers::Dropout{config_.dropout_p});
  {
    const std::size_t w = add_param("classifier.dense1.weight", Shape{flat, h1}, flat);
    const std::size_t b = add_param("classifier.dense1.bias", Shape{h1}, flat);
    layers_.push_back(layers::Dense{"classifier.dense1", w, b});
  }
  layers_.push_back(layers::Relu{});
  layers_.push_back(layers::Dropout{config_.dropout_p});
  {
    const std::size_t w = add_param("classifier.dense2.weight", Shape{h1, h2}, h1);
    const std::size_t b = add_param("classifier.dense2.bias", Shape{h2}, h1);
    layers_.push_back(layers::Dense{"classifier.dense2", w, b});
  }
  if (config_.mid_sigmoid) layers_.push_back(layers::Sigmoid{});
  {
    const std::size_t w = add_param("classifier.dense3.weight", Shape{h2, config_.num_classes}, h2);
    const std::size_t b = add_param("classifier.dense3.bias", Shape{config_.num_classes}, h2);
    layers_.push_back(layers::Dense{"classifier.dense3", w, b});
  }
  layers_.push_back(layers::Softmax{});

  std::set<std::string> names;
  for (const auto& p : params_) {
    if (!names.insert(p.name).second) throw Error(ErrorCode::ConfigError, "duplicate parameter " + p.name);
  }
}

template <typename Real>
std::size_t Model<Real>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.size();
  return n;
}

template <typename Real>
std::map<std::string, std::size_t> Model<Real>::layer_histogram() const {
  std::map<std::string, std::size_t> h;
  for (const Layer& l : layers_) ++h[std::string(layer_kind(l))];
  return h;
}

template <typename Real>
void Model<Real>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

template <typename Real>
Parameter<Real>& Model<Real>::parameter(const std::string& name) {
  for (auto& p : params_) {
    if (p.name == name) return p;
  }
  throw Error(ErrorCode::InvalidArgument, "no parameter named " + name);
}

template <typename Real>
Tensor<Real>& Model<Real>::buffer(const std::string& name) {
  for (auto& b : buffers_) {
    if (b.name == name) return b.tensor;
  }
  throw Error(ErrorCode::InvalidArgument, "no buffer named " + name);
}

template <typename Real>
Tensor<Real> se_block(Tape<Real>& tape, const Tensor<Real>& x, const Tensor<Real>& w1, const Tensor<Real>& b1,
                      const Tensor<Real>& w2, const Tensor<Real>& b2, Tensor<Real>* gate_out) {
  if (x.rank() < 3 || w1.rank() != 2 || w1.dim(0) != x.dim(1) || w2.rank() != 2 || w2.dim(1) != x.dim(1)) {
    throw Error(ErrorCode::ShapeMismatch, "se_block weights do not match input " + shape_string(x.shape()));
  }
  Tensor<Real> squeeze = ops::global_avg_pool(tape, x);
  Tensor<Real> hidden = ops::relu(tape, ops::dense(tape, squeeze, w1, b1));
  Tensor<Real> gate = ops::sigmoid(tape, ops::dense(tape, hidden, w2, b2));
  if (gate_out != nullptr) *gate_out = gate;
  return ops::channel_scale(tape, x, gate);
}

template <typename Real>
Tensor<Real> Model<Real>::se_forward(Tape<Real>& tape, const Tensor<Real>& x, const layers::SqueezeExcite& se,
                                     const std::vector<Tensor<Real>>& p) {
  return se_block(tape, x, p[se.fc1_weight], p[se.fc1_bias], p[se.fc2_weight], p[se.fc2_bias]);
}

template <typename Real>
ForwardResult<Real> Model<Real>::forward(Tape<Real>& tape, const Tensor<Real>& batch, Mode mode, Rng* dropout_rng,
                                         ForwardOptions options) {
  if (batch.rank() != 5 || batch.dim(1) != config_.in_channels) {
    throw Error(ErrorCode::ShapeMismatch, "model input must be [N, " + std::to_string(config_.in_channels) +
                                              ", E, E, E], got " + shape_string(batch.shape()));
  }
  const std::size_t e = config_.input_extent;
  const bool full = batch.dim(2) == 2 * e && batch.dim(3) == 2 * e && batch.dim(4) == 2 * e;
  const bool reduced = batch.dim(2) == e && batch.dim(3) == e && batch.dim(4) == e;
  if (!full && !reduced) {
    throw Error(ErrorCode::ShapeMismatch, "input extent " + shape_string(batch.shape()) + " does not match " +
                                              std::to_string(e) + " or " + std::to_string(2 * e));
  }

  std::vector<Tensor<Real>> p;
  p.reserve(params_.size());
  for (const auto& param : params_) p.push_back(options.frozen_params ? param.tensor.detach() : param.tensor);

  const ops::BatchNormOptions bn_opts{config_.bn_eps, config_.bn_momentum};
  ForwardResult<Real> result;
  Tensor<Real> x = batch;
  std::size_t last_conv = 0;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (std::holds_alternative<layers::Conv>(layers_[i])) last_conv = i;
  }
  auto capture = [&] {
    if (!x.requires_grad()) {
      x = x.detach();
      x.set_requires_grad(true);
    }
    result.features = x;
  };
  for (std::size_t index = 0; index < layers_.size(); ++index) {
    const Layer& layer = layers_[index];
    std::visit(Overloaded{
                   [&](const layers::Downsample&) {
                     if (full) x = ops::downsample2x(tape, x, config_.downsample);
                   },
                   [&](const layers::Conv& l) {
                     x = ops::conv3d(tape, x, p[l.weight], p[l.bias]);
                     if (options.capture_features && options.tap == FeatureTap::ConvOutput && index == last_conv) {
                       capture();
                     }
                   },
                   [&](const layers::BatchNorm& l) {
                     x = ops::batchnorm3d(tape, x, p[l.gamma], p[l.beta], buffers_[l.running_mean].tensor,
                                          buffers_[l.running_var].tensor, mode, bn_opts);
                   },
                   [&](const layers::SqueezeExcite& l) { x = se_forward(tape, x, l, p); },
                   [&](const layers::Relu&) { x = ops::relu(tape, x); },
                   [&](const layers::MaxPool&) { x = ops::maxpool3d(tape, x); },
                   [&](const layers::Flatten&) {
                     if (options.capture_features && options.tap == FeatureTap::UnitOutput) capture();
                     x = ops::reshape(tape, x, Shape{x.dim(0), x.size() / x.dim(0)});
                   },
                   [&](const layers::Dropout& l) { x = ops::dropout(tape, x, l.p, mode, dropout_rng); },
                   [&](const layers::Dense& l) { x = ops::dense(tape, x, p[l.weight], p[l.bias]); },
                   [&](const layers::Sigmoid&) { x = ops::sigmoid(tape, x); },
                   [&](const layers::Softmax&) {
                     result.logits = x;
                     x = ops::softmax(tape, x);
                   },
               },
               layer);
  }
  result.probabilities = x;
  return result;
}

template <typename Real>
Tensor<Real> volume_to_tensor(const Volume& volume) {
  return stack_volumes<Real>({&volume});
}

template <typename Real>
Tensor<Real> stack_volumes(const std::vector<const Volume*>& volumes) {
  if (volumes.empty()) throw Error(ErrorCode::InvalidArgument, "no volumes to stack");
  const Extents ext = volumes.front()->extents();
  std::vector<Real> values;
  values.reserve(volumes.size() * ext.count());
  for (const Volume* v : volumes) {
    if (!(v->extents() == ext)) throw Error(ErrorCode::ShapeMismatch, "volumes in a batch must share extents");
    for (float f : v->data()) values.push_back(static_cast<Real>(f));
  }
  return Tensor<Real>(Shape{volumes.size(), 1, ext.nz, ext.ny, ext.nx}, std::move(values));
}

template <typename Real>
double predict_likelihood(Model<Real>& model, const Volume& volume) {
  Tape<Real> tape(false);
  const auto out = model.forward(tape, volume_to_tensor<Real>(volume), Mode::Eval);
  return static_cast<double>(out.probabilities.values()[1]);
}

template <typename To, typename From>
void copy_state(const Model<From>& from, Model<To>& to) {
  if (from.parameters().size() != to.parameters().size() || from.buffers().size() != to.buffers().size()) {
    throw Error(ErrorCode::ShapeMismatch, "copy_state between different architectures");
  }
  auto copy = [](const Tensor<From>& src, Tensor<To>& dst) {
    if (src.shape() != dst.shape()) throw Error(ErrorCode::ShapeMismatch, "copy_state shape mismatch");
    auto d = dst.values();
    auto s = src.values();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<To>(s[i]);
  };
  for (std::size_t i = 0; i < to.parameters().size(); ++i) copy(from.parameters()[i].tensor, to.parameters()[i].tensor);
  for (std::size_t i = 0; i < to.buffers().size(); ++i) copy(from.buffers()[i].tensor, to.buffers()[i].tensor);
}

template class Model<float>;
template class Model<double>;

template Tensor<float> se_block(Tape<float>&, const Tensor<float>&, const Tensor<float>&, const Tensor<float>&,
                                const Tensor<float>&, const Tensor<float>&, Tensor<float>*);
template Tensor<double> se_block(Tape<double>&, const Tensor<double>&, const Tensor<double>&, const Tensor<double>&,
                                 const Tensor<double>&, const Tensor<double>&, Tensor<double>*);
template Tensor<float> volume_to_tensor(const Volume&);
template Tensor<double> volume_to_tensor(const Volume&);
template Tensor<float> stack_volumes(const std::vector<const Volume*>&);
template Tensor<double> stack_volumes(const std::vector<const Volume*>&);
template double predict_likelihood(Model<float>&, const Volume&);
template double predict_likelihood(Model<double>&, const Volume&);
template void copy_state(const Model<float>&, Model<float>&);
template void copy_state(const Model<float>&, Model<double>&);
template void copy_state(const Model<double>&, Model<float>&);
template void copy_state(const Model<double>&, Model<double>&);

}  // namespace szdl
