// Copyright 2026 The szdl Authors
// SPDX-License-Identifier: Apache-2.0

#include "szdl/tensor.hpp"

#include <algorithm>
#include <atomic>

#include "szdl/common.hpp"

namespace szdl {

std::size_t shape_count(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace {

std::atomic<std::uint64_t> g_next_generation{1};

void check_shape(const Shape& shape) {
  for (std::size_t d : shape) {
    if (d == 0) throw Error(ErrorCode::ShapeMismatch, "tensor extents must be positive: " + shape_string(shape));
  }
}

}  // namespace

template <typename Real>
Tensor<Real>::Tensor(Shape shape, Real fill) : node_(std::make_shared<Node>()) {
  check_shape(shape);
  node_->values = std::make_shared<std::vector<Real>>(shape_count(shape), fill);
  node_->shape = std::move(shape);
}

template <typename Real>
Tensor<Real>::Tensor(Shape shape, std::vector<Real> values) : node_(std::make_shared<Node>()) {
  check_shape(shape);
  if (values.size() != shape_count(shape)) {
    throw Error(ErrorCode::ShapeMismatch, std::to_string(values.size()) + " values for shape " + shape_string(shape));
  }
  node_->values = std::make_shared<std::vector<Real>>(std::move(values));
  node_->shape = std::move(shape);
}

template <typename Real>
Real Tensor<Real>::item() const {
  if (size() != 1) throw Error(ErrorCode::ShapeMismatch, "item() on tensor of shape " + shape_string(shape()));
  return (*node_->values)[0];
}

template <typename Real>
void Tensor<Real>::set_requires_grad(bool on) {
  node_->requires_grad = on;
}

template <typename Real>
std::span<Real> Tensor<Real>::grad() {
  if (node_->grad.empty()) node_->grad.assign(size(), Real(0));
  return node_->grad;
}

template <typename Real>
void Tensor<Real>::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), Real(0));
}

template <typename Real>
Tensor<Real> Tensor<Real>::detach() const {
  Tensor t;
  t.node_ = std::make_shared<Node>();
  t.node_->shape = node_->shape;
  t.node_->values = node_->values;
  return t;
}

template <typename Real>
Tensor<Real> Tensor<Real>::clone() const {
  return Tensor(node_->shape, *node_->values);
}

template <typename Real>
Tensor<Real> Tensor<Real>::view(Shape shape) const {
  if (shape_count(shape) != size()) {
    throw Error(ErrorCode::ShapeMismatch, "cannot view " + shape_string(node_->shape) + " as " + shape_string(shape));
  }
  Tensor t = detach();
  t.node_->shape = std::move(shape);
  return t;
}

template <typename Real>
Tape<Real>::Tape(bool recording) : recording_(recording), generation_(g_next_generation.fetch_add(1)) {}

template <typename Real>
bool Tape<Real>::tracks(std::initializer_list<const Tensor<Real>*> inputs) const {
  if (!recording_) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor<Real>* t) { return t != nullptr && t->defined() && t->requires_grad(); });
}

template <typename Real>
void Tape<Real>::record(Tensor<Real>& output, std::function<void()> backward) {
  output.node_->requires_grad = true;
  output.node_->tape_generation = generation_;
  entries_.push_back(Entry{output, std::move(backward)});
}

template <typename Real>
void Tape<Real>::backward(const Tensor<Real>& loss) {
  if (!loss.defined() || loss.node_->tape_generation != generation_) {
    throw Error(ErrorCode::DetachedOutput, "loss was not produced on this tape");
  }
  if (loss.size() != 1) throw Error(ErrorCode::ShapeMismatch, "backward() needs a scalar loss");
  Tensor<Real> seed = loss;
  seed.grad()[0] += Real(1);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (!it->output.has_grad()) continue;  // not on a path from the loss
    it->backward();
  }
}

template <typename Real>
void Tape<Real>::clear() {
  entries_.clear();
}

template <typename Real>
Parameter<Real> make_parameter(std::string name, Tensor<Real> tensor) {
  tensor.set_requires_grad(true);
  tensor.grad();
  return Parameter<Real>{std::move(name), std::move(tensor)};
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;
template Parameter<float> make_parameter(std::string, Tensor<float>);
template Parameter<double> make_parameter(std::string, Tensor<double>);

}  // namespace szdl
