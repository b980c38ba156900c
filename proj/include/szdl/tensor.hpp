// Copyright 2026 The szdl Authors
// SPDX-License-Identifier: Apache-2.0

// Dense row-major tensors and a reverse-mode tape.
//
// A Tensor is a shared handle: copies alias the same node. Values are never
// modified after an op produces them; the gradient buffer is the only mutable
// state and is written by Tape::backward (or zeroed by the owner).

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace szdl {

using Shape = std::vector<std::size_t>;

std::size_t shape_count(const Shape& shape);
std::string shape_string(const Shape& shape);

enum class Mode { Train, Eval };

template <typename Real>
class Tape;

template <typename Real>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Real fill = Real(0));
  Tensor(Shape shape, std::vector<Real> values);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->values->size(); }

  std::span<Real> values() { return *node_->values; }
  std::span<const Real> values() const { return *node_->values; }
  Real item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on);

  bool has_grad() const { return !node_->grad.empty(); }
  /// Allocates a zero-filled gradient buffer on first use.
  std::span<Real> grad();
  std::span<const Real> grad() const { return node_->grad; }
  void zero_grad();

  /// Shares the value buffer but has no gradient tracking.
  Tensor detach() const;
  /// Deep copy of values (no gradient).
  Tensor clone() const;
  /// Same values under a new shape with equal element count; not tracked.
  Tensor view(Shape shape) const;

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  struct Node {
    Shape shape;
    std::shared_ptr<std::vector<Real>> values;
    std::vector<Real> grad;
    bool requires_grad = false;
    std::uint64_t tape_generation = 0;  // 0: not produced on any tape
  };

  std::shared_ptr<Node> node_;

  friend class Tape<Real>;
};

/// Ordered record of executed ops. backward() replays the records in exact
/// reverse order; gradients from several uses of one tensor add up.
template <typename Real>
class Tape {
 public:
  explicit Tape(bool recording = true);

  bool recording() const { return recording_; }
  std::size_t size() const { return entries_.size(); }

  /// True when an op over `inputs` must be recorded.
  bool tracks(std::initializer_list<const Tensor<Real>*> inputs) const;

  /// Registers `output` as produced by an op whose backward closure reads
  /// output.grad() and accumulates into its inputs.
  void record(Tensor<Real>& output, std::function<void()> backward);

  /// Seeds d(loss)/d(loss) = 1 and propagates. Throws DetachedOutput when the
  /// loss was not produced on this tape, ShapeMismatch when it is not a scalar.
  void backward(const Tensor<Real>& loss);

  /// Drops all records (and the activations they keep alive).
  void clear();

 private:
  struct Entry {
    Tensor<Real> output;
    std::function<void()> backward;
  };
  std::vector<Entry> entries_;
  bool recording_;
  std::uint64_t generation_;
};

template <typename Real>
struct Parameter {
  std::string name;
  Tensor<Real> tensor;  // always requires grad, grad always allocated
};

template <typename Real>
Parameter<Real> make_parameter(std::string name, Tensor<Real> tensor);

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace szdl
