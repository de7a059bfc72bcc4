/*
 * Copyright 2026 The flowreg Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#ifndef FLOWREG_TENSOR_HPP
#define FLOWREG_TENSOR_HPP

#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

namespace flowreg {

using Index = Eigen::Index;
using Shape = std::vector<Index>;
using Array = Eigen::ArrayXd;

std::string to_string(const Shape& shape);
Index numel(const Shape& shape);

/// Thrown when operand shapes are incompatible with an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown when an operation produces a non-finite value.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Tape;

/**
 * Dense row-major tensor of doubles.
 *
 * Values are immutable and shared between copies, so a Tensor behaves like a
 * cheap value type. A tensor produced by an operation whose inputs live on a
 * Tape is itself recorded on that tape and participates in differentiation.
 * A default-constructed tensor is undefined (no storage).
 */
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, Array data);

  static Tensor zeros(Shape shape);
  static Tensor ones(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor from(Shape shape, std::initializer_list<double> values);

  bool defined() const noexcept { return static_cast<bool>(data_); }
  const Shape& shape() const noexcept { return shape_; }
  Index rank() const noexcept { return static_cast<Index>(shape_.size()); }
  /// Size of an axis; negative axes count from the end.
  Index dim(Index axis) const;
  Index numel() const noexcept { return data_ ? data_->size() : 0; }

  const Array& array() const { return *data_; }
  const double* data() const { return data_->data(); }
  double operator[](Index flat) const { return (*data_)[flat]; }
  double at(std::initializer_list<Index> index) const;
  double item() const;

  /// True when the tensor is recorded on a tape (a variable or derived from one).
  bool requires_grad() const noexcept { return tape_ != nullptr; }
  Tape* tape() const noexcept { return tape_; }
  /// Same values, detached from any tape.
  Tensor detach() const;

 private:
  friend class Tape;
  friend struct TensorAccess;

  Shape shape_;
  std::shared_ptr<const Array> data_;
  Tape* tape_ = nullptr;
  std::size_t node_ = 0;
  // Serial of the tape whose non-recording backward pass produced this value.
  std::uint64_t taint_ = 0;
};

/// Per-thread instrumentation of backward passes.
struct AutodiffCounters {
  std::uint64_t backward_passes = 0;
  std::uint64_t higher_order_passes = 0;
};
AutodiffCounters& autodiff_counters();

/// Disables recording on the current thread for its lifetime.
class NoRecordGuard {
 public:
  NoRecordGuard();
  ~NoRecordGuard();
  NoRecordGuard(const NoRecordGuard&) = delete;
  NoRecordGuard& operator=(const NoRecordGuard&) = delete;

 private:
  bool previous_;
};

bool recording_enabled();

/**
 * Append-only record of primitive operations (a Wengert list).
 *
 * Entries are appended in evaluation order, so walking them backwards is a
 * reverse topological traversal. With `higher_order` set, the backward pass
 * is itself expressed with recorded primitives and appended to the same tape,
 * which makes gradients of gradient-dependent scalars available.
 *
 * Tensors hold a non-owning pointer to their tape: the tape must outlive every
 * tensor recorded on it that is still used in computation.
 */
class Tape {
 public:
  /// Gradient of each input given the gradient of the output. `needs[k]` is
  /// false for inputs whose gradient is not required; the matching slot may be
  /// left undefined. An undefined slot means "zero".
  using Backward =
      std::function<std::vector<Tensor>(const Tensor& grad_out, const std::vector<bool>& needs)>;

  explicit Tape(bool higher_order = false);
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool higher_order() const noexcept { return higher_order_; }
  std::size_t size() const noexcept { return entries_.size(); }
  std::string_view op_name(std::size_t entry) const { return entries_.at(entry).op; }

  /// Registers a leaf holding a copy of `value`'s data.
  Tensor variable(const Tensor& value);

  /// Gradients of a one-element tensor w.r.t. each entry of `wrt`. Leaves not
  /// connected to `scalar` receive zeros.
  std::vector<Tensor> gradient(const Tensor& scalar, std::span<const Tensor> wrt);
  Tensor gradient(const Tensor& scalar, const Tensor& wrt);

  /// Same as gradient(), for scalars built from first-order gradients; requires
  /// a higher-order tape.
  std::vector<Tensor> grad_of_grad(const Tensor& outer, std::span<const Tensor> wrt);

  /// Used by primitives: wraps `value` as the output of `op`. The result is
  /// recorded when some input lives on a tape and recording is enabled.
  static Tensor record(std::string_view op, Shape shape, Array value, std::vector<Tensor> inputs,
                       Backward backward);

 private:
  struct Entry {
    std::string_view op;
    std::vector<Tensor> inputs;
    Backward backward;
  };

  Tensor push(std::string_view op, Shape shape, std::shared_ptr<const Array> data,
              std::vector<Tensor> inputs, Backward backward);

  bool higher_order_;
  std::uint64_t serial_;
  std::deque<Entry> entries_;
};

}  // namespace flowreg

#endif  // FLOWREG_TENSOR_HPP
