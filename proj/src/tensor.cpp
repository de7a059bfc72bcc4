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

#include "flowreg/tensor.hpp"

#include <atomic>
#include <optional>
#include <sstream>

#include "flowreg/ops.hpp"

namespace flowreg {

namespace {

thread_local bool g_recording = true;
thread_local AutodiffCounters g_counters;
std::atomic<std::uint64_t> g_next_serial{1};

void require_finite(std::string_view op, const Array& data) {
  if (!data.allFinite()) {
    std::ostringstream msg;
    msg << op << ": produced a non-finite value";
    throw NumericError(msg.str());
  }
}

}  // namespace

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

Tensor::Tensor(Shape shape, Array data) : shape_(std::move(shape)) {
  for (Index d : shape_) {
    if (d < 0) throw ShapeError("tensor: negative dimension in shape " + to_string(shape_));
  }
  if (flowreg::numel(shape_) != data.size()) {
    throw ShapeError("tensor: shape " + to_string(shape_) + " does not hold " +
                     std::to_string(data.size()) + " values");
  }
  require_finite("tensor", data);
  data_ = std::make_shared<const Array>(std::move(data));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }
Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(Shape shape, double value) {
  const Index n = flowreg::numel(shape);
  return Tensor(std::move(shape), Array::Constant(n, value));
}

Tensor Tensor::scalar(double value) { return full({}, value); }

Tensor Tensor::from(Shape shape, std::initializer_list<double> values) {
  Array data(static_cast<Index>(values.size()));
  Index i = 0;
  for (double v : values) data[i++] = v;
  return Tensor(std::move(shape), std::move(data));
}

Index Tensor::dim(Index axis) const {
  const Index r = rank();
  const Index a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("dim: axis " + std::to_string(axis) + " out of range for shape " +
                     to_string(shape_));
  }
  return shape_[static_cast<std::size_t>(a)];
}

double Tensor::at(std::initializer_list<Index> index) const {
  if (static_cast<Index>(index.size()) != rank()) {
    throw ShapeError("at: index rank does not match shape " + to_string(shape_));
  }
  Index offset = 0;
  std::size_t axis = 0;
  for (Index i : index) {
    if (i < 0 || i >= shape_[axis]) throw ShapeError("at: index out of range for " + to_string(shape_));
    offset = offset * shape_[axis] + i;
    ++axis;
  }
  return (*data_)[offset];
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor of shape " + to_string(shape_) + " is not a scalar");
  return (*data_)[0];
}

Tensor Tensor::detach() const {
  Tensor out;
  out.shape_ = shape_;
  out.data_ = data_;
  return out;
}

AutodiffCounters& autodiff_counters() { return g_counters; }

NoRecordGuard::NoRecordGuard() : previous_(g_recording) { g_recording = false; }
NoRecordGuard::~NoRecordGuard() { g_recording = previous_; }

bool recording_enabled() { return g_recording; }

Tape::Tape(bool higher_order) : higher_order_(higher_order), serial_(g_next_serial++) {}

Tensor Tape::push(std::string_view op, Shape shape, std::shared_ptr<const Array> data,
                  std::vector<Tensor> inputs, Backward backward) {
  Tensor out;
  out.shape_ = std::move(shape);
  out.data_ = std::move(data);
  out.tape_ = this;
  out.node_ = entries_.size();
  entries_.push_back(Entry{op, std::move(inputs), std::move(backward)});
  return out;
}

Tensor Tape::variable(const Tensor& value) {
  if (!value.defined()) throw std::invalid_argument("variable: undefined tensor");
  return push("variable", value.shape_, value.data_, {}, nullptr);
}

Tensor Tape::record(std::string_view op, Shape shape, Array value, std::vector<Tensor> inputs,
                    Backward backward) {
  require_finite(op, value);
  Tape* tape = nullptr;
  std::uint64_t taint = 0;
  for (const Tensor& in : inputs) {
    if (in.tape_ != nullptr) {
      if (tape != nullptr && tape != in.tape_) {
        throw std::logic_error(std::string(op) + ": inputs are recorded on different tapes");
      }
      tape = in.tape_;
    }
    if (taint == 0) taint = in.taint_;
  }
  auto data = std::make_shared<const Array>(std::move(value));
  if (tape == nullptr || !g_recording) {
    Tensor out;
    out.shape_ = std::move(shape);
    out.data_ = std::move(data);
    out.taint_ = taint;
    return out;
  }
  Tensor out = tape->push(op, std::move(shape), std::move(data), std::move(inputs), std::move(backward));
  out.taint_ = taint;
  return out;
}

std::vector<Tensor> Tape::gradient(const Tensor& scalar, std::span<const Tensor> wrt) {
  if (!scalar.defined() || scalar.numel() != 1) {
    throw ShapeError("backward: expected a one-element tensor, got shape " +
                     (scalar.defined() ? to_string(scalar.shape()) : std::string("<undefined>")));
  }
  if (scalar.taint_ == serial_) {
    throw std::logic_error(
        "backward: the scalar depends on gradients computed on a tape with higher_order disabled; "
        "re-record the computation on Tape(/*higher_order=*/true)");
  }
  for (const Tensor& w : wrt) {
    if (w.tape_ != nullptr && w.tape_ != this) {
      throw std::logic_error("backward: a requested leaf is recorded on a different tape");
    }
  }

  ++g_counters.backward_passes;
  if (higher_order_) ++g_counters.higher_order_passes;

  std::vector<Tensor> result(wrt.size());
  if (scalar.tape_ != this) {
    for (std::size_t k = 0; k < wrt.size(); ++k) result[k] = Tensor::zeros(wrt[k].shape());
    return result;
  }

  // Only nodes downstream of a requested leaf need adjoints.
  const std::size_t n = scalar.node_ + 1;
  std::vector<char> reach(n, 0);
  for (const Tensor& w : wrt) {
    if (w.tape_ == this && w.node_ < n) reach[w.node_] = 1;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (reach[i]) continue;
    for (const Tensor& in : entries_[i].inputs) {
      if (in.tape_ == this && reach[in.node_]) {
        reach[i] = 1;
        break;
      }
    }
  }

  std::optional<NoRecordGuard> guard;
  if (!higher_order_) guard.emplace();

  std::vector<Tensor> adjoint(n);
  adjoint[scalar.node_] = Tensor::ones(scalar.shape());
  for (std::size_t i = n; i-- > 0;) {
    if (!reach[i] || !adjoint[i].defined()) continue;
    const Entry& entry = entries_[i];
    if (!entry.backward) continue;
    std::vector<bool> needs(entry.inputs.size(), false);
    bool any = false;
    for (std::size_t k = 0; k < entry.inputs.size(); ++k) {
      const Tensor& in = entry.inputs[k];
      needs[k] = in.tape_ == this && reach[in.node_];
      any = any || needs[k];
    }
    if (!any) continue;
    std::vector<Tensor> grads = entry.backward(adjoint[i], needs);
    for (std::size_t k = 0; k < entry.inputs.size(); ++k) {
      if (!needs[k] || k >= grads.size() || !grads[k].defined()) continue;
      const Tensor& in = entry.inputs[k];
      if (grads[k].shape() != in.shape()) {
        throw std::logic_error(std::string(entry.op) + " backward: gradient shape " +
                               to_string(grads[k].shape()) + " does not match input " +
                               to_string(in.shape()));
      }
      Tensor& slot = adjoint[in.node_];
      slot = slot.defined() ? add(slot, grads[k]) : grads[k];
    }
  }

  for (std::size_t k = 0; k < wrt.size(); ++k) {
    const Tensor& w = wrt[k];
    if (w.tape_ == this && w.node_ < n && adjoint[w.node_].defined()) {
      result[k] = adjoint[w.node_];
    } else {
      result[k] = Tensor::zeros(w.shape());
    }
    if (!higher_order_) result[k].taint_ = serial_;
  }
  return result;
}

Tensor Tape::gradient(const Tensor& scalar, const Tensor& wrt) {
  return gradient(scalar, std::span<const Tensor>(&wrt, 1)).front();
}

std::vector<Tensor> Tape::grad_of_grad(const Tensor& outer, std::span<const Tensor> wrt) {
  if (!higher_order_) {
    throw std::logic_error(
        "grad_of_grad: tape was recorded with higher_order disabled; re-record the computation on "
        "Tape(/*higher_order=*/true)");
  }
  return gradient(outer, wrt);
}

}  // namespace flowreg
