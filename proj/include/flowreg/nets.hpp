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

#ifndef FLOWREG_NETS_HPP
#define FLOWREG_NETS_HPP

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "flowreg/ops.hpp"
#include "flowreg/tensor.hpp"

namespace flowreg {

struct ArchDescriptor {
  std::string name;  // mlp-tiny, cnn-mini, vgg11 or resnet18
  Index height = 0;
  Index width = 0;
  Index channels = 0;
  int num_classes = 0;
  double width_multiplier = 1.0;

  bool operator==(const ArchDescriptor&) const = default;
};

std::span<const std::string> architecture_names();

namespace layers {

struct Conv {
  Index kernel, in_channels, out_channels, stride, pad;
  std::size_t weight, bias;  // parameter slots
};
struct Dense {
  Index in, out;
  std::size_t weight, bias;
};
struct Relu {};
struct AvgPool {
  Index window;
};
struct MaxPool {
  Index window;
};
struct Flatten {};
/// relu(second(relu(first(x))) + shortcut(x)); identity shortcut when absent.
struct Residual {
  Conv first, second;
  std::optional<Conv> shortcut;
};

using Layer = std::variant<Conv, Dense, Relu, AvgPool, MaxPool, Flatten, Residual>;

}  // namespace layers

/**
 * A feed-forward layer stack over NHWC inputs producing [N, num_classes]
 * logits. Parameters are plain tensors held by the network; forward() can be
 * given a substitute parameter list (e.g. tape variables) of the same layout.
 */
class Network {
 public:
  /// Kaiming-uniform weights (bound sqrt(6 / fan_in)) and zero biases, drawn
  /// deterministically from `seed`.
  static Network build(const ArchDescriptor& desc, std::uint64_t seed);

  Tensor forward(const Tensor& x) const { return forward(x, params_); }
  Tensor forward(const Tensor& x, std::span<const Tensor> params) const;

  const ArchDescriptor& descriptor() const noexcept { return desc_; }
  const std::vector<Tensor>& parameters() const noexcept { return params_; }
  /// Replaces all parameters; shapes must match the architecture.
  void set_parameters(std::vector<Tensor> params);
  Index parameter_count() const;
  const std::vector<layers::Layer>& layer_stack() const noexcept { return layers_; }
  Shape input_shape() const { return {desc_.height, desc_.width, desc_.channels}; }

 private:
  Network() = default;

  ArchDescriptor desc_;
  std::vector<layers::Layer> layers_;
  std::vector<Tensor> params_;
};

/// Mean softmax cross-entropy of the network on a labelled batch.
Tensor loss(const Network& net, const Tensor& x, std::span<const int> labels);
Tensor loss(const Network& net, std::span<const Tensor> params, const Tensor& x, std::span<const int> labels,
            Reduction reduction = Reduction::kMean);

std::vector<int> predict(const Network& net, const Tensor& x);
std::vector<int> argmax_rows(const Tensor& logits);

}  // namespace flowreg

#endif  // FLOWREG_NETS_HPP
