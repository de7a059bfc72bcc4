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

#include "flowreg/nets.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace flowreg {

namespace {

using namespace layers;

const std::vector<std::string> kArchitectures{"mlp-tiny", "cnn-mini", "vgg11", "resnet18"};

// Builds the layer list while tracking the activation shape [H, W, C] (or [D]
// once flattened) so inconsistent descriptors fail early.
class Builder {
 public:
  Builder(Shape input, std::mt19937_64& rng, std::vector<Tensor>& params)
      : shape_(std::move(input)), rng_(rng), params_(params) {}

  Conv conv(Index kernel, Index out, Index stride = 1) {
    require_spatial("conv");
    const Index pad = kernel / 2;
    Conv c{kernel, shape_[2], out, stride, pad, 0, 0};
    c.weight = add_param({kernel, kernel, c.in_channels, out}, kernel * kernel * c.in_channels);
    c.bias = add_param({out}, 0);
    const Shape next = conv2d_output_shape({1, shape_[0], shape_[1], shape_[2]}, {kernel, kernel, c.in_channels, out},
                                           {stride, pad});
    shape_ = {next[1], next[2], next[3]};
    return c;
  }

  void push_conv(std::vector<Layer>& stack, Index kernel, Index out, Index stride = 1) {
    stack.emplace_back(conv(kernel, out, stride));
  }

  void dense(std::vector<Layer>& stack, Index out) {
    if (shape_.size() != 1) throw ShapeError("dense layer requires a flattened input");
    Dense d{shape_[0], out, 0, 0};
    d.weight = add_param({d.in, out}, d.in);
    d.bias = add_param({out}, 0);
    shape_ = {out};
    stack.emplace_back(d);
  }

  void pool(std::vector<Layer>& stack, Index window, bool max) {
    require_spatial("pool");
    if (shape_[0] % window != 0 || shape_[1] % window != 0) {
      throw ShapeError("pooling window " + std::to_string(window) + " does not divide activation " + to_string(shape_));
    }
    shape_ = {shape_[0] / window, shape_[1] / window, shape_[2]};
    if (max) {
      stack.emplace_back(MaxPool{window});
    } else {
      stack.emplace_back(AvgPool{window});
    }
  }

  void flatten(std::vector<Layer>& stack) {
    shape_ = {numel(shape_)};
    stack.emplace_back(Flatten{});
  }

  void residual(std::vector<Layer>& stack, Index out, Index stride) {
    const Shape in = shape_;
    Residual block{conv(3, out, stride), Conv{}, std::nullopt};
    block.second = conv(3, out, 1);
    if (stride != 1 || in[2] != out) {
      const Shape after = shape_;
      shape_ = in;
      block.shortcut = conv(1, out, stride);
      shape_ = after;
    }
    stack.emplace_back(block);
  }

  const Shape& shape() const { return shape_; }

 private:
  void require_spatial(const char* what) const {
    if (shape_.size() != 3) throw ShapeError(std::string(what) + " layer requires an [H, W, C] activation");
  }

  std::size_t add_param(Shape shape, Index fan_in) {
    const Index n = numel(shape);
    Array values = Array::Zero(n);
    if (fan_in > 0) {
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (Index i = 0; i < n; ++i) values[i] = dist(rng_);
    }
    params_.emplace_back(std::move(shape), std::move(values));
    return params_.size() - 1;
  }

  Shape shape_;
  std::mt19937_64& rng_;
  std::vector<Tensor>& params_;
};

Index scaled(Index base, double multiplier) {
  return std::max<Index>(1, static_cast<Index>(std::llround(static_cast<double>(base) * multiplier)));
}

Tensor apply_conv(const Conv& c, const Tensor& x, std::span<const Tensor> p) {
  return add(conv2d(x, p[c.weight], {c.stride, c.pad}), p[c.bias]);
}

}  // namespace

std::span<const std::string> architecture_names() { return kArchitectures; }

Network Network::build(const ArchDescriptor& desc, std::uint64_t seed) {
  if (std::find(kArchitectures.begin(), kArchitectures.end(), desc.name) == kArchitectures.end()) {
    std::string valid;
    for (const auto& n : kArchitectures) valid += (valid.empty() ? "" : ", ") + n;
    throw std::invalid_argument("unknown architecture '" + desc.name + "' (valid: " + valid + ")");
  }
  if (desc.height < 1 || desc.width < 1 || desc.channels < 1 || desc.num_classes < 2 || !(desc.width_multiplier > 0.0)) {
    throw std::invalid_argument("invalid architecture descriptor for " + desc.name);
  }
  Network net;
  net.desc_ = desc;
  std::mt19937_64 rng(seed);
  Builder b({desc.height, desc.width, desc.channels}, rng, net.params_);
  auto& stack = net.layers_;
  const double wm = desc.width_multiplier;
  const Index k = desc.num_classes;

  if (desc.name == "mlp-tiny") {
    b.flatten(stack);
    b.dense(stack, 16);
    stack.emplace_back(Relu{});
    b.dense(stack, k);
  } else if (desc.name == "cnn-mini") {
    b.push_conv(stack, 3, scaled(8, wm));
    stack.emplace_back(Relu{});
    b.pool(stack, 2, false);
    b.push_conv(stack, 3, scaled(16, wm));
    stack.emplace_back(Relu{});
    b.pool(stack, 2, false);
    b.flatten(stack);
    b.dense(stack, scaled(32, wm));
    stack.emplace_back(Relu{});
    b.dense(stack, k);
  } else if (desc.name == "vgg11") {
    // 8 conv + 3 dense; 'M' marks 2x2 max pooling.
    const std::vector<Index> cfg{64, 0, 128, 0, 256, 256, 0, 512, 512, 0, 512, 512, 0};
    for (Index c : cfg) {
      if (c == 0) {
        b.pool(stack, 2, true);
      } else {
        b.push_conv(stack, 3, scaled(c, wm));
        stack.emplace_back(Relu{});
      }
    }
    b.flatten(stack);
    b.dense(stack, scaled(512, wm));
    stack.emplace_back(Relu{});
    b.dense(stack, scaled(512, wm));
    stack.emplace_back(Relu{});
    b.dense(stack, k);
  } else {
    // resnet18: stem + 4 stages of 2 basic blocks + dense = 18 weight layers.
    b.push_conv(stack, 3, scaled(64, wm));
    stack.emplace_back(Relu{});
    const Index widths[] = {64, 128, 256, 512};
    for (int stage = 0; stage < 4; ++stage) {
      b.residual(stack, scaled(widths[stage], wm), stage == 0 ? 1 : 2);
      b.residual(stack, scaled(widths[stage], wm), 1);
    }
    if (b.shape()[0] != b.shape()[1]) throw ShapeError("resnet18 requires square inputs");
    b.pool(stack, b.shape()[0], false);
    b.flatten(stack);
    b.dense(stack, k);
  }
  return net;
}

Tensor Network::forward(const Tensor& x, std::span<const Tensor> p) const {
  if (p.size() != params_.size()) {
    throw std::invalid_argument("forward: expected " + std::to_string(params_.size()) + " parameter tensors, got " +
                                std::to_string(p.size()));
  }
  const Shape expected{x.rank() == 4 ? x.dim(0) : -1, desc_.height, desc_.width, desc_.channels};
  if (x.rank() != 4 || x.shape() != expected) {
    throw ShapeError("forward: input " + to_string(x.shape()) + " does not match " + desc_.name + " input [N, " +
                     std::to_string(desc_.height) + ", " + std::to_string(desc_.width) + ", " +
                     std::to_string(desc_.channels) + "]");
  }
  Tensor h = x;
  for (const Layer& layer : layers_) {
    h = std::visit(
        [&](const auto& l) -> Tensor {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, Conv>) {
            return apply_conv(l, h, p);
          } else if constexpr (std::is_same_v<T, Dense>) {
            return add(matmul(h, p[l.weight]), p[l.bias]);
          } else if constexpr (std::is_same_v<T, Relu>) {
            return relu(h);
          } else if constexpr (std::is_same_v<T, AvgPool>) {
            return avg_pool2d(h, l.window);
          } else if constexpr (std::is_same_v<T, MaxPool>) {
            return max_pool2d(h, l.window);
          } else if constexpr (std::is_same_v<T, Flatten>) {
            return reshape(h, {h.dim(0), h.numel() / h.dim(0)});
          } else {
            const Tensor branch = apply_conv(l.second, relu(apply_conv(l.first, h, p)), p);
            const Tensor skip = l.shortcut ? apply_conv(*l.shortcut, h, p) : h;
            return relu(add(branch, skip));
          }
        },
        layer);
  }
  return h;
}

void Network::set_parameters(std::vector<Tensor> params) {
  if (params.size() != params_.size()) throw std::invalid_argument("set_parameters: parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != params_[i].shape()) {
      throw ShapeError("set_parameters: parameter " + std::to_string(i) + " has shape " + to_string(params[i].shape()) +
                       ", expected " + to_string(params_[i].shape()));
    }
    params[i] = params[i].detach();
  }
  params_ = std::move(params);
}

Index Network::parameter_count() const {
  Index n = 0;
  for (const Tensor& p : params_) n += p.numel();
  return n;
}

Tensor loss(const Network& net, const Tensor& x, std::span<const int> labels) {
  return loss(net, net.parameters(), x, labels);
}

Tensor loss(const Network& net, std::span<const Tensor> params, const Tensor& x, std::span<const int> labels,
            Reduction reduction) {
  return softmax_cross_entropy(net.forward(x, params), labels, reduction);
}

std::vector<int> argmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("argmax_rows: expected [N, K], got " + to_string(logits.shape()));
  const Index n = logits.dim(0), k = logits.dim(1);
  std::vector<int> out(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    Index best = 0;
    for (Index j = 1; j < k; ++j) {
      if (logits[i * k + j] > logits[i * k + best]) best = j;
    }
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

std::vector<int> predict(const Network& net, const Tensor& x) { return argmax_rows(net.forward(x)); }

}  // namespace flowreg
