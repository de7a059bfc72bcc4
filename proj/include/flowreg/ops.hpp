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

#ifndef FLOWREG_OPS_HPP
#define FLOWREG_OPS_HPP

#include <memory>
#include <span>
#include <vector>

#include "flowreg/tensor.hpp"

// Differentiable primitives. Every backward rule is written in terms of these
// same primitives, so gradients recorded on a higher-order tape can be
// differentiated again.
//
// Non-smooth conventions: relu'(0) = 0, abs'(0) = 0, sign' = 0 everywhere,
// clip passes the gradient on the closed interval [lo, hi].

namespace flowreg {

// Binary elementwise ops broadcast NumPy-style (shapes aligned on the right).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double offset);

Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor sin(const Tensor& x);
Tensor cos(const Tensor& x);
Tensor square(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor sign(const Tensor& x);
Tensor clip(const Tensor& x, double lo, double hi);
/// Elementwise floor; constant (never recorded).
Tensor floor(const Tensor& x);

Shape broadcast_shape(const Shape& a, const Shape& b);
Tensor broadcast_to(const Tensor& x, const Shape& shape);
/// Sums broadcast axes away so the result has `shape` (inverse of broadcast_to).
Tensor sum_to(const Tensor& x, const Shape& shape);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Sum over the last axis, keeping it with size 1.
Tensor sum_last(const Tensor& x);
/// Max over the last axis, keeping it with size 1. Ties go to the first index.
Tensor max_last(const Tensor& x);
Tensor dot(const Tensor& a, const Tensor& b);
/// Euclidean norm of all entries; the gradient at zero is zero.
Tensor norm(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
/// Product of 2-D tensors, optionally transposing either operand.
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a = false, bool transpose_b = false);

using IndexList = std::shared_ptr<const std::vector<Index>>;
/// out.flat[i] = x.flat[index[i]], result reshaped to `shape`.
Tensor gather(const Tensor& x, IndexList index, Shape shape);
/// Adjoint of gather: out.flat[index[i]] += g.flat[i].
Tensor scatter_add(const Tensor& g, IndexList index, Shape shape);

Tensor log_softmax(const Tensor& logits);
Tensor softmax(const Tensor& logits);

enum class Reduction { kMean, kSum };
/// Softmax cross-entropy of [N, K] logits against integer labels.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels,
                             Reduction reduction = Reduction::kMean);

/// Picks logits[n, labels[n]] into an [N, 1] tensor.
Tensor pick(const Tensor& logits, std::span<const int> labels);

// Images are NHWC; convolution weights are [KH, KW, Cin, Cout].
struct ConvGeometry {
  Index stride = 1;
  Index pad = 0;
};
Shape conv2d_output_shape(const Shape& input, const Shape& weight, ConvGeometry geom);
Tensor conv2d(const Tensor& x, const Tensor& w, ConvGeometry geom = {});
Tensor conv2d_input_grad(const Tensor& g, const Tensor& w, const Shape& input_shape, ConvGeometry geom);
Tensor conv2d_weight_grad(const Tensor& x, const Tensor& g, const Shape& weight_shape, ConvGeometry geom);

/// Non-overlapping k x k average pooling; spatial dims must be divisible by k.
Tensor avg_pool2d(const Tensor& x, Index k);
Tensor avg_pool2d_grad(const Tensor& g, const Shape& input_shape, Index k);
/// Non-overlapping k x k max pooling (gathers the first maximum of each window).
Tensor max_pool2d(const Tensor& x, Index k);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& x) { return neg(x); }
inline Tensor operator*(double s, const Tensor& x) { return scale(x, s); }
inline Tensor operator*(const Tensor& x, double s) { return scale(x, s); }
inline Tensor operator+(const Tensor& x, double c) { return add_scalar(x, c); }
inline Tensor operator-(const Tensor& x, double c) { return add_scalar(x, -c); }
inline Tensor operator+(double c, const Tensor& x) { return add_scalar(x, c); }
inline Tensor operator-(double c, const Tensor& x) { return add_scalar(neg(x), c); }

}  // namespace flowreg

#endif  // FLOWREG_OPS_HPP
