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

#ifndef FLOWREG_WARP_HPP
#define FLOWREG_WARP_HPP

#include <cstddef>
#include <span>
#include <string>
#include <utility>

#include "flowreg/tensor.hpp"

namespace flowreg {

/// Units of a flow displacement. Normalized units span [-1, 1] along each
/// image axis, so one unit is extent/2 pixels.
enum class FlowUnits { kNormalized, kPixels };

FlowUnits parse_flow_units(const std::string& name);
std::string to_string(FlowUnits units);

/// Pixels per flow unit along an axis of `extent` pixels.
double pixels_per_unit(FlowUnits units, Index extent);

/// Row-major pixel grid; pixel i sits at (m_i, n_i) = (i / width, i % width).
struct Grid {
  Index height = 0;
  Index width = 0;

  Index size() const { return height * width; }
  std::pair<Index, Index> coordinate(Index i) const { return {i / width, i % width}; }
};

/**
 * Per-pixel displacements for a batch of images, stored as [N, H, W, 2].
 * Component 0 displaces along rows (m), component 1 along columns (n).
 */
class FlowField {
 public:
  explicit FlowField(Tensor values, FlowUnits units = FlowUnits::kNormalized);

  /// The zero flow v0, for which the warp returns its input unchanged.
  static FlowField identity(Index batch, Index height, Index width, FlowUnits units = FlowUnits::kNormalized);
  static FlowField identity_for(const Tensor& images, FlowUnits units = FlowUnits::kNormalized);

  const Tensor& values() const noexcept { return values_; }
  FlowUnits units() const noexcept { return units_; }
  Index batch() const { return values_.dim(0); }
  Index height() const { return values_.dim(1); }
  Index width() const { return values_.dim(2); }
  Grid grid() const { return {height(), width()}; }

 private:
  Tensor values_;
  FlowUnits units_;
};

/**
 * Bilinear resampling of NHWC `images` at the displaced grid g + v.
 *
 * Each output pixel is sum_q x_q (1 - |m' - m_q|)(1 - |n' - n_q|) over the four
 * neighbours q of the displaced location. Sample coordinates are clamped to the
 * image rectangle, and the neighbourhood is anchored at floor(m'), floor(n'), so
 * at exact grid points the flow derivative is the forward difference. Built
 * from recorded primitives; differentiable (to any order) in image and flow.
 */
Tensor bilinear_warp(const Tensor& images, const FlowField& flow);

/// d x'_{b,m,n,c} / d v_{b,m,n,k} for every pixel, as [N, H, W, C, 2].
Tensor warp_flow_jacobian(const Tensor& images, const FlowField& flow);

struct LipschitzEstimate {
  double value = 0.0;
  std::string norm_kind = "spectral";
  std::size_t sample_count = 0;
};

/// Spectral norm of the warp Jacobian at the identity flow for one image
/// ([H, W, C] or [1, H, W, C]), by power iteration on its 2x2 diagonal blocks.
double warp_jacobian_spectral_norm(const Tensor& image, FlowUnits units = FlowUnits::kNormalized);

/// Max of warp_jacobian_spectral_norm over all images; a rank-4 entry counts as
/// a batch of images. Throws on an empty list or mismatched shapes.
LipschitzEstimate estimate_lipschitz(std::span<const Tensor> images, FlowUnits units = FlowUnits::kNormalized);

}  // namespace flowreg

#endif  // FLOWREG_WARP_HPP
