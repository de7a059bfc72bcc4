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

#include "flowreg/warp.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "flowreg/ops.hpp"

namespace flowreg {

namespace {

void check_pair(const Tensor& images, const FlowField& flow, std::string_view op) {
  if (images.rank() != 4) {
    throw ShapeError(std::string(op) + ": expected NHWC images, got " + to_string(images.shape()));
  }
  const Shape expected{images.dim(0), images.dim(1), images.dim(2), 2};
  if (flow.values().shape() != expected) {
    throw ShapeError(std::string(op) + ": flow " + to_string(flow.values().shape()) + " does not match images " +
                     to_string(images.shape()) + " (expected " + to_string(expected) + ")");
  }
}

// Bilinear sample location of every pixel after clamping.
struct Samples {
  Index n, h, w;
  std::vector<Index> m0, n0, m1, n1;
  std::vector<double> a, b;            // fractional offsets along m and n
  std::vector<double> mask_m, mask_n;  // 1 where the clamp passes the derivative
};

Samples locate(const Tensor& flow, FlowUnits units) {
  Samples s;
  s.n = flow.dim(0);
  s.h = flow.dim(1);
  s.w = flow.dim(2);
  const double sm = pixels_per_unit(units, s.h), sn = pixels_per_unit(units, s.w);
  const std::size_t count = static_cast<std::size_t>(s.n * s.h * s.w);
  for (auto* v : {&s.m0, &s.n0, &s.m1, &s.n1}) v->resize(count);
  for (auto* v : {&s.a, &s.b, &s.mask_m, &s.mask_n}) v->resize(count);
  const double top = static_cast<double>(s.h - 1), right = static_cast<double>(s.w - 1);
  std::size_t p = 0;
  for (Index b = 0; b < s.n; ++b)
    for (Index i = 0; i < s.h; ++i)
      for (Index j = 0; j < s.w; ++j, ++p) {
        const double m = flow[2 * static_cast<Index>(p)] * sm + static_cast<double>(i);
        const double n = flow[2 * static_cast<Index>(p) + 1] * sn + static_cast<double>(j);
        const double mc = std::clamp(m, 0.0, top), nc = std::clamp(n, 0.0, right);
        s.mask_m[p] = (m >= 0.0 && m <= top) ? 1.0 : 0.0;
        s.mask_n[p] = (n >= 0.0 && n <= right) ? 1.0 : 0.0;
        const double fm = std::floor(mc), fn = std::floor(nc);
        s.m0[p] = static_cast<Index>(fm);
        s.n0[p] = static_cast<Index>(fn);
        s.m1[p] = std::min(s.m0[p] + 1, s.h - 1);
        s.n1[p] = std::min(s.n0[p] + 1, s.w - 1);
        s.a[p] = mc - fm;
        s.b[p] = nc - fn;
      }
  return s;
}

IndexList component(const Shape& flow_shape, Index k) {
  const Index pixels = flow_shape[0] * flow_shape[1] * flow_shape[2];
  auto index = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(pixels));
  for (Index p = 0; p < pixels; ++p) (*index)[static_cast<std::size_t>(p)] = 2 * p + k;
  return index;
}

IndexList neighbour(const Samples& s, Index channels, const std::vector<Index>& rows, const std::vector<Index>& cols) {
  auto index = std::make_shared<std::vector<Index>>(rows.size() * static_cast<std::size_t>(channels));
  std::size_t slot = 0;
  for (std::size_t p = 0; p < rows.size(); ++p) {
    const Index b = static_cast<Index>(p) / (s.h * s.w);
    const Index base = ((b * s.h + rows[p]) * s.w + cols[p]) * channels;
    for (Index c = 0; c < channels; ++c) (*index)[slot++] = base + c;
  }
  return index;
}

Tensor coordinate_grid(Index n, Index h, Index w, bool rows) {
  Array v(n * h * w);
  Index p = 0;
  for (Index b = 0; b < n; ++b)
    for (Index i = 0; i < h; ++i)
      for (Index j = 0; j < w; ++j) v[p++] = static_cast<double>(rows ? i : j);
  return Tensor({n, h, w, 1}, std::move(v));
}

}  // namespace

FlowUnits parse_flow_units(const std::string& name) {
  if (name == "normalized") return FlowUnits::kNormalized;
  if (name == "pixels") return FlowUnits::kPixels;
  throw std::invalid_argument("unknown flow units '" + name + "' (expected normalized or pixels)");
}

std::string to_string(FlowUnits units) { return units == FlowUnits::kNormalized ? "normalized" : "pixels"; }

double pixels_per_unit(FlowUnits units, Index extent) {
  return units == FlowUnits::kNormalized ? static_cast<double>(extent) / 2.0 : 1.0;
}

FlowField::FlowField(Tensor values, FlowUnits units) : values_(std::move(values)), units_(units) {
  if (values_.rank() != 4 || values_.dim(3) != 2) {
    throw ShapeError("flow field: expected [N, H, W, 2], got " + to_string(values_.shape()));
  }
}

FlowField FlowField::identity(Index batch, Index height, Index width, FlowUnits units) {
  return FlowField(Tensor::zeros({batch, height, width, 2}), units);
}

FlowField FlowField::identity_for(const Tensor& images, FlowUnits units) {
  if (images.rank() != 4) throw ShapeError("flow field: expected NHWC images, got " + to_string(images.shape()));
  return identity(images.dim(0), images.dim(1), images.dim(2), units);
}

Tensor bilinear_warp(const Tensor& images, const FlowField& flow) {
  check_pair(images, flow, "bilinear_warp");
  const Tensor& v = flow.values();
  const Samples s = locate(v, flow.units());
  const Index channels = images.dim(3);
  const Shape pixel_shape{s.n, s.h, s.w, 1};

  const double sm = pixels_per_unit(flow.units(), s.h), sn = pixels_per_unit(flow.units(), s.w);
  const Tensor m = add(scale(gather(v, component(v.shape(), 0), pixel_shape), sm), coordinate_grid(s.n, s.h, s.w, true));
  const Tensor n = add(scale(gather(v, component(v.shape(), 1), pixel_shape), sn), coordinate_grid(s.n, s.h, s.w, false));
  const Tensor mc = clip(m, 0.0, static_cast<double>(s.h - 1));
  const Tensor nc = clip(n, 0.0, static_cast<double>(s.w - 1));
  const Tensor a = sub(mc, floor(mc));
  const Tensor b = sub(nc, floor(nc));

  const Tensor one_minus_a = 1.0 - a;
  const Tensor one_minus_b = 1.0 - b;
  const Tensor w00 = mul(one_minus_a, one_minus_b);
  const Tensor w01 = mul(one_minus_a, b);
  const Tensor w10 = mul(a, one_minus_b);
  const Tensor w11 = mul(a, b);

  const Shape& shape = images.shape();
  const Tensor x00 = gather(images, neighbour(s, channels, s.m0, s.n0), shape);
  const Tensor x01 = gather(images, neighbour(s, channels, s.m0, s.n1), shape);
  const Tensor x10 = gather(images, neighbour(s, channels, s.m1, s.n0), shape);
  const Tensor x11 = gather(images, neighbour(s, channels, s.m1, s.n1), shape);

  return add(add(add(mul(x00, w00), mul(x01, w01)), mul(x10, w10)), mul(x11, w11));
}

Tensor warp_flow_jacobian(const Tensor& images, const FlowField& flow) {
  check_pair(images, flow, "warp_flow_jacobian");
  const Samples s = locate(flow.values(), flow.units());
  const Index channels = images.dim(3);
  const double sm = pixels_per_unit(flow.units(), s.h), sn = pixels_per_unit(flow.units(), s.w);
  Array out(images.numel() * 2);
  auto pixel = [&](Index b, Index i, Index j, Index c) { return images[((b * s.h + i) * s.w + j) * channels + c]; };
  for (std::size_t p = 0; p < s.a.size(); ++p) {
    const Index b = static_cast<Index>(p) / (s.h * s.w);
    const double a = s.a[p], bb = s.b[p];
    const double oa = 1.0 - a, ob = 1.0 - bb;
    for (Index c = 0; c < channels; ++c) {
      const double x00 = pixel(b, s.m0[p], s.n0[p], c), x01 = pixel(b, s.m0[p], s.n1[p], c);
      const double x10 = pixel(b, s.m1[p], s.n0[p], c), x11 = pixel(b, s.m1[p], s.n1[p], c);
      // Same association order as the recorded warp, so both routes agree bit for bit.
      const double da = (x11 * bb + x10 * ob) + -(x01 * bb + x00 * ob);
      const double db = (x11 * a + x01 * oa) + -(x10 * a + x00 * oa);
      const Index at = (static_cast<Index>(p) * channels + c) * 2;
      out[at] = (da * s.mask_m[p]) * sm;
      out[at + 1] = (db * s.mask_n[p]) * sn;
    }
  }
  Shape shape = images.shape();
  shape.push_back(2);
  return Tensor(std::move(shape), std::move(out));
}

double warp_jacobian_spectral_norm(const Tensor& image, FlowUnits units) {
  Tensor batch = image;
  if (image.rank() == 3) batch = reshape(image.detach(), {1, image.dim(0), image.dim(1), image.dim(2)});
  if (batch.rank() != 4 || batch.dim(0) != 1) {
    throw ShapeError("warp_jacobian_spectral_norm: expected one [H, W, C] image, got " + to_string(image.shape()));
  }
  const Tensor jac = warp_flow_jacobian(batch.detach(), FlowField::identity_for(batch, units));
  const Index channels = batch.dim(3);
  const Index pixels = batch.dim(1) * batch.dim(2);

  // The Jacobian is block diagonal with one C x 2 block per pixel, so its
  // spectral norm is the largest block norm. Each block is handled by power
  // iteration on the 2 x 2 Gram matrix, from two starts so that neither
  // eigenvector can be missed.
  double best = 0.0;
  for (Index p = 0; p < pixels; ++p) {
    Eigen::Matrix2d gram = Eigen::Matrix2d::Zero();
    for (Index c = 0; c < channels; ++c) {
      const Eigen::Vector2d row(jac[(p * channels + c) * 2], jac[(p * channels + c) * 2 + 1]);
      gram += row * row.transpose();
    }
    if (gram.trace() == 0.0) continue;
    for (const Eigen::Vector2d& start : {Eigen::Vector2d(1.0, 0.0), Eigen::Vector2d(0.0, 1.0)}) {
      Eigen::Vector2d u = start;
      double lambda = 0.0;
      for (int it = 0; it < 1000; ++it) {
        Eigen::Vector2d next = gram * u;
        const double len = next.norm();
        if (len == 0.0) break;
        next /= len;
        const double rayleigh = next.dot(gram * next);
        const bool settled = it >= 30 && std::abs(rayleigh - lambda) <= 1e-15 * std::abs(rayleigh);
        lambda = rayleigh;
        u = next;
        if (settled) break;
      }
      best = std::max(best, std::sqrt(std::max(lambda, 0.0)));
    }
  }
  return best;
}

LipschitzEstimate estimate_lipschitz(std::span<const Tensor> images, FlowUnits units) {
  if (images.empty()) throw std::invalid_argument("estimate_lipschitz: empty image list");
  LipschitzEstimate estimate;
  Shape reference;
  for (const Tensor& entry : images) {
    Shape single = entry.shape();
    if (entry.rank() == 4) single.erase(single.begin());
    if (single.size() != 3) throw ShapeError("estimate_lipschitz: bad image shape " + to_string(entry.shape()));
    if (reference.empty()) reference = single;
    if (single != reference) {
      throw ShapeError("estimate_lipschitz: image shape " + to_string(single) + " differs from " + to_string(reference));
    }
    const Index count = entry.rank() == 4 ? entry.dim(0) : 1;
    const Index stride = numel(single);
    for (Index k = 0; k < count; ++k) {
      Tensor one(single, entry.array().segment(k * stride, stride));
      estimate.value = std::max(estimate.value, warp_jacobian_spectral_norm(one, units));
      ++estimate.sample_count;
    }
  }
  return estimate;
}

}  // namespace flowreg
