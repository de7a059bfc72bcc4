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

#include <string>

#include "flowreg/ops.hpp"

namespace flowreg {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Needs = std::vector<bool>;
using Grads = std::vector<Tensor>;

struct ConvDims {
  Index n, h, w, cin, kh, kw, cout, oh, ow, stride, pad;
};

ConvDims conv_dims(const Shape& input, const Shape& weight, ConvGeometry geom, std::string_view op) {
  if (input.size() != 4 || weight.size() != 4) {
    throw ShapeError(std::string(op) + ": expected NHWC input and [KH, KW, Cin, Cout] weight, got " +
                     to_string(input) + " and " + to_string(weight));
  }
  if (input[3] != weight[2]) {
    throw ShapeError(std::string(op) + ": input channels of " + to_string(input) + " do not match weight " +
                     to_string(weight));
  }
  if (geom.stride < 1 || geom.pad < 0) throw ShapeError(std::string(op) + ": invalid stride or padding");
  ConvDims d{input[0], input[1], input[2], input[3], weight[0], weight[1], weight[3], 0, 0, geom.stride, geom.pad};
  const Index span_h = d.h + 2 * d.pad - d.kh;
  const Index span_w = d.w + 2 * d.pad - d.kw;
  if (span_h < 0 || span_w < 0) {
    throw ShapeError(std::string(op) + ": kernel " + to_string(weight) + " larger than padded input " +
                     to_string(input));
  }
  d.oh = span_h / d.stride + 1;
  d.ow = span_w / d.stride + 1;
  return d;
}

// Rows are output positions (n, oy, ox); columns are (ky, kx, c).
RowMatrix im2col(const Tensor& x, const ConvDims& d) {
  RowMatrix cols = RowMatrix::Zero(d.n * d.oh * d.ow, d.kh * d.kw * d.cin);
  const double* src = x.data();
  for (Index b = 0; b < d.n; ++b) {
    for (Index oy = 0; oy < d.oh; ++oy) {
      for (Index ox = 0; ox < d.ow; ++ox) {
        double* row = cols.row((b * d.oh + oy) * d.ow + ox).data();
        for (Index ky = 0; ky < d.kh; ++ky) {
          const Index iy = oy * d.stride - d.pad + ky;
          if (iy < 0 || iy >= d.h) continue;
          for (Index kx = 0; kx < d.kw; ++kx) {
            const Index ix = ox * d.stride - d.pad + kx;
            if (ix < 0 || ix >= d.w) continue;
            const double* pixel = src + ((b * d.h + iy) * d.w + ix) * d.cin;
            std::copy(pixel, pixel + d.cin, row + (ky * d.kw + kx) * d.cin);
          }
        }
      }
    }
  }
  return cols;
}

Array col2im(const RowMatrix& cols, const ConvDims& d) {
  Array out = Array::Zero(d.n * d.h * d.w * d.cin);
  for (Index b = 0; b < d.n; ++b) {
    for (Index oy = 0; oy < d.oh; ++oy) {
      for (Index ox = 0; ox < d.ow; ++ox) {
        const double* row = cols.row((b * d.oh + oy) * d.ow + ox).data();
        for (Index ky = 0; ky < d.kh; ++ky) {
          const Index iy = oy * d.stride - d.pad + ky;
          if (iy < 0 || iy >= d.h) continue;
          for (Index kx = 0; kx < d.kw; ++kx) {
            const Index ix = ox * d.stride - d.pad + kx;
            if (ix < 0 || ix >= d.w) continue;
            double* pixel = out.data() + ((b * d.h + iy) * d.w + ix) * d.cin;
            const double* src = row + (ky * d.kw + kx) * d.cin;
            for (Index c = 0; c < d.cin; ++c) pixel[c] += src[c];
          }
        }
      }
    }
  }
  return out;
}

void check_grad_shape(const Tensor& g, const ConvDims& d, std::string_view op) {
  const Shape expected{d.n, d.oh, d.ow, d.cout};
  if (g.shape() != expected) {
    throw ShapeError(std::string(op) + ": output gradient " + to_string(g.shape()) + " does not match " +
                     to_string(expected));
  }
}

struct PoolDims {
  Index n, h, w, c, k;
};

PoolDims pool_dims(const Shape& s, Index k, std::string_view op) {
  if (s.size() != 4 || k < 1 || s[1] % k != 0 || s[2] % k != 0) {
    throw ShapeError(std::string(op) + ": input " + to_string(s) + " is not NHWC divisible by window " +
                     std::to_string(k));
  }
  return {s[0], s[1], s[2], s[3], k};
}

}  // namespace

Shape conv2d_output_shape(const Shape& input, const Shape& weight, ConvGeometry geom) {
  const ConvDims d = conv_dims(input, weight, geom, "conv2d");
  return {d.n, d.oh, d.ow, d.cout};
}

Tensor conv2d(const Tensor& x, const Tensor& w, ConvGeometry geom) {
  const ConvDims d = conv_dims(x.shape(), w.shape(), geom, "conv2d");
  const RowMatrix cols = im2col(x, d);
  Eigen::Map<const RowMatrix> wm(w.data(), d.kh * d.kw * d.cin, d.cout);
  Array v(d.n * d.oh * d.ow * d.cout);
  Eigen::Map<RowMatrix>(v.data(), cols.rows(), d.cout).noalias() = cols * wm;
  return Tape::record("conv2d", {d.n, d.oh, d.ow, d.cout}, std::move(v), {x, w},
                      [x, w, geom](const Tensor& g, const Needs& needs) {
                        Grads grads(2);
                        if (needs[0]) grads[0] = conv2d_input_grad(g, w, x.shape(), geom);
                        if (needs[1]) grads[1] = conv2d_weight_grad(x, g, w.shape(), geom);
                        return grads;
                      });
}

Tensor conv2d_input_grad(const Tensor& g, const Tensor& w, const Shape& input_shape, ConvGeometry geom) {
  const ConvDims d = conv_dims(input_shape, w.shape(), geom, "conv2d_input_grad");
  check_grad_shape(g, d, "conv2d_input_grad");
  Eigen::Map<const RowMatrix> gm(g.data(), d.n * d.oh * d.ow, d.cout);
  Eigen::Map<const RowMatrix> wm(w.data(), d.kh * d.kw * d.cin, d.cout);
  const RowMatrix cols = gm * wm.transpose();
  return Tape::record("conv2d_input_grad", input_shape, col2im(cols, d), {g, w},
                      [g, w, geom](const Tensor& gz, const Needs& needs) {
                        Grads grads(2);
                        if (needs[0]) grads[0] = conv2d(gz, w, geom);
                        if (needs[1]) grads[1] = conv2d_weight_grad(gz, g, w.shape(), geom);
                        return grads;
                      });
}

Tensor conv2d_weight_grad(const Tensor& x, const Tensor& g, const Shape& weight_shape, ConvGeometry geom) {
  const ConvDims d = conv_dims(x.shape(), weight_shape, geom, "conv2d_weight_grad");
  check_grad_shape(g, d, "conv2d_weight_grad");
  const RowMatrix cols = im2col(x, d);
  Eigen::Map<const RowMatrix> gm(g.data(), d.n * d.oh * d.ow, d.cout);
  Array v(d.kh * d.kw * d.cin * d.cout);
  Eigen::Map<RowMatrix>(v.data(), d.kh * d.kw * d.cin, d.cout).noalias() = cols.transpose() * gm;
  return Tape::record("conv2d_weight_grad", weight_shape, std::move(v), {x, g},
                      [x, g, geom](const Tensor& gz, const Needs& needs) {
                        Grads grads(2);
                        if (needs[0]) grads[0] = conv2d_input_grad(g, gz, x.shape(), geom);
                        if (needs[1]) grads[1] = conv2d(x, gz, geom);
                        return grads;
                      });
}

Tensor avg_pool2d(const Tensor& x, Index k) {
  const PoolDims d = pool_dims(x.shape(), k, "avg_pool2d");
  const Index oh = d.h / k, ow = d.w / k;
  Array v = Array::Zero(d.n * oh * ow * d.c);
  const double inv = 1.0 / static_cast<double>(k * k);
  for (Index b = 0; b < d.n; ++b)
    for (Index y = 0; y < d.h; ++y)
      for (Index xx = 0; xx < d.w; ++xx) {
        const double* src = x.data() + ((b * d.h + y) * d.w + xx) * d.c;
        double* dst = v.data() + ((b * oh + y / k) * ow + xx / k) * d.c;
        for (Index c = 0; c < d.c; ++c) dst[c] += src[c] * inv;
      }
  const Shape from = x.shape();
  return Tape::record("avg_pool2d", {d.n, oh, ow, d.c}, std::move(v), {x}, [from, k](const Tensor& g, const Needs&) {
    return Grads{avg_pool2d_grad(g, from, k)};
  });
}

Tensor avg_pool2d_grad(const Tensor& g, const Shape& input_shape, Index k) {
  const PoolDims d = pool_dims(input_shape, k, "avg_pool2d_grad");
  const Index oh = d.h / k, ow = d.w / k;
  if (g.shape() != Shape{d.n, oh, ow, d.c}) {
    throw ShapeError("avg_pool2d_grad: gradient " + to_string(g.shape()) + " does not match input " +
                     to_string(input_shape));
  }
  Array v(numel(input_shape));
  const double inv = 1.0 / static_cast<double>(k * k);
  for (Index b = 0; b < d.n; ++b)
    for (Index y = 0; y < d.h; ++y)
      for (Index xx = 0; xx < d.w; ++xx) {
        const double* src = g.data() + ((b * oh + y / k) * ow + xx / k) * d.c;
        double* dst = v.data() + ((b * d.h + y) * d.w + xx) * d.c;
        for (Index c = 0; c < d.c; ++c) dst[c] = src[c] * inv;
      }
  return Tape::record("avg_pool2d_grad", input_shape, std::move(v), {g}, [k](const Tensor& gz, const Needs&) {
    return Grads{avg_pool2d(gz, k)};
  });
}

Tensor max_pool2d(const Tensor& x, Index k) {
  const PoolDims d = pool_dims(x.shape(), k, "max_pool2d");
  const Index oh = d.h / k, ow = d.w / k;
  auto index = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(d.n * oh * ow * d.c));
  std::size_t slot = 0;
  for (Index b = 0; b < d.n; ++b)
    for (Index oy = 0; oy < oh; ++oy)
      for (Index ox = 0; ox < ow; ++ox)
        for (Index c = 0; c < d.c; ++c) {
          Index best = -1;
          for (Index ky = 0; ky < k; ++ky)
            for (Index kx = 0; kx < k; ++kx) {
              const Index at = ((b * d.h + oy * k + ky) * d.w + ox * k + kx) * d.c + c;
              if (best < 0 || x[at] > x[best]) best = at;
            }
          (*index)[slot++] = best;
        }
  return gather(x, std::move(index), {d.n, oh, ow, d.c});
}

}  // namespace flowreg
