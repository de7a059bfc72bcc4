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

#include "flowreg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace flowreg {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Needs = std::vector<bool>;
using Grads = std::vector<Tensor>;

Tensor constant(Shape shape, Array data) { return Tensor(std::move(shape), std::move(data)); }

Shape left_pad(const Shape& s, std::size_t rank) {
  Shape out(rank - s.size(), 1);
  out.insert(out.end(), s.begin(), s.end());
  return out;
}

// Row-major strides of `s` padded to `target`'s rank, zero on broadcast axes.
std::vector<Index> broadcast_strides(const Shape& s, const Shape& target) {
  const Shape padded = left_pad(s, target.size());
  std::vector<Index> strides(target.size(), 0);
  Index stride = 1;
  for (std::size_t i = target.size(); i-- > 0;) {
    strides[i] = padded[i] == 1 ? 0 : stride;
    stride *= padded[i];
  }
  return strides;
}

enum class Layout { kSame, kScalar, kSuffix, kPrefix, kGeneral };

// Classifies how `s` broadcasts into `target`.
Layout classify(const Shape& s, const Shape& target) {
  if (s == target) return Layout::kSame;
  if (numel(s) == 1) return Layout::kScalar;
  const Shape p = left_pad(s, target.size());
  std::size_t k = 0;
  while (k < p.size() && p[k] == 1) ++k;
  bool suffix = true;
  for (std::size_t i = k; i < p.size(); ++i) suffix = suffix && p[i] == target[i];
  if (suffix) return Layout::kSuffix;
  std::size_t j = p.size();
  while (j > 0 && p[j - 1] == 1) --j;
  bool prefix = true;
  for (std::size_t i = 0; i < j; ++i) prefix = prefix && p[i] == target[i];
  if (prefix) return Layout::kPrefix;
  return Layout::kGeneral;
}

template <typename Visit>
void odometer(const Shape& target, const std::vector<Index>& strides, Visit visit) {
  const std::size_t r = target.size();
  const Index n = numel(target);
  std::vector<Index> counter(r, 0);
  Index offset = 0;
  for (Index i = 0; i < n; ++i) {
    visit(i, offset);
    for (std::size_t ax = r; ax-- > 0;) {
      ++counter[ax];
      offset += strides[ax];
      if (counter[ax] < target[ax]) break;
      offset -= strides[ax] * counter[ax];
      counter[ax] = 0;
    }
  }
}

Array expand(const Tensor& x, const Shape& target) {
  const Index n = numel(target);
  switch (classify(x.shape(), target)) {
    case Layout::kSame:
      return x.array();
    case Layout::kScalar:
      return Array::Constant(n, x[0]);
    case Layout::kSuffix:
      return x.array().replicate(n / x.numel(), 1);
    case Layout::kPrefix: {
      const Index inner = n / x.numel();
      Array out(n);
      for (Index i = 0; i < x.numel(); ++i) out.segment(i * inner, inner).setConstant(x[i]);
      return out;
    }
    case Layout::kGeneral:
      break;
  }
  Array out(n);
  const double* src = x.data();
  odometer(target, broadcast_strides(x.shape(), target), [&](Index i, Index off) { out[i] = src[off]; });
  return out;
}

Array reduce(const Tensor& x, const Shape& target) {
  const Index n = numel(target);
  switch (classify(target, x.shape())) {
    case Layout::kSame:
      return x.array();
    case Layout::kScalar:
      return Array::Constant(1, x.array().sum());
    case Layout::kSuffix: {
      Eigen::Map<const Eigen::MatrixXd> m(x.data(), n, x.numel() / n);
      return m.rowwise().sum().array();
    }
    case Layout::kPrefix: {
      Eigen::Map<const Eigen::MatrixXd> m(x.data(), x.numel() / n, n);
      return m.colwise().sum().transpose().array();
    }
    case Layout::kGeneral:
      break;
  }
  Array out = Array::Zero(n);
  const double* src = x.data();
  odometer(x.shape(), broadcast_strides(target, x.shape()), [&](Index i, Index off) { out[off] += src[i]; });
  return out;
}

template <typename F>
Tensor unary(std::string_view op, const Tensor& x, F f, Tape::Backward backward) {
  Array v = f(x.array());
  return Tape::record(op, x.shape(), std::move(v), {x}, std::move(backward));
}

Tensor mask(const Tensor& x, auto predicate) {
  Array m(x.numel());
  for (Index i = 0; i < x.numel(); ++i) m[i] = predicate(x[i]) ? 1.0 : 0.0;
  return constant(x.shape(), std::move(m));
}

Shape keep_last_as_one(const Shape& s, std::string_view op) {
  if (s.empty()) throw ShapeError(std::string(op) + ": expected rank >= 1, got a scalar");
  Shape out = s;
  out.back() = 1;
  return out;
}

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  const Shape pa = left_pad(a, r), pb = left_pad(b, r);
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (pa[i] == pb[i] || pb[i] == 1) {
      out[i] = pa[i];
    } else if (pa[i] == 1) {
      out[i] = pb[i];
    } else {
      throw ShapeError("broadcast: incompatible shapes " + to_string(a) + " and " + to_string(b));
    }
  }
  return out;
}

Tensor broadcast_to(const Tensor& x, const Shape& shape) {
  if (broadcast_shape(x.shape(), shape) != shape) {
    throw ShapeError("broadcast_to: cannot broadcast " + to_string(x.shape()) + " to " + to_string(shape));
  }
  if (x.shape() == shape) return x;
  const Shape from = x.shape();
  return Tape::record("broadcast_to", shape, expand(x, shape), {x},
                      [from](const Tensor& g, const Needs&) { return Grads{sum_to(g, from)}; });
}

Tensor sum_to(const Tensor& x, const Shape& shape) {
  if (broadcast_shape(shape, x.shape()) != x.shape()) {
    throw ShapeError("sum_to: cannot reduce " + to_string(x.shape()) + " to " + to_string(shape));
  }
  if (x.shape() == shape) return x;
  const Shape from = x.shape();
  return Tape::record("sum_to", shape, reduce(x, shape), {x},
                      [from](const Tensor& g, const Needs&) { return Grads{broadcast_to(g, from)}; });
}

namespace {

Shape binary_shape(const char* op, const Tensor& a, const Tensor& b) {
  try {
    return broadcast_shape(a.shape(), b.shape());
  } catch (const ShapeError&) {
    throw ShapeError(std::string(op) + ": incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  const Shape out = binary_shape("add", a, b);
  Array v = a.shape() == b.shape() ? Array(a.array() + b.array()) : Array(expand(a, out) + expand(b, out));
  const Shape sa = a.shape(), sb = b.shape();
  return Tape::record("add", out, std::move(v), {a, b}, [sa, sb](const Tensor& g, const Needs& needs) {
    Grads grads(2);
    if (needs[0]) grads[0] = sum_to(g, sa);
    if (needs[1]) grads[1] = sum_to(g, sb);
    return grads;
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  const Shape out = binary_shape("sub", a, b);
  Array v = a.shape() == b.shape() ? Array(a.array() - b.array()) : Array(expand(a, out) - expand(b, out));
  const Shape sa = a.shape(), sb = b.shape();
  return Tape::record("sub", out, std::move(v), {a, b}, [sa, sb](const Tensor& g, const Needs& needs) {
    Grads grads(2);
    if (needs[0]) grads[0] = sum_to(g, sa);
    if (needs[1]) grads[1] = sum_to(neg(g), sb);
    return grads;
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const Shape out = binary_shape("mul", a, b);
  Array v = a.shape() == b.shape() ? Array(a.array() * b.array()) : Array(expand(a, out) * expand(b, out));
  return Tape::record("mul", out, std::move(v), {a, b}, [a, b](const Tensor& g, const Needs& needs) {
    Grads grads(2);
    if (needs[0]) grads[0] = sum_to(mul(g, b), a.shape());
    if (needs[1]) grads[1] = sum_to(mul(g, a), b.shape());
    return grads;
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  const Shape out = binary_shape("div", a, b);
  Array v = a.shape() == b.shape() ? Array(a.array() / b.array()) : Array(expand(a, out) / expand(b, out));
  return Tape::record("div", out, std::move(v), {a, b}, [a, b](const Tensor& g, const Needs& needs) {
    Grads grads(2);
    if (needs[0]) grads[0] = sum_to(div(g, b), a.shape());
    if (needs[1]) grads[1] = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape());
    return grads;
  });
}

Tensor neg(const Tensor& x) {
  return unary("neg", x, [](const Array& v) { return Array(-v); },
               [](const Tensor& g, const Needs&) { return Grads{neg(g)}; });
}

Tensor scale(const Tensor& x, double factor) {
  return unary("scale", x, [factor](const Array& v) { return Array(v * factor); },
               [factor](const Tensor& g, const Needs&) { return Grads{scale(g, factor)}; });
}

Tensor add_scalar(const Tensor& x, double offset) {
  return unary("add_scalar", x, [offset](const Array& v) { return Array(v + offset); },
               [](const Tensor& g, const Needs&) { return Grads{g}; });
}

Tensor exp(const Tensor& x) {
  Array v = x.array().exp();
  // The backward rule needs the output itself, which only exists after recording.
  auto out = std::make_shared<Tensor>();
  Tensor result = Tape::record("exp", x.shape(), std::move(v), {x}, [out](const Tensor& g, const Needs&) {
    return Grads{mul(g, *out)};
  });
  *out = result;
  return result;
}

Tensor log(const Tensor& x) {
  if ((x.array() <= 0.0).any()) throw NumericError("log: non-positive argument");
  return unary("log", x, [](const Array& v) { return Array(v.log()); },
               [x](const Tensor& g, const Needs&) { return Grads{div(g, x)}; });
}

Tensor sqrt(const Tensor& x) {
  if ((x.array() < 0.0).any()) throw NumericError("sqrt: negative argument");
  auto out = std::make_shared<Tensor>();
  Tensor result = Tape::record("sqrt", x.shape(), x.array().sqrt(), {x}, [out](const Tensor& g, const Needs&) {
    return Grads{div(scale(g, 0.5), *out)};
  });
  *out = result;
  return result;
}

Tensor sin(const Tensor& x) {
  return unary("sin", x, [](const Array& v) { return Array(v.sin()); },
               [x](const Tensor& g, const Needs&) { return Grads{mul(g, cos(x))}; });
}

Tensor cos(const Tensor& x) {
  return unary("cos", x, [](const Array& v) { return Array(v.cos()); },
               [x](const Tensor& g, const Needs&) { return Grads{neg(mul(g, sin(x)))}; });
}

Tensor square(const Tensor& x) {
  return unary("square", x, [](const Array& v) { return Array(v.square()); },
               [x](const Tensor& g, const Needs&) { return Grads{mul(g, scale(x, 2.0))}; });
}

Tensor relu(const Tensor& x) {
  return unary("relu", x, [](const Array& v) { return Array(v.max(0.0)); },
               [x](const Tensor& g, const Needs&) { return Grads{mul(g, mask(x, [](double v) { return v > 0.0; }))}; });
}

Tensor abs(const Tensor& x) {
  return unary("abs", x, [](const Array& v) { return Array(v.abs()); },
               [x](const Tensor& g, const Needs&) { return Grads{mul(g, sign(x))}; });
}

Tensor sign(const Tensor& x) {
  Array v(x.numel());
  for (Index i = 0; i < x.numel(); ++i) v[i] = x[i] > 0.0 ? 1.0 : (x[i] < 0.0 ? -1.0 : 0.0);
  return constant(x.shape(), std::move(v));
}

Tensor clip(const Tensor& x, double lo, double hi) {
  if (lo > hi) throw std::invalid_argument("clip: lower bound exceeds upper bound");
  return unary("clip", x, [lo, hi](const Array& v) { return Array(v.max(lo).min(hi)); },
               [x, lo, hi](const Tensor& g, const Needs&) {
                 return Grads{mul(g, mask(x, [lo, hi](double v) { return v >= lo && v <= hi; }))};
               });
}

Tensor floor(const Tensor& x) { return constant(x.shape(), x.array().floor()); }

Tensor sum(const Tensor& x) {
  const Shape from = x.shape();
  return Tape::record("sum", {}, Array::Constant(1, x.array().sum()), {x},
                      [from](const Tensor& g, const Needs&) { return Grads{broadcast_to(g, from)}; });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor sum_last(const Tensor& x) { return sum_to(x, keep_last_as_one(x.shape(), "sum_last")); }

Tensor max_last(const Tensor& x) {
  const Shape out = keep_last_as_one(x.shape(), "max_last");
  const Index k = x.shape().back();
  if (k == 0) throw ShapeError("max_last: empty last axis");
  const Index rows = x.numel() / k;
  auto index = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(rows));
  for (Index r = 0; r < rows; ++r) {
    Index best = 0;
    for (Index j = 1; j < k; ++j) {
      if (x[r * k + j] > x[r * k + best]) best = j;
    }
    (*index)[static_cast<std::size_t>(r)] = r * k + best;
  }
  return gather(x, std::move(index), out);
}

Tensor dot(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("dot: shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) + " differ");
  }
  return sum(mul(a, b));
}

Tensor norm(const Tensor& x) {
  const double value = std::sqrt(x.array().square().sum());
  auto out = std::make_shared<Tensor>();
  Tensor result = Tape::record("norm", {}, Array::Constant(1, value), {x}, [x, out](const Tensor& g, const Needs&) {
    if (out->item() == 0.0) return Grads{Tensor::zeros(x.shape())};
    return Grads{mul(g, div(x, *out))};
  });
  *out = result;
  return result;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  const Shape from = x.shape();
  return Tape::record("reshape", std::move(shape), x.array(), {x},
                      [from](const Tensor& g, const Needs&) { return Grads{reshape(g, from)}; });
}

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a, bool transpose_b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul: expected 2-D operands, got " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  Eigen::Map<const RowMatrix> ma(a.data(), a.dim(0), a.dim(1));
  Eigen::Map<const RowMatrix> mb(b.data(), b.dim(0), b.dim(1));
  const Index rows = transpose_a ? ma.cols() : ma.rows();
  const Index inner_a = transpose_a ? ma.rows() : ma.cols();
  const Index inner_b = transpose_b ? mb.cols() : mb.rows();
  const Index cols = transpose_b ? mb.rows() : mb.cols();
  if (inner_a != inner_b) {
    throw ShapeError("matmul: inner dimensions differ for " + to_string(a.shape()) +
                     (transpose_a ? "^T" : "") + " x " + to_string(b.shape()) + (transpose_b ? "^T" : ""));
  }
  Array v(rows * cols);
  Eigen::Map<RowMatrix> mc(v.data(), rows, cols);
  if (!transpose_a && !transpose_b) {
    mc.noalias() = ma * mb;
  } else if (transpose_a && !transpose_b) {
    mc.noalias() = ma.transpose() * mb;
  } else if (!transpose_a && transpose_b) {
    mc.noalias() = ma * mb.transpose();
  } else {
    mc.noalias() = ma.transpose() * mb.transpose();
  }
  return Tape::record("matmul", {rows, cols}, std::move(v), {a, b},
                      [a, b, transpose_a, transpose_b](const Tensor& g, const Needs& needs) {
                        Grads grads(2);
                        if (needs[0]) {
                          grads[0] = transpose_a ? matmul(b, g, transpose_b, true) : matmul(g, b, false, !transpose_b);
                        }
                        if (needs[1]) {
                          grads[1] = transpose_b ? matmul(g, a, true, transpose_a) : matmul(a, g, !transpose_a, false);
                        }
                        return grads;
                      });
}

Tensor gather(const Tensor& x, IndexList index, Shape shape) {
  const Index n = static_cast<Index>(index->size());
  if (numel(shape) != n) {
    throw ShapeError("gather: " + std::to_string(n) + " indices cannot fill shape " + to_string(shape));
  }
  Array v(n);
  const double* src = x.data();
  for (Index i = 0; i < n; ++i) {
    const Index j = (*index)[static_cast<std::size_t>(i)];
    if (j < 0 || j >= x.numel()) throw ShapeError("gather: index out of range for " + to_string(x.shape()));
    v[i] = src[j];
  }
  const Shape from = x.shape();
  return Tape::record("gather", std::move(shape), std::move(v), {x}, [index, from](const Tensor& g, const Needs&) {
    return Grads{scatter_add(g, index, from)};
  });
}

Tensor scatter_add(const Tensor& g, IndexList index, Shape shape) {
  const Index n = static_cast<Index>(index->size());
  if (g.numel() != n) {
    throw ShapeError("scatter_add: " + std::to_string(n) + " indices for tensor " + to_string(g.shape()));
  }
  const Index m = numel(shape);
  Array v = Array::Zero(m);
  for (Index i = 0; i < n; ++i) {
    const Index j = (*index)[static_cast<std::size_t>(i)];
    if (j < 0 || j >= m) throw ShapeError("scatter_add: index out of range for " + to_string(shape));
    v[j] += g[i];
  }
  const Shape from = g.shape();
  return Tape::record("scatter_add", std::move(shape), std::move(v), {g}, [index, from](const Tensor& gg, const Needs&) {
    return Grads{gather(gg, index, from)};
  });
}

Tensor log_softmax(const Tensor& logits) {
  keep_last_as_one(logits.shape(), "log_softmax");
  const Index k = logits.shape().back();
  const Index rows = k == 0 ? 0 : logits.numel() / k;
  Array v(logits.numel());
  for (Index r = 0; r < rows; ++r) {
    auto row = logits.array().segment(r * k, k);
    const double m = row.maxCoeff();
    const double lse = m + std::log((row - m).exp().sum());
    v.segment(r * k, k) = row - lse;
  }
  auto out = std::make_shared<Tensor>();
  Tensor result = Tape::record("log_softmax", logits.shape(), std::move(v), {logits},
                               [out](const Tensor& g, const Needs&) {
                                 return Grads{sub(g, mul(exp(*out), sum_last(g)))};
                               });
  *out = result;
  return result;
}

Tensor softmax(const Tensor& logits) { return exp(log_softmax(logits)); }

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels, Reduction reduction) {
  if (logits.rank() != 2) {
    throw ShapeError("softmax_cross_entropy: expected [N, K] logits, got " + to_string(logits.shape()));
  }
  const Index n = logits.dim(0), k = logits.dim(1);
  if (static_cast<Index>(labels.size()) != n) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                     to_string(logits.shape()));
  }
  Array onehot = Array::Zero(n * k);
  for (Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= k) {
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(y) + " outside [0, " +
                              std::to_string(k) + ")");
    }
    onehot[i * k + y] = 1.0;
  }
  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    auto row = logits.array().segment(i * k, k);
    const double m = row.maxCoeff();
    const double lse = m + std::log((row - m).exp().sum());
    total += lse - row[labels[static_cast<std::size_t>(i)]];
  }
  const double factor = reduction == Reduction::kMean && n > 0 ? 1.0 / static_cast<double>(n) : 1.0;
  Tensor target = constant(logits.shape(), std::move(onehot));
  return Tape::record("softmax_cross_entropy", {}, Array::Constant(1, total * factor), {logits},
                      [logits, target, factor](const Tensor& g, const Needs&) {
                        return Grads{mul(scale(g, factor), sub(softmax(logits), target))};
                      });
}

Tensor pick(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || static_cast<Index>(labels.size()) != logits.dim(0)) {
    throw ShapeError("pick: labels do not match logits " + to_string(logits.shape()));
  }
  const Index n = logits.dim(0), k = logits.dim(1);
  auto index = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= k) throw std::out_of_range("pick: label " + std::to_string(y) + " out of range");
    (*index)[static_cast<std::size_t>(i)] = i * k + y;
  }
  return gather(logits, std::move(index), {n, 1});
}

}  // namespace flowreg
