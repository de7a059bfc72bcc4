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

#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "flowreg/attacks.hpp"
#include "flowreg/defenses.hpp"
#include "flowreg/ops.hpp"

namespace flowreg::oracle {

namespace {

constexpr double kStep = 1e-5;

Tensor with_value(const Tensor& t, Index i, double v) {
  Array a = t.array();
  a[i] = v;
  return Tensor(t.shape(), std::move(a));
}

double l2(const Tensor& t) { return t.array().matrix().norm(); }

Tensor distinct_values(const Shape& shape, std::mt19937_64& rng) {
  const Index n = numel(shape);
  std::vector<Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Index{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  std::uniform_real_distribution<double> jitter(-0.2, 0.2);
  Array a(n);
  for (Index i = 0; i < n; ++i) a[i] = (static_cast<double>(perm[static_cast<std::size_t>(i)]) + jitter(rng)) / n;
  return Tensor(shape, std::move(a));
}

IndexList random_index(Index count, Index range, std::mt19937_64& rng) {
  std::uniform_int_distribution<Index> pick(0, range - 1);
  auto idx = std::make_shared<std::vector<Index>>();
  for (Index i = 0; i < count; ++i) idx->push_back(pick(rng));
  return idx;
}

std::vector<Tensor> detach_all(const std::vector<Tensor>& ts) {
  std::vector<Tensor> out;
  for (const Tensor& t : ts) out.push_back(t.detach());
  return out;
}

// Gradient of s(x) = sum(fn(x) * r) at `at`, on a first-order tape.
std::vector<Tensor> first_gradient(const OpCase& c, const Tensor& r, const std::vector<Tensor>& at) {
  Tape tape(false);
  std::vector<Tensor> vars;
  for (const Tensor& t : at) vars.push_back(tape.variable(t));
  const Tensor s = sum(mul(c.fn(vars), r));
  return detach_all(tape.gradient(s, vars));
}

// Flow offset placing every sample 0.3 px inside its cell.
Tensor interior_flow(Index n, Index h, Index w, FlowUnits units) {
  Array a(n * h * w * 2);
  for (Index i = 0; i < a.size(); ++i) a[i] = 0.3 / pixels_per_unit(units, i % 2 == 0 ? h : w);
  return Tensor({n, h, w, 2}, std::move(a));
}

double warped_loss(const Network& net, const Tensor& x, std::span<const int> y, const Tensor& flow) {
  NoRecordGuard guard;
  return loss(net, net.parameters(), bilinear_warp(x, FlowField(flow)), y, Reduction::kSum).item();
}

Network random_net(const std::string& arch, Index size, Index channels, std::uint64_t seed) {
  return Network::build({arch, size, size, channels, 3, 1.0}, seed);
}

Tensor random_images(Index n, Index size, Index channels, std::mt19937_64& rng) {
  return random_tensor({n, size, size, channels}, rng, 0.0, 1.0);
}

}  // namespace

Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Array a(numel(shape));
  for (Index i = 0; i < a.size(); ++i) a[i] = dist(rng);
  return Tensor(shape, std::move(a));
}

Tensor random_off_zero(const Shape& shape, std::mt19937_64& rng, double gap) {
  std::uniform_real_distribution<double> mag(gap, 1.0);
  std::bernoulli_distribution sign(0.5);
  Array a(numel(shape));
  for (Index i = 0; i < a.size(); ++i) a[i] = sign(rng) ? mag(rng) : -mag(rng);
  return Tensor(shape, std::move(a));
}

std::vector<Tensor> central_difference(const ScalarFn& f, const std::vector<Tensor>& at, double h) {
  std::vector<Tensor> out;
  for (std::size_t k = 0; k < at.size(); ++k) {
    Array g(at[k].numel());
    for (Index i = 0; i < at[k].numel(); ++i) {
      std::vector<Tensor> plus = at, minus = at;
      plus[k] = with_value(at[k], i, at[k][i] + h);
      minus[k] = with_value(at[k], i, at[k][i] - h);
      g[i] = (f(plus) - f(minus)) / (2.0 * h);
    }
    out.emplace_back(at[k].shape(), std::move(g));
  }
  return out;
}

double relative_error(const Tensor& got, const Tensor& want, double floor) {
  if (got.shape() != want.shape()) return INFINITY;
  return (got.array() - want.array()).matrix().norm() / (l2(want) + floor);
}

double relative_error(const std::vector<Tensor>& got, const std::vector<Tensor>& want, double floor) {
  if (got.size() != want.size()) return INFINITY;
  double diff = 0.0, ref = 0.0;
  for (std::size_t k = 0; k < got.size(); ++k) {
    if (got[k].shape() != want[k].shape()) return INFINITY;
    diff += (got[k].array() - want[k].array()).square().sum();
    ref += want[k].array().square().sum();
  }
  return std::sqrt(diff) / (std::sqrt(ref) + floor);
}

std::vector<OpCase> primitive_cases(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto rt = [&](Shape s, double lo = -1.0, double hi = 1.0) { return random_tensor(std::move(s), rng, lo, hi); };
  auto oz = [&](Shape s) { return random_off_zero(std::move(s), rng); };
  std::vector<OpCase> cases;
  auto add_case = [&](std::string name, std::vector<Tensor> in, TensorFn fn) {
    cases.push_back({std::move(name), std::move(in), std::move(fn)});
  };
  using V = std::vector<Tensor>;

  add_case("add_broadcast", {rt({3, 4}), rt({4})}, [](const V& v) { return add(v[0], v[1]); });
  add_case("sub_broadcast", {rt({2, 3}), rt({2, 1})}, [](const V& v) { return sub(v[0], v[1]); });
  add_case("mul_broadcast", {rt({2, 3, 2}), rt({3, 1})}, [](const V& v) { return mul(v[0], v[1]); });
  add_case("div", {rt({2, 5}), rt({2, 5}, 0.5, 2.0)}, [](const V& v) { return div(v[0], v[1]); });
  add_case("div_scalar_denominator", {rt({6}), rt({}, 0.5, 2.0)}, [](const V& v) { return div(v[0], v[1]); });
  add_case("neg", {rt({7})}, [](const V& v) { return neg(v[0]); });
  add_case("scale", {rt({7})}, [](const V& v) { return scale(v[0], -1.7); });
  add_case("add_scalar", {rt({7})}, [](const V& v) { return add_scalar(v[0], 0.3); });
  add_case("exp", {rt({3, 3})}, [](const V& v) { return exp(v[0]); });
  add_case("log", {rt({3, 3}, 0.5, 2.0)}, [](const V& v) { return log(v[0]); });
  add_case("sqrt", {rt({3, 3}, 0.5, 2.0)}, [](const V& v) { return sqrt(v[0]); });
  add_case("sin", {rt({8})}, [](const V& v) { return sin(v[0]); });
  add_case("cos", {rt({8})}, [](const V& v) { return cos(v[0]); });
  add_case("square", {rt({8})}, [](const V& v) { return square(v[0]); });
  add_case("relu", {oz({10})}, [](const V& v) { return relu(v[0]); });
  add_case("abs", {oz({10})}, [](const V& v) { return abs(v[0]); });
  add_case("clip", {oz({10})}, [](const V& v) { return clip(v[0], -0.05, 0.05); });
  add_case("clip_inside", {rt({10}, -0.4, 0.4)}, [](const V& v) { return clip(v[0], -0.5, 0.5); });
  add_case("relu_square", {oz({10})}, [](const V& v) { return mul(relu(v[0]), v[0]); });
  add_case("broadcast_to", {rt({3, 1})}, [](const V& v) { return broadcast_to(v[0], {2, 3, 4}); });
  add_case("sum_to", {rt({2, 3, 4})}, [](const V& v) { return sum_to(v[0], {3, 1}); });
  add_case("sum", {rt({2, 5})}, [](const V& v) { return square(sum(v[0])); });
  add_case("mean", {rt({2, 5})}, [](const V& v) { return square(mean(v[0])); });
  add_case("sum_last", {rt({3, 4})}, [](const V& v) { return square(sum_last(v[0])); });
  add_case("max_last", {distinct_values({3, 5}, rng)}, [](const V& v) { return square(max_last(v[0])); });
  add_case("dot", {rt({6}), rt({6})}, [](const V& v) { return dot(v[0], v[1]); });
  add_case("norm", {rt({6})}, [](const V& v) { return norm(v[0]); });
  add_case("reshape", {rt({2, 6})}, [](const V& v) { return square(reshape(v[0], {3, 4})); });
  add_case("matmul", {rt({3, 4}), rt({4, 2})}, [](const V& v) { return matmul(v[0], v[1]); });
  add_case("matmul_ta", {rt({4, 3}), rt({4, 2})}, [](const V& v) { return matmul(v[0], v[1], true, false); });
  add_case("matmul_tb", {rt({3, 4}), rt({2, 4})}, [](const V& v) { return matmul(v[0], v[1], false, true); });
  add_case("matmul_tab", {rt({4, 3}), rt({2, 4})}, [](const V& v) { return matmul(v[0], v[1], true, true); });
  {
    const IndexList idx = random_index(12, 8, rng);
    add_case("gather", {rt({8})}, [idx](const V& v) { return square(gather(v[0], idx, {3, 4})); });
    add_case("scatter_add", {rt({12})}, [idx](const V& v) { return square(scatter_add(v[0], idx, {8})); });
  }
  add_case("log_softmax", {rt({3, 4}, -2.0, 2.0)}, [](const V& v) { return log_softmax(v[0]); });
  add_case("softmax", {rt({3, 4}, -2.0, 2.0)}, [](const V& v) { return softmax(v[0]); });
  {
    const std::vector<int> labels{2, 0, 3};
    add_case("softmax_cross_entropy_mean", {rt({3, 4}, -2.0, 2.0)},
             [labels](const V& v) { return softmax_cross_entropy(v[0], labels, Reduction::kMean); });
    add_case("softmax_cross_entropy_sum", {rt({3, 4}, -2.0, 2.0)},
             [labels](const V& v) { return softmax_cross_entropy(v[0], labels, Reduction::kSum); });
    add_case("pick", {rt({3, 4})}, [labels](const V& v) { return square(pick(v[0], labels)); });
  }
  add_case("conv2d_pad1", {rt({1, 4, 4, 2}), rt({3, 3, 2, 2})}, [](const V& v) { return conv2d(v[0], v[1], {1, 1}); });
  add_case("conv2d_stride2", {rt({2, 4, 4, 1}), rt({2, 2, 1, 3})}, [](const V& v) { return conv2d(v[0], v[1], {2, 0}); });
  add_case("conv2d_input_grad", {rt({1, 4, 4, 2}), rt({3, 3, 1, 2})},
           [](const V& v) { return conv2d_input_grad(v[0], v[1], {1, 4, 4, 1}, {1, 1}); });
  add_case("conv2d_weight_grad", {rt({1, 4, 4, 2}), rt({1, 4, 4, 3})},
           [](const V& v) { return conv2d_weight_grad(v[0], v[1], {3, 3, 2, 3}, {1, 1}); });
  add_case("avg_pool2d", {rt({1, 4, 4, 2})}, [](const V& v) { return square(avg_pool2d(v[0], 2)); });
  add_case("avg_pool2d_grad", {rt({1, 2, 2, 2})},
           [](const V& v) { return square(avg_pool2d_grad(v[0], {1, 4, 4, 2}, 2)); });
  add_case("max_pool2d", {distinct_values({1, 4, 4, 2}, rng)}, [](const V& v) { return square(max_pool2d(v[0], 2)); });
  add_case("bilinear_warp", {rt({1, 3, 3, 2}, 0.0, 1.0), interior_flow(1, 3, 3, FlowUnits::kNormalized)},
           [](const V& v) { return bilinear_warp(v[0], FlowField(v[1])); });
  return cases;
}

GradientCheck check_op(const OpCase& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  GradientCheck out{c.name, 0.0, 0.0};
  Tensor probe;
  {
    NoRecordGuard guard;
    probe = c.fn(c.inputs);
  }
  const Tensor r = random_tensor(probe.shape(), rng);
  std::vector<Tensor> u;
  for (const Tensor& t : c.inputs) u.push_back(random_tensor(t.shape(), rng));

  const ScalarFn s = [&](const std::vector<Tensor>& at) {
    NoRecordGuard guard;
    return sum(mul(c.fn(at), r)).item();
  };
  const std::vector<Tensor> exact = first_gradient(c, r, c.inputs);
  out.first_order = relative_error(exact, central_difference(s, c.inputs, kStep));

  // Hessian-vector product by double backprop.
  std::vector<Tensor> hvp;
  {
    Tape tape(true);
    std::vector<Tensor> vars;
    for (const Tensor& t : c.inputs) vars.push_back(tape.variable(t));
    const std::vector<Tensor> g = tape.gradient(sum(mul(c.fn(vars), r)), vars);
    Tensor inner = Tensor::scalar(0.0);
    for (std::size_t k = 0; k < g.size(); ++k) inner = add(inner, sum(mul(g[k], u[k])));
    hvp = detach_all(tape.grad_of_grad(inner, vars));
  }
  std::vector<Tensor> plus = c.inputs, minus = c.inputs;
  for (std::size_t k = 0; k < plus.size(); ++k) {
    plus[k] = Tensor(plus[k].shape(), plus[k].array() + kStep * u[k].array());
    minus[k] = Tensor(minus[k].shape(), minus[k].array() - kStep * u[k].array());
  }
  const std::vector<Tensor> gp = first_gradient(c, r, plus), gm = first_gradient(c, r, minus);
  std::vector<Tensor> fd;
  for (std::size_t k = 0; k < gp.size(); ++k) {
    fd.emplace_back(gp[k].shape(), (gp[k].array() - gm[k].array()) / (2.0 * kStep));
  }
  out.second_order = relative_error(hvp, fd);
  return out;
}

double warp_flow_gradient_error(const std::string& arch, Index size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Network net = random_net(arch, size, 1, seed);
  const Tensor x = random_images(2, size, 1, rng);
  const std::vector<int> y{0, 2};
  const Tensor v = interior_flow(2, size, size, FlowUnits::kNormalized);
  const Tensor exact = flow_gradient(net, x, y, FlowField(v));
  const ScalarFn f = [&](const std::vector<Tensor>& at) { return warped_loss(net, x, y, at[0]); };
  return relative_error(exact, central_difference(f, {v}, kStep)[0]);
}

double fgr_parameter_gradient_error(Index size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Network net = random_net("mlp-tiny", size, 1, seed);
  const Tensor x = random_images(3, size, 1, rng);
  const std::vector<int> y{0, 1, 2};
  const DefenseSpec spec = DefenseSpec::defaults(DefenseFamily::kFgr, 0.5);

  std::vector<Tensor> exact;
  {
    Tape tape(true);
    std::vector<Tensor> vars;
    for (const Tensor& p : net.parameters()) vars.push_back(tape.variable(p));
    const Tensor total = training_loss(net, vars, x, y, spec).total;
    exact = detach_all(tape.gradient(total, vars));
  }
  const ScalarFn f = [&](const std::vector<Tensor>& params) {
    Network probe = net;
    probe.set_parameters(params);
    return training_loss(probe, x, y, spec).item();
  };
  return relative_error(exact, central_difference(f, net.parameters(), kStep));
}

double fgr_hvp_fallback_error(Index size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Network net = random_net("mlp-tiny", size, 1, seed);
  const Tensor x = random_images(2, size, 1, rng);
  const std::vector<int> y{1, 2};
  const Tensor base = interior_flow(2, size, size, FlowUnits::kNormalized);

  // Exact: grad_theta of P = ||grad_v L||^2 by double backprop.
  std::vector<Tensor> exact;
  Tensor g;
  {
    Tape tape(true);
    std::vector<Tensor> vars;
    for (const Tensor& p : net.parameters()) vars.push_back(tape.variable(p));
    const Tensor v = tape.variable(base);
    const Tensor l = loss(net, vars, bilinear_warp(x, FlowField(v)), y, Reduction::kSum);
    const Tensor gv = tape.gradient(l, v);
    g = gv.detach();
    exact = detach_all(tape.grad_of_grad(sum(square(gv)), vars));
  }
  // Fallback: 2 (dg/dtheta)^T g from theta-gradients at base +- r g.
  const double gn = l2(g);
  const double r = kStep / std::max(gn, 1e-12);
  auto theta_grad = [&](double shift) {
    Tape tape(false);
    std::vector<Tensor> vars;
    for (const Tensor& p : net.parameters()) vars.push_back(tape.variable(p));
    const Tensor v(base.shape(), base.array() + shift * g.array());
    return detach_all(tape.gradient(loss(net, vars, bilinear_warp(x, FlowField(v)), y, Reduction::kSum), vars));
  };
  const std::vector<Tensor> gp = theta_grad(r), gm = theta_grad(-r);
  std::vector<Tensor> fd;
  for (std::size_t k = 0; k < gp.size(); ++k) fd.emplace_back(gp[k].shape(), (gp[k].array() - gm[k].array()) / r);
  return relative_error(exact, fd);
}

Eigen::MatrixXd dense_warp_jacobian(const Tensor& image, FlowUnits units) {
  const Tensor x = image.rank() == 3 ? reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)}) : image;
  const Index h = x.dim(1), w = x.dim(2), c = x.dim(3);
  constexpr double kShift = 1e-3;
  NoRecordGuard guard;
  Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(h * w * c, h * w * 2);
  const Tensor zero = Tensor::zeros({1, h, w, 2});
  const Array base = bilinear_warp(x, FlowField(zero, units)).array();
  for (Index col = 0; col < h * w * 2; ++col) {
    // Shift in flow units that moves the sample by kShift pixels.
    const double step = kShift / pixels_per_unit(units, col % 2 == 0 ? h : w);
    const Tensor v = with_value(zero, col, step);
    const Array moved = bilinear_warp(x, FlowField(v, units)).array();
    jac.col(col) = ((moved - base) / step).matrix();
  }
  return jac;
}

BoundChainSample bound_chain_sample(const Network& net, const Tensor& image, int label, std::mt19937_64& rng) {
  const Tensor x = image.rank() == 3 ? reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)}) : image;
  const std::vector<int> y{label};
  BoundChainSample s;
  const Tensor gv = flow_gradient(net, x, y, FlowField::identity_for(x));
  Tensor gx;
  {
    Tape tape(false);
    const Tensor xv = tape.variable(x);
    gx = tape.gradient(loss(net, net.parameters(), xv, y, Reduction::kSum), xv).detach();
  }
  const Eigen::MatrixXd jac = dense_warp_jacobian(x, FlowUnits::kNormalized);
  const Eigen::VectorXd contracted = jac.transpose() * gx.array().matrix();
  s.flow_grad_norm = l2(gv);
  s.contracted_norm = contracted.norm();
  s.input_grad_norm = l2(gx);
  s.jacobian_norm = Eigen::JacobiSVD<Eigen::MatrixXd>(jac).singularValues()(0);
  const Tensor dv = random_tensor(gv.shape(), rng);
  s.holder_lhs = std::abs((gv.array() * dv.array()).sum());
  s.holder_rhs = s.flow_grad_norm * l2(dv);
  s.lipschitz = estimate_lipschitz(std::span<const Tensor>(&x, 1)).value;
  return s;
}

// True when no hidden ReLU of mlp-tiny changes sign along v0 + s d, s in
// [0, t_max], sampled densely. Pre-activations are formed directly from the
// first dense layer's parameters.
bool hidden_pattern_constant(const Network& net, const Tensor& x, const Tensor& d, double t_max) {
  if (net.descriptor().name != "mlp-tiny") throw std::invalid_argument("kink check supports mlp-tiny only");
  NoRecordGuard guard;
  const Tensor& w = net.parameters()[0];
  const Tensor& b = net.parameters()[1];
  const Eigen::Map<const Eigen::MatrixXd> wm(w.data(), w.dim(1), w.dim(0));  // row-major [D, H] viewed as [H, D]
  const Eigen::Map<const Eigen::VectorXd> bv(b.data(), b.numel());
  auto pattern = [&](double s) {
    const Tensor xs = bilinear_warp(x, FlowField(Tensor(d.shape(), s * d.array())));
    const Eigen::Map<const Eigen::VectorXd> xv(xs.data(), xs.numel());
    return ((wm * xv + bv).array() > 0.0).eval();
  };
  const auto ref = pattern(0.0);
  constexpr int kSamples = 512;
  for (int i = 1; i <= kSamples; ++i)
    if ((pattern(t_max * i / kSamples) != ref).any()) return false;
  return true;
}

TaylorTrace taylor_trace(const Network& net, const Tensor& image, int label, std::mt19937_64& rng, double start,
                         double stop) {
  const Tensor x = image.rank() == 3 ? reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)}) : image;
  const std::vector<int> y{label};
  const Tensor v0 = FlowField::identity_for(x).values();
  const Tensor g = flow_gradient(net, x, y, FlowField(v0));
  // The warp's flow derivative at v0 is the forward difference, so the
  // expansion holds along non-negative directions.
  Tensor d = random_tensor(v0.shape(), rng, 0.0, 1.0);
  d = Tensor(d.shape(), d.array() / d.array().maxCoeff());
  const double slope = (g.array() * d.array()).sum();
  const double l0 = warped_loss(net, x, y, v0);
  TaylorTrace trace;
  trace.kink_free = hidden_pattern_constant(net, x, d, start);
  for (double t = start; t >= stop * (1.0 - 1e-12); t /= 2.0) {
    const double lt = warped_loss(net, x, y, Tensor(d.shape(), t * d.array()));
    trace.steps.push_back(t);
    trace.ratios.push_back(std::abs(lt - l0 - t * slope) / t);
  }
  return trace;
}

bool monotone_to_floor(const std::vector<double>& ratios, double floor) {
  bool reached = false;
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    if (reached) {
      if (ratios[i] > floor) return false;
      continue;
    }
    if (ratios[i] <= floor) {
      reached = true;
      continue;
    }
    if (i > 0 && !(ratios[i] < ratios[i - 1])) return false;
  }
  return true;
}

}  // namespace flowreg::oracle
