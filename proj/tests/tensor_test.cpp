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

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "flowreg/nets.hpp"
#include "flowreg/ops.hpp"
#include "oracles.hpp"

namespace flowreg {
namespace {

using oracle::kFirstOrderTol;
using oracle::kSecondOrderTol;

TEST(TensorTest, ShapeAndDataAgree) {
  const Tensor t = Tensor::zeros({2, 3, 4});
  EXPECT_EQ(t.numel(), 24);
  EXPECT_EQ(t.dim(-1), 4);
  EXPECT_THROW(Tensor({2, 2}, Array::Zero(5)), ShapeError);
}

TEST(TensorTest, NonFiniteValuesAreRejected) {
  EXPECT_THROW(Tensor::from({1}, {std::nan("")}), NumericError);
  EXPECT_THROW(exp(Tensor::from({1}, {1000.0})), NumericError);
  EXPECT_THROW(log(Tensor::from({1}, {0.0})), NumericError);
}

TEST(OpsTest, ReluMatmulAndCrossEntropyExamples) {
  const Tensor r = relu(Tensor::from({3}, {-1.0, 0.0, 2.0}));
  EXPECT_EQ(r[0], 0.0);
  EXPECT_EQ(r[1], 0.0);
  EXPECT_EQ(r[2], 2.0);

  const Tensor m = matmul(Tensor::ones({2, 3}), Tensor::ones({3, 1}));
  ASSERT_EQ(m.shape(), (Shape{2, 1}));
  EXPECT_EQ(m[0], 3.0);
  EXPECT_EQ(m[1], 3.0);

  const int label = 0;
  const Tensor ce = softmax_cross_entropy(Tensor::zeros({1, 2}), std::span<const int>(&label, 1));
  EXPECT_NEAR(ce.item(), std::log(2.0), 1e-15);
}

TEST(OpsTest, ShapeErrorsNameTheOperation) {
  try {
    add(Tensor::zeros({2, 3}), Tensor::zeros({4}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("add"), std::string::npos);
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos);
    EXPECT_NE(msg.find("[4]"), std::string::npos);
  }
  EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
  EXPECT_THROW(conv2d(Tensor::zeros({1, 4, 4, 2}), Tensor::zeros({3, 3, 1, 2})), ShapeError);
}

TEST(OpsTest, SignOfZeroIsZero) {
  const Tensor s = sign(Tensor::from({3}, {-0.5, 0.0, 2.0}));
  EXPECT_EQ(s[0], -1.0);
  EXPECT_EQ(s[1], 0.0);
  EXPECT_EQ(s[2], 1.0);
}

TEST(BackwardTest, SumGivesOnes) {
  Tape tape;
  const Tensor x = tape.variable(Tensor::from({2, 2}, {1, -2, 3, 0.5}));
  const Tensor g = tape.gradient(sum(x), x);
  for (Index i = 0; i < 4; ++i) EXPECT_EQ(g[i], 1.0);
}

TEST(BackwardTest, SumOfSquares) {
  Tape tape;
  const Tensor x = tape.variable(Tensor::from({3}, {1, 2, 3}));
  const Tensor g = tape.gradient(sum(mul(x, x)), x);
  EXPECT_EQ(g[0], 2.0);
  EXPECT_EQ(g[1], 4.0);
  EXPECT_EQ(g[2], 6.0);
}

TEST(BackwardTest, SoftmaxCrossEntropyWeightGradientMatchesDifferences) {
  std::mt19937_64 rng(7);
  const Tensor w0 = oracle::random_tensor({4, 3}, rng);
  const Tensor x = oracle::random_tensor({5, 4}, rng);
  const std::vector<int> y{0, 2, 1, 1, 0};
  Tape tape;
  const Tensor w = tape.variable(w0);
  const Tensor g = tape.gradient(softmax_cross_entropy(matmul(x, w), y), w);
  const auto fd = oracle::central_difference(
      [&](const std::vector<Tensor>& at) { return softmax_cross_entropy(matmul(x, at[0]), y).item(); }, {w0}, 1e-5);
  EXPECT_LT(oracle::relative_error(g, fd[0]), 1e-6);
}

TEST(BackwardTest, NonScalarIsAnError) {
  Tape tape;
  const Tensor x = tape.variable(Tensor::ones({3}));
  EXPECT_THROW(tape.gradient(mul(x, x), x), ShapeError);
}

TEST(BackwardTest, DisconnectedLeafGetsZeros) {
  Tape tape;
  const Tensor x = tape.variable(Tensor::ones({3}));
  const Tensor z = tape.variable(Tensor::ones({2, 2}));
  const std::vector<Tensor> g = tape.gradient(sum(x), std::vector<Tensor>{x, z});
  EXPECT_EQ(g[1].shape(), (Shape{2, 2}));
  EXPECT_EQ(g[1].array().abs().sum(), 0.0);
}

TEST(BackwardTest, IsDeterministic) {
  std::mt19937_64 rng(3);
  const Network net = Network::build({"cnn-mini", 8, 8, 1, 3, 1.0}, 5);
  const Tensor x = oracle::random_tensor({4, 8, 8, 1}, rng, 0.0, 1.0);
  const std::vector<int> y{0, 1, 2, 0};
  auto run = [&] {
    Tape tape;
    std::vector<Tensor> vars;
    for (const Tensor& p : net.parameters()) vars.push_back(tape.variable(p));
    return tape.gradient(loss(net, vars, x, y), vars);
  };
  const auto a = run(), b = run();
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_TRUE((a[k].array() == b[k].array()).all());
}

TEST(BackwardTest, SubgradientConventionsAtKinks) {
  Tape tape;
  const Tensor x = tape.variable(Tensor::from({3}, {0.0, 0.0, 0.0}));
  const auto g = tape.gradient(add(add(sum(relu(x)), sum(abs(x))), sum(sign(x))), x);
  // relu'(0) = 0 agrees with the left one-sided difference; abs'(0) = 0; sign' = 0.
  const double h = 1e-5;
  const double left = (relu(Tensor::scalar(0.0)).item() - relu(Tensor::scalar(-h)).item()) / h;
  EXPECT_EQ(left, 0.0);
  for (Index i = 0; i < 3; ++i) EXPECT_EQ(g[i], 0.0);
}

TEST(BackwardTest, CountsPasses) {
  const auto before = autodiff_counters();
  Tape first;
  const Tensor x = first.variable(Tensor::ones({2}));
  first.gradient(sum(x), x);
  Tape second(true);
  const Tensor y = second.variable(Tensor::ones({2}));
  second.gradient(sum(y), y);
  EXPECT_EQ(autodiff_counters().backward_passes, before.backward_passes + 2);
  EXPECT_EQ(autodiff_counters().higher_order_passes, before.higher_order_passes + 1);
}

TEST(GradOfGradTest, LinearScalar) {
  const double theta0 = 1.7;
  Tape tape(true);
  const Tensor theta = tape.variable(Tensor::scalar(theta0));
  const Tensor x = tape.variable(Tensor::scalar(0.4));
  const Tensor dx = tape.gradient(mul(theta, x), x);
  const Tensor outer = mul(dx, dx);
  EXPECT_DOUBLE_EQ(outer.item(), theta0 * theta0);
  EXPECT_DOUBLE_EQ(tape.grad_of_grad(outer, std::vector<Tensor>{theta})[0].item(), 2.0 * theta0);
}

TEST(GradOfGradTest, SineMatchesSymbolicDerivative) {
  for (const auto [t0, x0] : {std::pair{0.8, 1.3}, std::pair{-1.1, 0.25}, std::pair{2.0, -0.7}}) {
    Tape tape(true);
    const Tensor theta = tape.variable(Tensor::scalar(t0));
    const Tensor x = tape.variable(Tensor::scalar(x0));
    const Tensor dx = tape.gradient(sin(mul(theta, x)), x);
    const Tensor outer = square(dx);
    const double got = tape.grad_of_grad(outer, std::vector<Tensor>{theta})[0].item();
    // d/dtheta [theta^2 cos^2(theta x)] = 2 theta cos^2(theta x) - 2 theta^2 x cos(theta x) sin(theta x)
    const double c = std::cos(t0 * x0), s = std::sin(t0 * x0);
    const double want = 2.0 * t0 * c * c - 2.0 * t0 * t0 * x0 * c * s;
    EXPECT_NEAR(outer.item(), t0 * t0 * c * c, 1e-12);
    EXPECT_NEAR(got, want, 1e-8);
  }
}

TEST(GradOfGradTest, ConstantInInputGivesZero) {
  Tape tape(true);
  const Tensor theta = tape.variable(Tensor::from({2}, {0.3, -0.2}));
  const Tensor x = tape.variable(Tensor::from({1, 2}, {0.5, 0.1}));
  // Output ignores x entirely.
  const Tensor out = add(sum(mul(theta, theta)), mul(sum(x), Tensor::scalar(0.0)));
  const Tensor gx = tape.gradient(out, x);
  const Tensor outer = sum(square(gx));
  EXPECT_EQ(outer.item(), 0.0);
  const Tensor gt = tape.grad_of_grad(outer, std::vector<Tensor>{theta})[0];
  EXPECT_EQ(gt.array().abs().sum(), 0.0);
}

TEST(GradOfGradTest, RequiresHigherOrderTape) {
  Tape tape(false);
  const Tensor x = tape.variable(Tensor::from({2}, {1.0, 2.0}));
  const Tensor g = tape.gradient(sum(square(x)), x);
  try {
    tape.grad_of_grad(sum(square(g)), std::vector<Tensor>{x});
    FAIL() << "expected an error";
  } catch (const std::logic_error& e) {
    EXPECT_NE(std::string(e.what()).find("re-record"), std::string::npos);
  }
  EXPECT_THROW(tape.gradient(sum(square(g)), x), std::logic_error);
}

TEST(GradOfGradTest, QuadraticHvpEqualsExplicitHessian) {
  // f(x) = x^T A x + b^T x has Hessian A + A^T.
  std::mt19937_64 rng(11);
  const Tensor a = oracle::random_tensor({3, 3}, rng);
  const Tensor b = oracle::random_tensor({3, 1}, rng);
  const Tensor u = oracle::random_tensor({3, 1}, rng);
  Tape tape(true);
  const Tensor x = tape.variable(oracle::random_tensor({3, 1}, rng));
  const Tensor f = add(sum(mul(x, matmul(a, x))), sum(mul(b, x)));
  const Tensor g = tape.gradient(f, x);
  const Tensor hv = tape.grad_of_grad(sum(mul(g, u)), std::vector<Tensor>{x})[0];
  Eigen::Matrix3d am;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) am(i, j) = a[i * 3 + j];
  const Eigen::Vector3d want = (am + am.transpose()) * Eigen::Vector3d(u[0], u[1], u[2]);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(hv[i], want(i), 1e-14);
}

class PrimitiveGradientTest : public ::testing::TestWithParam<std::size_t> {};

TEST_P(PrimitiveGradientTest, MatchesFiniteDifferences) {
  const auto cases = oracle::primitive_cases(2024);
  ASSERT_LT(GetParam(), cases.size());
  const auto& c = cases[GetParam()];
  for (const Tensor& t : c.inputs) ASSERT_LE(t.numel(), 64) << c.name;
  const oracle::GradientCheck r = oracle::check_op(c, 99 + GetParam());
  EXPECT_LT(r.first_order, kFirstOrderTol) << c.name;
  EXPECT_LT(r.second_order, kSecondOrderTol) << c.name;
}

INSTANTIATE_TEST_SUITE_P(AllPrimitives, PrimitiveGradientTest,
                         ::testing::Range<std::size_t>(0, oracle::primitive_cases(2024).size()),
                         [](const ::testing::TestParamInfo<std::size_t>& info) {
                           return oracle::primitive_cases(2024)[info.param].name;
                         });

}  // namespace
}  // namespace flowreg
