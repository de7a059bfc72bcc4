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
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <variant>

#include "flowreg/checkpoint.hpp"
#include "flowreg/nets.hpp"
#include "flowreg/ops.hpp"
#include "oracles.hpp"

namespace flowreg {
namespace {

namespace fs = std::filesystem;

std::vector<int> labels_for(Index n, int k) {
  std::vector<int> y;
  for (Index i = 0; i < n; ++i) y.push_back(static_cast<int>(i % k));
  return y;
}

fs::path temp_path(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "flowreg_nets_test";
  fs::create_directories(dir);
  return dir / name;
}

TEST(BuildTest, MlpTinyParameterCount) {
  EXPECT_EQ(Network::build({"mlp-tiny", 8, 8, 1, 2, 1.0}, 0).parameter_count(), 8 * 8 * 16 + 16 + 16 * 2 + 2);
}

TEST(BuildTest, CnnMiniHasTwoConvAndTwoDense) {
  const Network net = Network::build({"cnn-mini", 16, 16, 1, 2, 1.0}, 0);
  int conv = 0, dense = 0;
  for (const auto& l : net.layer_stack()) {
    conv += std::holds_alternative<layers::Conv>(l);
    dense += std::holds_alternative<layers::Dense>(l);
  }
  EXPECT_EQ(conv, 2);
  EXPECT_EQ(dense, 2);
}

TEST(BuildTest, ReferenceLayouts) {
  auto count = [](const Network& net) {
    int conv = 0, dense = 0, blocks = 0;
    for (const auto& l : net.layer_stack()) {
      conv += std::holds_alternative<layers::Conv>(l);
      dense += std::holds_alternative<layers::Dense>(l);
      blocks += std::holds_alternative<layers::Residual>(l);
    }
    return std::tuple{conv, dense, blocks};
  };
  EXPECT_EQ(count(Network::build({"vgg11", 32, 32, 3, 10, 0.125}, 0)), (std::tuple{8, 3, 0}));
  // Stem conv, 8 basic blocks of two convs, one dense: 18 weight layers.
  EXPECT_EQ(count(Network::build({"resnet18", 32, 32, 3, 10, 0.125}, 0)), (std::tuple{1, 1, 8}));
}

TEST(BuildTest, SameSeedSameParameters) {
  const Network a = Network::build({"cnn-mini", 8, 8, 3, 4, 1.0}, 42);
  const Network b = Network::build({"cnn-mini", 8, 8, 3, 4, 1.0}, 42);
  const Network c = Network::build({"cnn-mini", 8, 8, 3, 4, 1.0}, 43);
  bool differs = false;
  for (std::size_t k = 0; k < a.parameters().size(); ++k) {
    EXPECT_TRUE((a.parameters()[k].array() == b.parameters()[k].array()).all());
    differs |= !(a.parameters()[k].array() == c.parameters()[k].array()).all();
  }
  EXPECT_TRUE(differs);
}

TEST(BuildTest, KaimingUniformBoundsAndZeroBiases) {
  const Network net = Network::build({"mlp-tiny", 8, 8, 1, 3, 1.0}, 1);
  const Tensor& w = net.parameters()[0];
  const double bound = std::sqrt(6.0 / 64.0);
  EXPECT_LE(w.array().abs().maxCoeff(), bound);
  EXPECT_GT(w.array().abs().maxCoeff(), 0.9 * bound);
  EXPECT_EQ(net.parameters()[1].array().abs().maxCoeff(), 0.0);
}

TEST(BuildTest, WidthMultiplierDoublesChannels) {
  const Network one = Network::build({"cnn-mini", 8, 8, 1, 2, 1.0}, 0);
  const Network two = Network::build({"cnn-mini", 8, 8, 1, 2, 2.0}, 0);
  std::vector<Index> a, b;
  for (const auto& l : one.layer_stack())
    if (const auto* c = std::get_if<layers::Conv>(&l)) a.push_back(c->out_channels);
  for (const auto& l : two.layer_stack())
    if (const auto* c = std::get_if<layers::Conv>(&l)) b.push_back(c->out_channels);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(b[i], 2 * a[i]);
}

TEST(BuildTest, UnknownNameListsValidOnes) {
  try {
    Network::build({"alexnet", 8, 8, 1, 2, 1.0}, 0);
    FAIL();
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    for (const std::string& name : architecture_names()) EXPECT_NE(msg.find(name), std::string::npos) << name;
  }
}

TEST(LossTest, ZeroFinalLayerGivesLogK) {
  Network net = Network::build({"cnn-mini", 8, 8, 1, 5, 1.0}, 0);
  std::vector<Tensor> p = net.parameters();
  p[p.size() - 2] = Tensor::zeros(p[p.size() - 2].shape());
  net.set_parameters(p);
  std::mt19937_64 rng(1);
  const Tensor x = oracle::random_tensor({3, 8, 8, 1}, rng, 0, 1);
  EXPECT_NEAR(loss(net, x, labels_for(3, 5)).item(), std::log(5.0), 1e-15);
}

TEST(LossTest, InvariantToLogitShift) {
  Network net = Network::build({"mlp-tiny", 4, 4, 1, 3, 1.0}, 0);
  std::mt19937_64 rng(2);
  const Tensor x = oracle::random_tensor({4, 4, 4, 1}, rng, 0, 1);
  const double before = loss(net, x, labels_for(4, 3)).item();
  std::vector<Tensor> p = net.parameters();
  p.back() = Tensor::full(p.back().shape(), 7.5);  // output bias adds a constant to every logit
  net.set_parameters(p);
  EXPECT_NEAR(loss(net, x, labels_for(4, 3)).item(), before, 1e-13);
}

TEST(LossTest, LabelOutOfRangeIsAnError) {
  const Network net = Network::build({"mlp-tiny", 4, 4, 1, 3, 1.0}, 0);
  EXPECT_ANY_THROW(loss(net, Tensor::zeros({1, 4, 4, 1}), std::vector<int>{3}));
  EXPECT_ANY_THROW(loss(net, Tensor::zeros({1, 4, 4, 1}), std::vector<int>{-1}));
  EXPECT_THROW(loss(net, Tensor::zeros({1, 5, 4, 1}), std::vector<int>{0}), ShapeError);
}

TEST(LossTest, InputGradientMatchesDifferences) {
  const Network net = Network::build({"cnn-mini", 8, 8, 1, 3, 1.0}, 3);
  std::mt19937_64 rng(3);
  const Tensor x0 = oracle::random_tensor({2, 8, 8, 1}, rng, 0, 1);
  const std::vector<int> y{0, 2};
  Tape tape;
  const Tensor x = tape.variable(x0);
  const Tensor g = tape.gradient(loss(net, x, y), x);
  const auto fd = oracle::central_difference(
      [&](const std::vector<Tensor>& at) {
        NoRecordGuard guard;
        return loss(net, at[0], y).item();
      },
      {x0}, 1e-6);
  EXPECT_LT(oracle::relative_error(g, fd[0]), 1e-5);
}

TEST(LossTest, ParameterGradientsMatchDifferences) {
  const Network net = Network::build({"cnn-mini", 8, 8, 1, 3, 1.0}, 4);
  std::mt19937_64 rng(4);
  const Tensor x = oracle::random_tensor({2, 8, 8, 1}, rng, 0, 1);
  const std::vector<int> y{1, 0};
  Tape tape;
  std::vector<Tensor> vars;
  for (const Tensor& p : net.parameters()) vars.push_back(tape.variable(p));
  const std::vector<Tensor> g = tape.gradient(loss(net, vars, x, y), vars);
  const auto fd = oracle::central_difference(
      [&](const std::vector<Tensor>& at) {
        NoRecordGuard guard;
        return loss(net, at, x, y).item();
      },
      net.parameters(), 1e-6);
  for (std::size_t k = 0; k < g.size(); ++k) EXPECT_LT(oracle::relative_error(g[k], fd[k]), 1e-4) << "param " << k;
}

TEST(ForwardTest, Deterministic) {
  const Network net = Network::build({"resnet18", 8, 8, 3, 4, 0.125}, 5);
  std::mt19937_64 rng(5);
  const Tensor x = oracle::random_tensor({2, 8, 8, 3}, rng, 0, 1);
  EXPECT_TRUE((net.forward(x).array() == net.forward(x).array()).all());
}

TEST(ForwardTest, ZeroedResidualBranchesAreIdentity) {
  Network net = Network::build({"resnet18", 16, 16, 1, 3, 0.125}, 6);
  std::vector<Tensor> p = net.parameters();
  for (const auto& l : net.layer_stack())
    if (const auto* r = std::get_if<layers::Residual>(&l))
      for (const layers::Conv* c : {&r->first, &r->second}) {
        p[c->weight] = Tensor::zeros(p[c->weight].shape());
        p[c->bias] = Tensor::zeros(p[c->bias].shape());
      }
  net.set_parameters(p);

  // Replay the stack by hand: identity blocks are skipped, downsampling blocks
  // reduce to relu(shortcut(x)).
  std::mt19937_64 rng(6);
  const Tensor x = oracle::random_tensor({2, 16, 16, 1}, rng, 0, 1);
  auto conv = [&](const layers::Conv& c, const Tensor& h) {
    return add(conv2d(h, p[c.weight], {c.stride, c.pad}), p[c.bias]);
  };
  Tensor h = x;
  int identity_blocks = 0;
  for (const auto& l : net.layer_stack()) {
    if (const auto* c = std::get_if<layers::Conv>(&l)) h = conv(*c, h);
    else if (std::holds_alternative<layers::Relu>(l)) h = relu(h);
    else if (const auto* r = std::get_if<layers::Residual>(&l)) {
      if (r->shortcut) h = relu(conv(*r->shortcut, h));
      else ++identity_blocks;
    } else if (const auto* a = std::get_if<layers::AvgPool>(&l)) h = avg_pool2d(h, a->window);
    else if (std::holds_alternative<layers::Flatten>(l)) h = reshape(h, {h.dim(0), h.numel() / h.dim(0)});
    else if (const auto* d = std::get_if<layers::Dense>(&l)) h = add(matmul(h, p[d->weight]), p[d->bias]);
    else FAIL() << "unexpected layer";
  }
  EXPECT_EQ(identity_blocks, 5);
  const Tensor got = net.forward(x);
  for (Index i = 0; i < got.numel(); ++i) EXPECT_NEAR(got[i], h[i], 1e-13);
}

TEST(CheckpointTest, BitExactRoundTrip) {
  const Network net = Network::build({"cnn-mini", 8, 8, 3, 10, 1.0}, 7);
  const fs::path path = temp_path("cnn.bin");
  save_checkpoint(path, net, 7, 12);
  const Checkpoint back = load_checkpoint(path);
  EXPECT_EQ(back.seed, 7u);
  EXPECT_EQ(back.epoch, 12);
  EXPECT_EQ(back.net.descriptor(), net.descriptor());
  for (std::size_t k = 0; k < net.parameters().size(); ++k)
    EXPECT_EQ(std::memcmp(back.net.parameters()[k].data(), net.parameters()[k].data(),
                          sizeof(double) * static_cast<std::size_t>(net.parameters()[k].numel())),
              0);
  EXPECT_EQ(fs::file_size(path) - static_cast<std::uintmax_t>(8 * net.parameter_count()),
            [&] {
              std::ifstream in(path);
              std::string line;
              std::getline(in, line);
              return line.size() + 1;
            }());
}

TEST(CheckpointTest, TruncatedFileIsRejected) {
  const Network net = Network::build({"mlp-tiny", 4, 4, 1, 2, 1.0}, 0);
  const fs::path path = temp_path("short.bin");
  save_checkpoint(path, net, 0, 1);
  fs::resize_file(path, fs::file_size(path) - 3);
  EXPECT_THROW(load_checkpoint(path), std::runtime_error);
}

}  // namespace
}  // namespace flowreg
