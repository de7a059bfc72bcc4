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

#include "flowreg/defenses.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include "flowreg/ops.hpp"
#include "flowreg/warp.hpp"

namespace flowreg {

namespace {

const std::vector<std::string> kFamilies{"standard", "at", "igr", "adt", "fgr", "fgr_adt"};

constexpr Index kEvalChunk = 256;

// Per-row L2 norms of a [N, ...] tensor, scaled by `factor`.
std::vector<double> row_norms(const Tensor& g, double factor) {
  const Index n = g.dim(0), stride = g.numel() / std::max<Index>(n, 1);
  std::vector<double> out(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = factor * g.array().segment(i * stride, stride).matrix().norm();
  return out;
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

struct Penalty {
  Tensor value;  // mean over examples of the squared per-example gradient norm
  double mean_norm = 0;
};

// The mean loss has gradient g_i / N per example, so the per-example squared
// norms sum to N^2 * sum(g^2) and their mean is N * sum(g^2).
Penalty gradient_penalty(Tape& tape, const Tensor& mean_loss, const Tensor& wrt, Index n) {
  const Tensor g = tape.gradient(mean_loss, wrt);
  const double count = static_cast<double>(n);
  return {scale(sum(square(g)), count), mean_of(row_norms(g, count))};
}

Penalty flow_penalty(Tape& tape, const Network& net, std::span<const Tensor> params, const Tensor& x,
                     std::span<const int> y, const Tensor& at_flow, FlowUnits units, Tensor* mean_loss) {
  const Tensor v = tape.variable(at_flow);
  const Tensor l = loss(net, params, bilinear_warp(x, FlowField(v, units)), y);
  if (mean_loss != nullptr) *mean_loss = l;
  return gradient_penalty(tape, l, v, x.dim(0));
}

Tape* tape_of(std::span<const Tensor> params) {
  for (const Tensor& p : params) {
    if (p.tape() != nullptr) return p.tape();
  }
  return nullptr;
}

}  // namespace

std::string to_string(DefenseFamily family) { return kFamilies.at(static_cast<std::size_t>(family)); }

DefenseFamily parse_defense_family(const std::string& name) {
  for (std::size_t i = 0; i < kFamilies.size(); ++i) {
    if (kFamilies[i] == name) return static_cast<DefenseFamily>(i);
  }
  std::string valid;
  for (const auto& f : kFamilies) valid += (valid.empty() ? "" : ", ") + f;
  throw std::invalid_argument("unknown defense family '" + name + "' (valid: " + valid + ")");
}

std::span<const std::string> defense_family_names() { return kFamilies; }

DefenseSpec DefenseSpec::defaults(DefenseFamily family, double lambda) {
  DefenseSpec spec;
  spec.family = family;
  spec.lambda = lambda;
  spec.inner.iterations = 7;
  if (family == DefenseFamily::kAt) {
    spec.inner.family = AttackFamily::kMultiStepIntensity;
    spec.inner.epsilon = 8.0 / 255.0;
  } else {
    spec.inner.family = AttackFamily::kMultiStepFlow;
    spec.inner.epsilon = 0.01;
  }
  return spec;
}

bool DefenseSpec::has_penalty() const {
  return family == DefenseFamily::kIgr || family == DefenseFamily::kFgr || family == DefenseFamily::kFgrAdt;
}

bool DefenseSpec::needs_higher_order() const { return has_penalty(); }

void DefenseSpec::validate() const {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw std::invalid_argument("defense: lambda must be >= 0");
  if (!(p > 1.0) || !(q > 1.0) || std::abs(1.0 / p + 1.0 / q - 1.0) > 1e-12) {
    throw std::invalid_argument("defense: exponents must satisfy 1/p + 1/q = 1");
  }
  if (p != 2.0 || q != 2.0) throw std::invalid_argument("defense: only p = q = 2 is implemented");
  if (family == DefenseFamily::kAt || family == DefenseFamily::kAdt || family == DefenseFamily::kFgrAdt) {
    inner.validate();
    const bool flow = is_flow_family(inner.family);
    if ((family == DefenseFamily::kAt) == flow) {
      throw std::invalid_argument("defense " + to_string(family) + ": inner attack " + to_string(inner.family) +
                                  " has the wrong perturbation type");
    }
    if (inner.family == AttackFamily::kEsFlow || inner.family == AttackFamily::kOptFlow) {
      throw std::invalid_argument("defense: inner attack must be single- or multi-step");
    }
  }
}

double LrSchedule::at(int epoch) const {
  double lr = initial;
  for (int d : drop_epochs) {
    if (epoch >= d) lr *= factor;
  }
  return lr;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("train: momentum must be in [0, 1)");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("train: weight_decay must be >= 0");
  if (!(lr.initial > 0.0)) throw std::invalid_argument("train: learning rate must be > 0");
  if (!(lr.factor > 0.0)) throw std::invalid_argument("train: lr drop factor must be > 0");
  int previous = 0;
  for (int d : lr.drop_epochs) {
    if (d <= previous || d > epochs) {
      throw std::invalid_argument("train: lr drop epochs must be strictly increasing within [1, " +
                                  std::to_string(epochs) + "]");
    }
    previous = d;
  }
  if (augment.pad < 0) throw std::invalid_argument("train: augmentation pad must be >= 0");
}

TrainingLoss training_loss(const Network& net, std::span<const Tensor> params, const Tensor& x,
                           std::span<const int> y, const DefenseSpec& spec) {
  spec.validate();
  if (x.rank() != 4 || x.dim(0) != static_cast<Index>(y.size())) {
    throw ShapeError("training_loss: " + std::to_string(y.size()) + " labels for batch " + to_string(x.shape()));
  }
  Tape* tape = tape_of(params);
  if (spec.needs_higher_order() && (tape == nullptr || !tape->higher_order())) {
    throw std::logic_error("training_loss: " + to_string(spec.family) + " needs parameters on a higher-order tape");
  }
  const Index n = x.dim(0);
  TrainingLoss out;
  Tensor base;
  Penalty penalty;
  switch (spec.family) {
    case DefenseFamily::kStandard:
      base = loss(net, params, x, y);
      break;
    case DefenseFamily::kAt: {
      const AttackResult adv = multi_step_intensity(net, x, y, spec.inner);
      base = loss(net, params, adv.adversarial, y);
      break;
    }
    case DefenseFamily::kAdt: {
      const AttackResult adv = run_attack(net, x, y, spec.inner);
      base = loss(net, params, adv.adversarial, y);
      break;
    }
    case DefenseFamily::kIgr: {
      const Tensor xv = tape->variable(x);
      base = loss(net, params, xv, y);
      penalty = gradient_penalty(*tape, base, xv, n);
      break;
    }
    case DefenseFamily::kFgr:
      penalty = flow_penalty(*tape, net, params, x, y, FlowField::identity_for(x, spec.units).values(), spec.units, &base);
      break;
    case DefenseFamily::kFgrAdt: {
      const AttackResult adv = run_attack(net, x, y, spec.inner);
      if (spec.penalty_on_clean) {
        base = loss(net, params, adv.adversarial, y);
        penalty = flow_penalty(*tape, net, params, x, y, FlowField::identity_for(x, spec.units).values(), spec.units,
                               nullptr);
      } else {
        penalty = flow_penalty(*tape, net, params, x, y, adv.perturbation, spec.units, &base);
      }
      break;
    }
  }
  out.base = base.item();
  if (penalty.value.defined()) {
    out.total = add(base, scale(penalty.value, spec.lambda));
    out.penalty = spec.lambda * penalty.value.item();
    out.penalty_norm = penalty.mean_norm;
  } else {
    out.total = base;
  }
  return out;
}

Tensor training_loss(const Network& net, const Tensor& x, std::span<const int> y, const DefenseSpec& spec) {
  Tape tape(true);
  std::vector<Tensor> params;
  for (const Tensor& p : net.parameters()) params.push_back(tape.variable(p));
  return training_loss(net, params, x, y, spec).total.detach();
}

std::vector<double> flow_gradient_norms(const Network& net, const Tensor& x, std::span<const int> y, FlowUnits units) {
  return row_norms(flow_gradient(net, x, y, FlowField::identity_for(x, units)), 1.0);
}

std::vector<double> input_gradient_norms(const Network& net, const Tensor& x, std::span<const int> y) {
  Tape tape(false);
  const Tensor xv = tape.variable(x);
  const Tensor l = loss(net, net.parameters(), xv, y, Reduction::kSum);
  return row_norms(tape.gradient(l, xv), 1.0);
}

void SgdMomentum::step(std::vector<Tensor>& params, std::span<const Tensor> grads, double lr) {
  if (params.size() != grads.size()) throw std::invalid_argument("sgd: parameter / gradient count mismatch");
  if (buffers_.empty()) {
    for (const Tensor& p : params) buffers_.push_back(Array::Zero(p.numel()));
  }
  if (buffers_.size() != params.size()) throw std::invalid_argument("sgd: parameter count changed between steps");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i].shape()) {
      throw ShapeError("sgd: gradient " + std::to_string(i) + " has shape " + to_string(grads[i].shape()));
    }
    Array d = grads[i].array();
    if (weight_decay_ != 0.0) d += weight_decay_ * params[i].array();
    buffers_[i] = momentum_ * buffers_[i] + d;
    params[i] = Tensor(params[i].shape(), params[i].array() - lr * buffers_[i]);
  }
}

double accuracy(const Network& net, const Tensor& x, std::span<const int> y) {
  NoRecordGuard guard;
  const Index n = x.dim(0);
  if (n == 0) return 0.0;
  const Index stride = x.numel() / n;
  Index correct = 0;
  for (Index start = 0; start < n; start += kEvalChunk) {
    const Index m = std::min(kEvalChunk, n - start);
    Shape shape = x.shape();
    shape[0] = m;
    const Tensor chunk(shape, x.array().segment(start * stride, m * stride));
    const std::vector<int> pred = predict(net, chunk);
    for (Index i = 0; i < m; ++i) correct += pred[static_cast<std::size_t>(i)] == y[static_cast<std::size_t>(start + i)];
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

TrainHistory train(Network& net, const Dataset& data, const DefenseSpec& spec, const TrainConfig& config) {
  spec.validate();
  config.validate();
  data.validate();
  if (data.size() == 0) throw std::invalid_argument("train: empty dataset");
  if (data.num_classes != net.descriptor().num_classes) {
    throw std::invalid_argument("train: dataset has " + std::to_string(data.num_classes) + " classes, network " +
                                std::to_string(net.descriptor().num_classes));
  }
  SgdMomentum sgd(config.momentum, config.weight_decay);
  TrainHistory history;
  const Index n = data.size();
  const Index bs = config.batch_size;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = config.lr.at(epoch);
    const std::vector<Index> order = batch_order(n, config.seed, epoch);
    double loss_sum = 0.0, norm_sum = 0.0;
    Index batch_index = 0;
    for (Index start = 0; start < n; start += bs, ++batch_index) {
      const std::span<const Index> idx(order.data() + start, static_cast<std::size_t>(std::min(bs, n - start)));
      const std::vector<int> y = data.labels_at(idx);
      const std::uint64_t aug_seed = (config.seed * 1000003u + static_cast<std::uint64_t>(epoch)) * 1000003u +
                                     static_cast<std::uint64_t>(batch_index);
      const Tensor x = augment(data.images_at(idx), config.augment, aug_seed);
      try {
        Tape tape(spec.needs_higher_order());
        std::vector<Tensor> vars;
        for (const Tensor& p : net.parameters()) vars.push_back(tape.variable(p));
        const TrainingLoss tl = training_loss(net, vars, x, y, spec);
        const double value = tl.total.item();
        if (!std::isfinite(value)) throw NumericError("non-finite loss");
        std::vector<Tensor> grads = tape.gradient(tl.total, vars);
        std::vector<Tensor> params = net.parameters();
        sgd.step(params, grads, lr);
        for (const Tensor& p : params) {
          if (!p.array().allFinite()) throw NumericError("non-finite parameter after update");
        }
        net.set_parameters(std::move(params));
        loss_sum += value * static_cast<double>(idx.size());
        norm_sum += tl.penalty_norm * static_cast<double>(idx.size());
      } catch (const NumericError& e) {
        throw NumericError("train: epoch " + std::to_string(epoch + 1) + ", batch " + std::to_string(batch_index) +
                           ": " + e.what());
      }
    }
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(n);
    rec.clean_acc = accuracy(net, data.images, data.labels);
    rec.penalty_norm = norm_sum / static_cast<double>(n);
    history.push_back(rec);
  }
  return history;
}

void write_history_csv(std::ostream& out, const TrainHistory& history) {
  out << "epoch,lr,train_loss,clean_acc,penalty_norm\n";
  char line[256];
  for (const EpochRecord& r : history) {
    std::snprintf(line, sizeof(line), "%d,%.10g,%.10g,%.10g,%.10g\n", r.epoch, r.lr, r.train_loss, r.clean_acc,
                  r.penalty_norm);
    out << line;
  }
}

}  // namespace flowreg
