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

#include "flowreg/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "flowreg/ops.hpp"

namespace flowreg {

namespace {

const std::vector<std::string> kFamilies{"single_step_flow",      "multi_step_flow",     "opt_flow", "es_flow",
                                         "single_step_intensity", "multi_step_intensity"};

// Rows of a batch tensor stay independent through every primitive, so
// evaluating large batches in fixed-size chunks changes nothing but memory.
constexpr Index kEvalChunk = 256;

struct LossAndGrad {
  double loss;
  Tensor grad;
};

void check_batch(const Network& net, const Tensor& x, std::span<const int> y, const AttackSpec& spec) {
  spec.validate();
  if (x.rank() != 4 || x.dim(0) != static_cast<Index>(y.size())) {
    throw ShapeError("attack: batch " + to_string(x.shape()) + " does not match " + std::to_string(y.size()) +
                     " labels");
  }
  if (spec.targeted && spec.targets.size() != y.size()) {
    throw std::invalid_argument("attack: targeted mode needs one target per image");
  }
  for (int label : y) {
    if (label < 0 || label >= net.descriptor().num_classes) {
      throw std::out_of_range("attack: label " + std::to_string(label) + " out of range");
    }
  }
}

std::span<const int> objective_labels(std::span<const int> y, const AttackSpec& spec) {
  return spec.targeted ? std::span<const int>(spec.targets) : y;
}

LossAndGrad flow_loss_and_grad(const Network& net, const Tensor& x, std::span<const int> labels, const Tensor& flow,
                               FlowUnits units) {
  Tape tape;
  const Tensor v = tape.variable(flow);
  const Tensor l = loss(net, net.parameters(), bilinear_warp(x, FlowField(v, units)), labels, Reduction::kSum);
  return {l.item(), tape.gradient(l, v).detach()};
}

LossAndGrad input_loss_and_grad(const Network& net, const Tensor& x, std::span<const int> labels) {
  Tape tape;
  const Tensor xv = tape.variable(x);
  const Tensor l = loss(net, net.parameters(), xv, labels, Reduction::kSum);
  return {l.item(), tape.gradient(l, xv).detach()};
}

void per_image_norms(const Tensor& p, AttackResult& result) {
  const Index n = p.dim(0);
  const Index stride = p.numel() / std::max<Index>(n, 1);
  result.linf_norm.assign(static_cast<std::size_t>(n), 0.0);
  result.l2_norm.assign(static_cast<std::size_t>(n), 0.0);
  for (Index i = 0; i < n; ++i) {
    auto seg = p.array().segment(i * stride, stride);
    result.linf_norm[static_cast<std::size_t>(i)] = stride ? seg.abs().maxCoeff() : 0.0;
    result.l2_norm[static_cast<std::size_t>(i)] = std::sqrt(seg.square().sum());
  }
}

// Fills the adversarial input, success flags, losses and norms, and checks the
// budget of box-constrained families.
void finish(const Network& net, const Tensor& x, std::span<const int> y, const AttackSpec& spec, AttackResult& r) {
  r.family = spec.family;
  if (is_flow_family(spec.family)) {
    r.adversarial = bilinear_warp(x, FlowField(r.perturbation, spec.units)).detach();
  } else {
    r.adversarial = add(x, r.perturbation).detach();
  }
  const Tensor logits = net.forward(r.adversarial);
  const std::vector<int> pred = argmax_rows(logits);
  r.final_loss = per_example_loss(logits, y);
  r.success.resize(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    r.success[i] = spec.targeted ? pred[i] == spec.targets[i] && pred[i] != y[i] : pred[i] != y[i];
  }
  per_image_norms(r.perturbation, r);

  switch (spec.family) {
    case AttackFamily::kSingleStepFlow:
    case AttackFamily::kMultiStepFlow:
      for (double n : r.linf_norm) {
        if (n > spec.epsilon) throw std::logic_error("attack: flow exceeds its l-inf budget");
      }
      break;
    case AttackFamily::kSingleStepIntensity:
    case AttackFamily::kMultiStepIntensity:
      for (double n : r.linf_norm) {
        if (n > spec.epsilon + 1e-12) throw std::logic_error("attack: perturbation exceeds its l-inf budget");
      }
      if ((r.adversarial.array() < 0.0).any() || (r.adversarial.array() > 1.0).any()) {
        throw std::logic_error("attack: adversarial pixels left [0, 1]");
      }
      break;
    default:
      break;
  }
}

Tensor box_clip(const Tensor& v, const Tensor& lo, const Tensor& hi) {
  return Tensor(v.shape(), v.array().max(lo.array()).min(hi.array()));
}

}  // namespace

std::string to_string(AttackFamily family) { return kFamilies[static_cast<std::size_t>(family)]; }

AttackFamily parse_attack_family(const std::string& name) {
  for (std::size_t i = 0; i < kFamilies.size(); ++i) {
    if (kFamilies[i] == name) return static_cast<AttackFamily>(i);
  }
  std::string valid;
  for (const auto& f : kFamilies) valid += (valid.empty() ? "" : ", ") + f;
  throw std::invalid_argument("unknown attack family '" + name + "' (valid: " + valid + ")");
}

std::span<const std::string> attack_family_names() { return kFamilies; }

bool is_flow_family(AttackFamily family) {
  return family != AttackFamily::kSingleStepIntensity && family != AttackFamily::kMultiStepIntensity;
}

void AttackSpec::validate() const {
  if (!(epsilon >= 0.0)) throw std::invalid_argument("attack: epsilon must be >= 0");
  if (iterations < 1) throw std::invalid_argument("attack: iterations must be >= 1");
  if (step_size && !(*step_size > 0.0)) throw std::invalid_argument("attack: step size must be > 0");
  if (!(balance >= 0.0)) throw std::invalid_argument("attack: balance constant c must be >= 0");
  if (es.parents < 1 || es.offspring < 1 || es.generations < 0) {
    throw std::invalid_argument("attack: ES population sizes must be >= 1");
  }
  if (es.sigma && !(*es.sigma >= 0.0)) throw std::invalid_argument("attack: ES sigma must be >= 0");
}

Tensor flow_gradient(const Network& net, const Tensor& x, std::span<const int> labels, const FlowField& flow) {
  return flow_loss_and_grad(net, x, labels, flow.values(), flow.units()).grad;
}

Tensor flow_total_variation(const Tensor& flow, double smoothing) {
  if (flow.rank() != 4 || flow.dim(3) != 2) {
    throw ShapeError("flow_total_variation: expected [N, H, W, 2], got " + to_string(flow.shape()));
  }
  const Index n = flow.dim(0), h = flow.dim(1), w = flow.dim(2);
  // Each unordered neighbour pair appears twice in the double sum over i and N4(i).
  auto from = std::make_shared<std::vector<Index>>();
  auto to = std::make_shared<std::vector<Index>>();
  for (Index b = 0; b < n; ++b)
    for (Index i = 0; i < h; ++i)
      for (Index j = 0; j < w; ++j) {
        const Index p = (b * h + i) * w + j;
        for (Index k = 0; k < 2; ++k) {
          if (j + 1 < w) {
            from->push_back(2 * p + k);
            to->push_back(2 * (p + 1) + k);
          }
        }
        for (Index k = 0; k < 2; ++k) {
          if (i + 1 < h) {
            from->push_back(2 * p + k);
            to->push_back(2 * (p + w) + k);
          }
        }
      }
  const Index pairs = static_cast<Index>(from->size()) / 2;
  if (pairs == 0) return Tensor::zeros({n, 1});
  const Index per_image = pairs / n;
  const Shape shape{n, per_image, 2};
  const Tensor diff = sub(gather(flow, from, shape), gather(flow, to, shape));
  const Tensor terms = sqrt(add_scalar(sum_last(square(diff)), smoothing));
  return scale(sum_to(reshape(terms, {n, per_image}), {n, 1}), 2.0);
}

Tensor margin_loss(const Tensor& logits, std::span<const int> labels, double kappa, bool targeted) {
  const Index n = logits.dim(0), k = logits.dim(1);
  Array block = Array::Zero(n * k);
  for (Index i = 0; i < n; ++i) block[i * k + labels[static_cast<std::size_t>(i)]] = -1e30;
  const Tensor picked = pick(logits, labels);
  const Tensor others = max_last(add(logits, Tensor({n, k}, std::move(block))));
  const Tensor margin = targeted ? sub(others, picked) : sub(picked, others);
  return add_scalar(relu(add_scalar(margin, kappa)), -kappa);
}

Tensor deformation_objective(const Network& net, const Tensor& x, std::span<const int> labels, const Tensor& flow,
                             const AttackSpec& spec) {
  const Tensor logits = net.forward(bilinear_warp(x, FlowField(flow, spec.units)));
  const Tensor margin = margin_loss(logits, labels, spec.kappa, spec.targeted);
  if (spec.balance == 0.0) return margin;
  return add(margin, scale(flow_total_variation(flow, spec.tv_smoothing), spec.balance));
}

std::vector<double> per_example_loss(const Tensor& logits, std::span<const int> labels) {
  const Index n = logits.dim(0), k = logits.dim(1);
  std::vector<double> out(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    auto row = logits.array().segment(i * k, k);
    const double m = row.maxCoeff();
    out[static_cast<std::size_t>(i)] = m + std::log((row - m).exp().sum()) - row[labels[static_cast<std::size_t>(i)]];
  }
  return out;
}

AttackResult single_step_flow(const Network& net, const Tensor& x, std::span<const int> y, const AttackSpec& spec) {
  check_batch(net, x, y, spec);
  const FlowField v0 = FlowField::identity_for(x, spec.units);
  const LossAndGrad lg = flow_loss_and_grad(net, x, objective_labels(y, spec), v0.values(), spec.units);
  const double direction = spec.targeted ? -spec.epsilon : spec.epsilon;
  AttackResult r;
  r.perturbation = (sign(lg.grad) * direction).detach();
  r.iterations_used = 1;
  r.objective_trace.push_back(lg.loss);
  finish(net, x, y, spec, r);
  return r;
}

AttackResult multi_step_flow(const Network& net, const Tensor& x, std::span<const int> y, const AttackSpec& spec) {
  check_batch(net, x, y, spec);
  const double step = spec.targeted ? -spec.step() : spec.step();
  Tensor v = FlowField::identity_for(x, spec.units).values();
  AttackResult r;
  for (int k = 0; k < spec.iterations; ++k) {
    const LossAndGrad lg = flow_loss_and_grad(net, x, objective_labels(y, spec), v, spec.units);
    r.objective_trace.push_back(lg.loss);
    v = clip(add(v, sign(lg.grad) * step), -spec.epsilon, spec.epsilon).detach();
  }
  r.perturbation = v;
  r.iterations_used = spec.iterations;
  finish(net, x, y, spec, r);
  return r;
}

AttackResult opt_flow(const Network& net, const Tensor& x, std::span<const int> y, const AttackSpec& spec) {
  check_batch(net, x, y, spec);
  const std::span<const int> labels = objective_labels(y, spec);
  const double step = spec.step_size.value_or(0.01);
  // Adam moments. The smoothed TV term has curvature ~balance / sqrt(1e-8)
  // near v0, where a fixed gradient step oscillates; Adam bounds each
  // coordinate's move by about `step`.
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kAdamEps = 1e-8;
  Array v = Array::Zero(x.dim(0) * x.dim(1) * x.dim(2) * 2);
  Array m = Array::Zero(v.size()), s2 = Array::Zero(v.size());
  const Shape flow_shape{x.dim(0), x.dim(1), x.dim(2), 2};
  AttackResult r;
  for (int k = 0; k < spec.iterations; ++k) {
    Tape tape;
    const Tensor var = tape.variable(Tensor(flow_shape, v));
    const Tensor objective = sum(deformation_objective(net, x, labels, var, spec));
    r.objective_trace.push_back(objective.item());
    const Tensor grad = tape.gradient(objective, var);
    const Array& g = grad.array();
    m = kBeta1 * m + (1 - kBeta1) * g;
    s2 = kBeta2 * s2 + (1 - kBeta2) * g.square();
    const double c1 = 1 - std::pow(kBeta1, k + 1), c2 = 1 - std::pow(kBeta2, k + 1);
    v -= step * (m / c1) / ((s2 / c2).sqrt() + kAdamEps);
  }
  r.perturbation = Tensor(flow_shape, std::move(v));
  r.iterations_used = spec.iterations;
  finish(net, x, y, spec, r);
  return r;
}

AttackResult es_flow(const Network& net, const Tensor& x, std::span<const int> y, const AttackSpec& spec) {
  check_batch(net, x, y, spec);
  const std::span<const int> labels = objective_labels(y, spec);
  const Index n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  const Index flow_size = h * w * 2, image_size = h * w * c;
  const int mu = spec.es.parents, lambda = spec.es.offspring;
  const double sigma = spec.es_sigma();

  // Fitness of `count` candidate flows; candidate j attacks image owner[j].
  auto evaluate = [&](const std::vector<Array>& flows, const std::vector<Index>& owner) {
    std::vector<double> fitness(flows.size());
    for (std::size_t start = 0; start < flows.size(); start += kEvalChunk) {
      const std::size_t stop = std::min(flows.size(), start + static_cast<std::size_t>(kEvalChunk));
      const Index m = static_cast<Index>(stop - start);
      Array xs(m * image_size), vs(m * flow_size);
      std::vector<int> ls(static_cast<std::size_t>(m));
      for (std::size_t j = start; j < stop; ++j) {
        const Index row = static_cast<Index>(j - start);
        xs.segment(row * image_size, image_size) = x.array().segment(owner[j] * image_size, image_size);
        vs.segment(row * flow_size, flow_size) = flows[j];
        ls[static_cast<std::size_t>(row)] = labels[static_cast<std::size_t>(owner[j])];
      }
      const Tensor obj = deformation_objective(net, Tensor({m, h, w, c}, std::move(xs)), ls,
                                               Tensor({m, h, w, 2}, std::move(vs)), spec);
      for (Index row = 0; row < m; ++row) fitness[start + static_cast<std::size_t>(row)] = obj[row];
    }
    return fitness;
  };

  std::vector<std::mt19937_64> rngs;
  for (Index i = 0; i < n; ++i) rngs.emplace_back(spec.seed ^ (spec.index_offset + static_cast<std::uint64_t>(i)));

  struct Individual {
    Array flow;
    double fitness;
  };
  std::vector<std::vector<Individual>> parents(static_cast<std::size_t>(n));
  {
    std::vector<Array> flows(static_cast<std::size_t>(n), Array::Zero(flow_size));
    std::vector<Index> owner(static_cast<std::size_t>(n));
    std::iota(owner.begin(), owner.end(), Index{0});
    const std::vector<double> f0 = evaluate(flows, owner);
    for (Index i = 0; i < n; ++i) {
      parents[static_cast<std::size_t>(i)].assign(static_cast<std::size_t>(mu),
                                                  Individual{Array::Zero(flow_size), f0[static_cast<std::size_t>(i)]});
    }
  }

  AttackResult r;
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int gen = 0; gen < spec.es.generations; ++gen) {
    std::vector<Array> children;
    std::vector<Index> owner;
    children.reserve(static_cast<std::size_t>(n * lambda));
    for (Index i = 0; i < n; ++i) {
      auto& rng = rngs[static_cast<std::size_t>(i)];
      std::uniform_int_distribution<int> pick_parent(0, mu - 1);
      for (int k = 0; k < lambda; ++k) {
        Array child = parents[static_cast<std::size_t>(i)][static_cast<std::size_t>(pick_parent(rng))].flow;
        for (Index e = 0; e < flow_size; ++e) child[e] += sigma * gauss(rng);
        children.push_back(std::move(child));
        owner.push_back(i);
      }
    }
    const std::vector<double> fitness = evaluate(children, owner);
    std::vector<double> best(static_cast<std::size_t>(n));
    double total = 0.0;
    for (Index i = 0; i < n; ++i) {
      auto& pool = parents[static_cast<std::size_t>(i)];
      for (int k = 0; k < lambda; ++k) {
        const std::size_t j = static_cast<std::size_t>(i * lambda + k);
        pool.push_back(Individual{std::move(children[j]), fitness[j]});
      }
      // Parents precede offspring, so ties keep the incumbent.
      std::stable_sort(pool.begin(), pool.end(),
                       [](const Individual& a, const Individual& b) { return a.fitness < b.fitness; });
      pool.resize(static_cast<std::size_t>(mu));
      best[static_cast<std::size_t>(i)] = pool.front().fitness;
      total += pool.front().fitness;
    }
    r.best_fitness.push_back(std::move(best));
    r.objective_trace.push_back(total);
  }

  Array flow(n * flow_size);
  for (Index i = 0; i < n; ++i) flow.segment(i * flow_size, flow_size) = parents[static_cast<std::size_t>(i)].front().flow;
  r.perturbation = Tensor({n, h, w, 2}, std::move(flow));
  r.iterations_used = spec.es.generations;
  finish(net, x, y, spec, r);
  return r;
}

AttackResult single_step_intensity(const Network& net, const Tensor& x, std::span<const int> y,
                                   const AttackSpec& spec) {
  check_batch(net, x, y, spec);
  const LossAndGrad lg = input_loss_and_grad(net, x, objective_labels(y, spec));
  const double direction = spec.targeted ? -spec.epsilon : spec.epsilon;
  const Tensor adv = clip(add(x, sign(lg.grad) * direction), 0.0, 1.0).detach();
  AttackResult r;
  r.perturbation = sub(adv, x).detach();
  r.iterations_used = 1;
  r.objective_trace.push_back(lg.loss);
  finish(net, x, y, spec, r);
  return r;
}

AttackResult multi_step_intensity(const Network& net, const Tensor& x, std::span<const int> y,
                                  const AttackSpec& spec) {
  check_batch(net, x, y, spec);
  const double step = spec.targeted ? -spec.step() : spec.step();
  const Tensor lo(x.shape(), (x.array() - spec.epsilon).max(0.0));
  const Tensor hi(x.shape(), (x.array() + spec.epsilon).min(1.0));
  Tensor adv = x.detach();
  AttackResult r;
  for (int k = 0; k < spec.iterations; ++k) {
    const LossAndGrad lg = input_loss_and_grad(net, adv, objective_labels(y, spec));
    r.objective_trace.push_back(lg.loss);
    adv = box_clip(add(adv, sign(lg.grad) * step), lo, hi);
  }
  r.perturbation = sub(adv, x).detach();
  r.iterations_used = spec.iterations;
  finish(net, x, y, spec, r);
  return r;
}

AttackResult run_attack(const Network& net, const Tensor& x, std::span<const int> y, const AttackSpec& spec) {
  switch (spec.family) {
    case AttackFamily::kSingleStepFlow:
      return single_step_flow(net, x, y, spec);
    case AttackFamily::kMultiStepFlow:
      return multi_step_flow(net, x, y, spec);
    case AttackFamily::kOptFlow:
      return opt_flow(net, x, y, spec);
    case AttackFamily::kEsFlow:
      return es_flow(net, x, y, spec);
    case AttackFamily::kSingleStepIntensity:
      return single_step_intensity(net, x, y, spec);
    case AttackFamily::kMultiStepIntensity:
      return multi_step_intensity(net, x, y, spec);
  }
  throw std::logic_error("run_attack: unhandled family");
}

nlohmann::json to_json(const AttackSpec& spec) {
  nlohmann::json j = {
      {"family", to_string(spec.family)},
      {"epsilon", spec.epsilon},
      {"step_size", spec.step()},
      {"iterations", spec.iterations},
      {"balance", spec.balance},
      {"targeted", spec.targeted},
      {"seed", spec.seed},
      {"units", to_string(spec.units)},
      {"kappa", spec.kappa},
  };
  if (spec.family == AttackFamily::kOptFlow) j["step_size"] = spec.step_size.value_or(0.01);
  if (spec.family == AttackFamily::kEsFlow) {
    j["es"] = {{"parents", spec.es.parents},
               {"offspring", spec.es.offspring},
               {"sigma", spec.es_sigma()},
               {"generations", spec.es.generations}};
  }
  return j;
}

nlohmann::json to_json(const AttackSpec& spec, const AttackResult& result) {
  std::vector<int> success(result.success.begin(), result.success.end());
  return {{"spec", to_json(spec)},
          {"success", success},
          {"final_loss", result.final_loss},
          {"linf_norm", result.linf_norm},
          {"l2_norm", result.l2_norm},
          {"iterations_used", result.iterations_used},
          {"objective_trace", result.objective_trace}};
}

}  // namespace flowreg
