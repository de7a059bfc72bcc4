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

#ifndef FLOWREG_ATTACKS_HPP
#define FLOWREG_ATTACKS_HPP

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "flowreg/nets.hpp"
#include "flowreg/warp.hpp"

namespace flowreg {

enum class AttackFamily {
  kSingleStepFlow,
  kMultiStepFlow,
  kOptFlow,
  kEsFlow,
  kSingleStepIntensity,
  kMultiStepIntensity,
};

std::string to_string(AttackFamily family);
AttackFamily parse_attack_family(const std::string& name);
std::span<const std::string> attack_family_names();
bool is_flow_family(AttackFamily family);

/// (mu + lambda) evolution strategy settings.
struct EsSettings {
  int parents = 10;
  int offspring = 20;
  std::optional<double> sigma;  // defaults to epsilon / 2
  int generations = 50;
};

struct AttackSpec {
  AttackFamily family = AttackFamily::kMultiStepFlow;
  double epsilon = 0.01;
  std::optional<double> step_size;  // defaults to 2.5 * epsilon / iterations
  int iterations = 20;
  double balance = 10.0;  // weight of the flow smoothness term (opt / es)
  bool targeted = false;
  std::vector<int> targets;  // one per image when targeted
  EsSettings es;
  std::uint64_t seed = 0;
  /// Dataset index of the first image in the batch; ES streams are seeded
  /// with seed ^ (index_offset + i).
  std::uint64_t index_offset = 0;
  FlowUnits units = FlowUnits::kNormalized;
  double kappa = 0.0;
  double tv_smoothing = 1e-8;

  double step() const { return step_size.value_or(2.5 * epsilon / static_cast<double>(iterations)); }
  double es_sigma() const { return es.sigma.value_or(epsilon / 2.0); }
  /// Throws std::invalid_argument when a field is out of range.
  void validate() const;
};

struct AttackResult {
  AttackFamily family = AttackFamily::kMultiStepFlow;
  /// Flow [N, H, W, 2] for flow families, intensity offset [N, H, W, C] otherwise.
  Tensor perturbation;
  Tensor adversarial;
  std::vector<bool> success;  // prediction on the adversarial input differs from the label
  std::vector<double> final_loss;
  std::vector<double> linf_norm;
  std::vector<double> l2_norm;
  int iterations_used = 0;
  std::vector<double> objective_trace;  // batch objective per iteration / generation
  /// Per-image best fitness per generation (es only), [generation][image].
  std::vector<std::vector<double>> best_fitness;
};

AttackResult run_attack(const Network& net, const Tensor& x, std::span<const int> y, const AttackSpec& spec);

AttackResult single_step_flow(const Network& net, const Tensor& x, std::span<const int> y, const AttackSpec& spec);
AttackResult multi_step_flow(const Network& net, const Tensor& x, std::span<const int> y, const AttackSpec& spec);
/// Minimizes deformation_objective from v0 with Adam at learning rate
/// step_size (default 0.01) for `iterations` steps.
AttackResult opt_flow(const Network& net, const Tensor& x, std::span<const int> y, const AttackSpec& spec);
AttackResult es_flow(const Network& net, const Tensor& x, std::span<const int> y, const AttackSpec& spec);
AttackResult single_step_intensity(const Network& net, const Tensor& x, std::span<const int> y, const AttackSpec& spec);
AttackResult multi_step_intensity(const Network& net, const Tensor& x, std::span<const int> y, const AttackSpec& spec);

/// Gradient of the summed cross-entropy w.r.t. the flow, evaluated at `flow`.
Tensor flow_gradient(const Network& net, const Tensor& x, std::span<const int> labels, const FlowField& flow);

/// Smoothness penalty sum_i sum_{j in N4(i)} sqrt(|dm_i - dm_j|^2 + |dn_i - dn_j|^2 + smoothing), as [N, 1].
Tensor flow_total_variation(const Tensor& flow, double smoothing = 1e-8);

/// Per-image margin loss max(Z_y - max_{j != y} Z_j, -kappa), as [N, 1]. In
/// targeted mode the roles swap: max(max_{j != t} Z_j - Z_t, -kappa).
Tensor margin_loss(const Tensor& logits, std::span<const int> labels, double kappa, bool targeted);

/// Per-image objective margin + balance * TV used by opt_flow and es_flow, as [N, 1].
Tensor deformation_objective(const Network& net, const Tensor& x, std::span<const int> labels, const Tensor& flow,
                             const AttackSpec& spec);

std::vector<double> per_example_loss(const Tensor& logits, std::span<const int> labels);

nlohmann::json to_json(const AttackSpec& spec);
nlohmann::json to_json(const AttackSpec& spec, const AttackResult& result);

}  // namespace flowreg

#endif  // FLOWREG_ATTACKS_HPP
