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

#ifndef FLOWREG_DEFENSES_HPP
#define FLOWREG_DEFENSES_HPP

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "flowreg/attacks.hpp"
#include "flowreg/data.hpp"
#include "flowreg/nets.hpp"

namespace flowreg {

enum class DefenseFamily { kStandard, kAt, kIgr, kAdt, kFgr, kFgrAdt };

std::string to_string(DefenseFamily family);
DefenseFamily parse_defense_family(const std::string& name);
std::span<const std::string> defense_family_names();

struct DefenseSpec {
  DefenseFamily family = DefenseFamily::kStandard;
  double lambda = 0.0;  // ignored for standard / at / adt
  AttackSpec inner;     // used by at / adt / fgr_adt
  double p = 2.0;
  double q = 2.0;
  /// fgr_adt only: penalize the flow gradient at the clean image (true) or at
  /// the deformed image (false).
  bool penalty_on_clean = true;
  FlowUnits units = FlowUnits::kNormalized;

  /// Spec with the family's inner attack: PGD eps 8/255, K 7 for at;
  /// multi-step flow eps 0.01, K 7 for adt and fgr_adt.
  static DefenseSpec defaults(DefenseFamily family, double lambda = 0.0);
  bool has_penalty() const;
  bool needs_higher_order() const;
  void validate() const;
};

struct LrSchedule {
  double initial = 0.1;
  std::vector<int> drop_epochs{30, 50};
  double factor = 0.1;

  /// Learning rate for a 0-based epoch; drops apply from epoch index d on.
  double at(int epoch) const;
};

struct TrainConfig {
  int epochs = 60;
  int batch_size = 128;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  LrSchedule lr;
  AugmentConfig augment;
  std::uint64_t seed = 0;

  void validate() const;
};

struct TrainingLoss {
  Tensor total;     // scalar on the caller's tape
  double base = 0;  // loss term without the penalty
  double penalty = 0;  // lambda-weighted, so total = base + penalty
  /// Mean per-example gradient norm that the penalty acts on (0 when unpenalized).
  double penalty_norm = 0;
};

/**
 * Training objective of `spec` on a batch. `params` are the network
 * parameters as they should appear in the graph (typically tape variables);
 * penalized families require them on a higher-order tape.
 */
TrainingLoss training_loss(const Network& net, std::span<const Tensor> params, const Tensor& x,
                           std::span<const int> y, const DefenseSpec& spec);

/// Convenience form using the network's own parameters (values only).
Tensor training_loss(const Network& net, const Tensor& x, std::span<const int> y, const DefenseSpec& spec);

/// Per-example ||d L / d v||_2 at the identity flow.
std::vector<double> flow_gradient_norms(const Network& net, const Tensor& x, std::span<const int> y,
                                        FlowUnits units = FlowUnits::kNormalized);
/// Per-example ||d L / d x||_2.
std::vector<double> input_gradient_norms(const Network& net, const Tensor& x, std::span<const int> y);

/// SGD with momentum and L2 weight decay: b <- m b + (g + wd t); t <- t - lr b.
class SgdMomentum {
 public:
  SgdMomentum(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}
  void step(std::vector<Tensor>& params, std::span<const Tensor> grads, double lr);
  const std::vector<Array>& buffers() const noexcept { return buffers_; }

 private:
  double momentum_;
  double weight_decay_;
  std::vector<Array> buffers_;
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  double lr = 0;
  double train_loss = 0;
  double clean_acc = 0;
  double penalty_norm = 0;
};

using TrainHistory = std::vector<EpochRecord>;

/// Trains `net` in place. Throws NumericError naming the first batch whose
/// loss or gradient is not finite.
TrainHistory train(Network& net, const Dataset& data, const DefenseSpec& spec, const TrainConfig& config);

void write_history_csv(std::ostream& out, const TrainHistory& history);

double accuracy(const Network& net, const Tensor& x, std::span<const int> y);

}  // namespace flowreg

#endif  // FLOWREG_DEFENSES_HPP
