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

#ifndef FLOWREG_EXPERIMENT_HPP
#define FLOWREG_EXPERIMENT_HPP

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "flowreg/config.hpp"
#include "flowreg/data.hpp"
#include "flowreg/nets.hpp"

namespace flowreg {

/// Command-line values that take precedence over the config file.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out;
  std::optional<Index> subset;
  std::optional<int> workers;
};

void apply_overrides(ExperimentConfig& config, const Overrides& overrides);

DatasetPair load_datasets(const ExperimentConfig& config);
ArchDescriptor architecture_for(const ExperimentConfig& config, const Dataset& data);

/// Loads a checkpoint and checks it against the configured architecture;
/// mismatches raise ConfigError.
Network load_model(const std::filesystem::path& path, const ArchDescriptor& expected);

/// Test indices used for evaluation (seed-selected, ascending).
std::vector<Index> evaluation_subset(const ExperimentConfig& config, const Dataset& test);

/// Fraction of images still classified correctly after the attack. Images are
/// attacked in fixed chunks, optionally in parallel; results do not depend on
/// `workers`.
double attacked_accuracy(const Network& net, const Dataset& test, const AttackSpec& spec, int workers = 1);

struct EvalRow {
  std::string name;
  double clean = 0;
  std::vector<double> attacked;  // one per attack column
};

struct EvalReport {
  std::vector<NamedAttack> attacks;
  std::vector<EvalRow> rows;
};

EvalRow evaluate_model(const std::string& name, const Network& net, const Dataset& test,
                       const std::vector<NamedAttack>& attacks, int workers = 1);
void write_eval_csv(std::ostream& out, const EvalReport& report);

struct SweepRow {
  std::string family;
  double parameter = 0;
  double accuracy = 0;
  double clean = 0;
};

std::vector<SweepRow> sweep(const Network& net, const Dataset& test, const ExperimentConfig& config);
void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows);

struct LandscapePoint {
  double a = 0;  // coefficient of the adversarial direction
  double b = 0;  // coefficient of the random direction
  double loss = 0;
};

/**
 * Cross-entropy of one image ([1, H, W, C]) over the lattice
 * v = a * v_adv + b * v_rand, a, b in [-extent, extent] on `grid` points each.
 * v_adv is the flow found by `attack` and v_rand a Gaussian flow drawn from
 * `seed`, both scaled to unit max-norm. Rows are ordered by a, then b.
 */
std::vector<LandscapePoint> loss_landscape(const Network& net, const Tensor& image, int label, const AttackSpec& attack,
                                           int grid, double extent, std::uint64_t seed);
void write_landscape_csv(std::ostream& out, const std::vector<LandscapePoint>& points);

/// Each command writes its CSV outputs plus manifest.json (last) into
/// config.out and returns the written file names.
std::vector<std::string> cmd_train(const ExperimentConfig& config);
std::vector<std::string> cmd_eval(const ExperimentConfig& config);
std::vector<std::string> cmd_sweep(const ExperimentConfig& config);
std::vector<std::string> cmd_landscape(const ExperimentConfig& config);
std::vector<std::string> cmd_lipschitz(const ExperimentConfig& config);

std::string version_string();

}  // namespace flowreg

#endif  // FLOWREG_EXPERIMENT_HPP
