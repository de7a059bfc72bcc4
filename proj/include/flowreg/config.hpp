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

#ifndef FLOWREG_CONFIG_HPP
#define FLOWREG_CONFIG_HPP

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "flowreg/attacks.hpp"
#include "flowreg/defenses.hpp"

namespace flowreg {

/// Invalid or unknown configuration entry; `key()` is "section.name".
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& message)
      : std::runtime_error(key.empty() ? message : key + ": " + message), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

/// One evaluation column: a short label (ss, ms, ob, gf, fgsm, pgd) and its attack.
struct NamedAttack {
  std::string label;
  AttackSpec spec;
};

struct ExperimentConfig {
  // [run]
  std::uint64_t seed = 0;
  std::filesystem::path out = "flowreg-out";
  Index subset = 500;
  int workers = 1;

  // [data]
  std::string dataset = "synth_shapes";  // synth_shapes, mnist, cifar10, cifar100
  std::filesystem::path data_root;       // falls back to $FLOWREG_DATA
  std::uint64_t data_seed = 0;
  Index train_size = 0;  // 0 keeps the full training split
  Index test_size = 500;  // synth_shapes only
  Index image_size = 16;  // synth_shapes only
  SynthOptions synth;     // synth_shapes only

  // [model]
  std::string arch = "cnn-mini";
  double width_multiplier = 1.0;

  // [defense]
  DefenseSpec defense;
  std::vector<double> igr_lambdas{3000, 5000, 7000};
  std::vector<double> fgr_lambdas{400, 700, 1000};
  double lambda_scale = 1.0;

  // [train]
  TrainConfig train;

  // [eval]
  std::vector<std::filesystem::path> checkpoints;
  std::vector<NamedAttack> attacks;

  // [sweep]
  std::string sweep_parameter = "epsilon";  // epsilon (ms) or c (ob)
  std::vector<double> sweep_values{0.0, 0.005, 0.01, 0.02};

  // [landscape]
  Index landscape_image = 0;
  int landscape_grid = 21;
  double landscape_extent = 0.02;

  /// Fully resolved configuration, for the run manifest.
  nlohmann::json echo() const;
  /// The attack used for a sweep point.
  AttackSpec sweep_attack(double value) const;
  /// The attack whose flow gives the landscape's adversarial direction.
  AttackSpec landscape_attack() const;
  std::filesystem::path resolved_data_root() const;
};

/// Parses INI text ([section] headers, key = value lines, ';' or '#' comments).
/// Unknown sections or keys and malformed values raise ConfigError.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);

}  // namespace flowreg

#endif  // FLOWREG_CONFIG_HPP
