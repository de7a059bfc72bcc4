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

// flowreg: train, evaluate and probe flow-regularized classifiers.
//
//   flowreg train --config run.ini [--seed N] [--out DIR]
//   flowreg eval  --config run.ini [--subset N] [--workers N]
//   flowreg sweep | landscape | lipschitz --config run.ini
//
// Exit codes: 0 success, 2 configuration error, 3 numeric failure, 1 other.

#include <CLI11.hpp>

#include <functional>
#include <iostream>
#include <map>

#include "flowreg/experiment.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Flow gradient regularization experiments", "flowreg"};
  app.set_version_flag("--version", flowreg::version_string());
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<long long> subset;
  std::optional<int> workers;

  using Command = std::function<std::vector<std::string>(const flowreg::ExperimentConfig&)>;
  const std::vector<std::pair<std::string, std::pair<std::string, Command>>> commands{
      {"train", {"Train a model with the configured defense", flowreg::cmd_train}},
      {"eval", {"Clean and attacked accuracy per checkpoint", flowreg::cmd_eval}},
      {"sweep", {"Accuracy over a list of attack budgets or balance constants", flowreg::cmd_sweep}},
      {"landscape", {"Loss over adversarial and random flow directions", flowreg::cmd_landscape}},
      {"lipschitz", {"Warp Jacobian Lipschitz estimate on the test subset", flowreg::cmd_lipschitz}},
  };
  std::map<CLI::App*, Command> handlers;
  for (const auto& [name, entry] : commands) {
    CLI::App* sub = app.add_subcommand(name, entry.first);
    sub->add_option("--config", config_path, "INI configuration file")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "Run seed");
    sub->add_option("--out", out, "Output directory");
    sub->add_option("--subset", subset, "Number of test images to evaluate")->check(CLI::NonNegativeNumber);
    sub->add_option("--workers", workers, "Parallel attack workers")->check(CLI::PositiveNumber);
    handlers[sub] = entry.second;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    flowreg::ExperimentConfig config = flowreg::load_config(config_path);
    flowreg::Overrides overrides;
    overrides.seed = seed;
    if (out) overrides.out = *out;
    if (subset) overrides.subset = *subset;
    overrides.workers = workers;
    flowreg::apply_overrides(config, overrides);
    for (const auto& [sub, handler] : handlers) {
      if (sub->parsed()) {
        const auto files = handler(config);
        for (const auto& f : files) std::cout << (config.out / f).string() << '\n';
      }
    }
  } catch (const flowreg::ConfigError& e) {
    std::cerr << "flowreg: config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const flowreg::NumericError& e) {
    std::cerr << "flowreg: numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "flowreg: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
