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

#include "flowreg/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>

namespace flowreg {

namespace {

namespace pt = boost::property_tree;

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r\n");
  if (begin == std::string::npos) return {};
  const auto end = s.find_last_not_of(" \t\r\n");
  return s.substr(begin, end - begin + 1);
}

double to_double(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double d = std::stod(value, &used);
    if (used == value.size() && std::isfinite(d)) return d;
  } catch (const std::exception&) {
  }
  throw ConfigError(key, "expected a number, got '" + value + "'");
}

long long to_integer(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(value, &used);
    if (used == value.size()) return v;
  } catch (const std::exception&) {
  }
  throw ConfigError(key, "expected an integer, got '" + value + "'");
}

long long to_nonnegative(const std::string& key, const std::string& value) {
  const long long v = to_integer(key, value);
  if (v < 0) throw ConfigError(key, "must be >= 0");
  return v;
}

bool to_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes" || value == "on") return true;
  if (value == "false" || value == "0" || value == "no" || value == "off") return false;
  throw ConfigError(key, "expected true or false, got '" + value + "'");
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> out;
  std::stringstream in(value);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<double> to_doubles(const std::string& key, const std::string& value) {
  std::vector<double> out;
  for (const std::string& item : split_list(value)) out.push_back(to_double(key, item));
  return out;
}

const std::vector<std::string> kAttackLabels{"ss", "ms", "ob", "gf", "fgsm", "pgd"};
const std::vector<std::string> kDatasets{"synth_shapes", "mnist", "cifar10", "cifar100"};

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (const auto& s : items) out += (out.empty() ? "" : ", ") + s;
  return out;
}

// Attack settings from [eval]; optional values stay unset until resolved.
struct AttackSettings {
  std::vector<std::string> labels{"ss", "ms", "ob", "gf"};
  double ss_epsilon = 0.01;
  double ms_epsilon = 0.01;
  int ms_iterations = 20;
  std::optional<double> ms_step;
  double ob_c = 10.0;
  int ob_iterations = 100;
  double ob_step = 0.01;
  double gf_c = 10.0;
  double gf_epsilon = 0.01;
  EsSettings gf;
  double fgsm_epsilon = 8.0 / 255.0;
  double pgd_epsilon = 8.0 / 255.0;
  int pgd_iterations = 20;
  FlowUnits units = FlowUnits::kNormalized;
  double kappa = 0.0;
};

AttackSpec make_attack(const std::string& label, const AttackSettings& s, std::uint64_t seed) {
  AttackSpec a;
  a.seed = seed;
  a.units = s.units;
  a.kappa = s.kappa;
  if (label == "ss") {
    a.family = AttackFamily::kSingleStepFlow;
    a.epsilon = s.ss_epsilon;
    a.iterations = 1;
  } else if (label == "ms") {
    a.family = AttackFamily::kMultiStepFlow;
    a.epsilon = s.ms_epsilon;
    a.iterations = s.ms_iterations;
    a.step_size = s.ms_step;
  } else if (label == "ob") {
    a.family = AttackFamily::kOptFlow;
    a.balance = s.ob_c;
    a.iterations = s.ob_iterations;
    a.step_size = s.ob_step;
  } else if (label == "gf") {
    a.family = AttackFamily::kEsFlow;
    a.balance = s.gf_c;
    a.epsilon = s.gf_epsilon;
    a.es = s.gf;
  } else if (label == "fgsm") {
    a.family = AttackFamily::kSingleStepIntensity;
    a.epsilon = s.fgsm_epsilon;
    a.iterations = 1;
  } else {
    a.family = AttackFamily::kMultiStepIntensity;
    a.epsilon = s.pgd_epsilon;
    a.iterations = s.pgd_iterations;
  }
  return a;
}

struct Parser {
  ExperimentConfig& cfg;
  AttackSettings& atk;
  std::optional<double>& lambda;
  std::optional<double>& inner_epsilon;
  std::optional<int>& inner_iterations;
  std::optional<double>& inner_step;
  std::optional<std::string>& family;

  using Handler = std::function<void(const std::string& key, const std::string& value)>;

  std::map<std::string, Handler> handlers() {
    std::map<std::string, Handler> h;
    auto integer = [](int& target, long long lo) {
      return [&target, lo](const std::string& k, const std::string& v) {
        const long long x = to_integer(k, v);
        if (x < lo) throw ConfigError(k, "must be >= " + std::to_string(lo));
        target = static_cast<int>(x);
      };
    };
    auto index = [](Index& target) {
      return [&target](const std::string& k, const std::string& v) { target = to_nonnegative(k, v); };
    };
    auto positive = [](double& target) {
      return [&target](const std::string& k, const std::string& v) {
        target = to_double(k, v);
        if (!(target > 0.0)) throw ConfigError(k, "must be > 0");
      };
    };
    auto nonneg = [](double& target) {
      return [&target](const std::string& k, const std::string& v) {
        target = to_double(k, v);
        if (!(target >= 0.0)) throw ConfigError(k, "must be >= 0");
      };
    };
    auto units = [](FlowUnits& target) {
      return [&target](const std::string& k, const std::string& v) {
        try {
          target = parse_flow_units(v);
        } catch (const std::exception& e) {
          throw ConfigError(k, e.what());
        }
      };
    };

    h["run.seed"] = [this](const std::string& k, const std::string& v) {
      cfg.seed = static_cast<std::uint64_t>(to_nonnegative(k, v));
    };
    h["run.out"] = [this](const std::string&, const std::string& v) { cfg.out = v; };
    h["run.subset"] = index(cfg.subset);
    h["run.workers"] = integer(cfg.workers, 1);

    h["data.dataset"] = [this](const std::string& k, const std::string& v) {
      if (std::find(kDatasets.begin(), kDatasets.end(), v) == kDatasets.end()) {
        throw ConfigError(k, "unknown dataset '" + v + "' (valid: " + join(kDatasets) + ")");
      }
      cfg.dataset = v;
    };
    h["data.root"] = [this](const std::string&, const std::string& v) { cfg.data_root = v; };
    h["data.seed"] = [this](const std::string& k, const std::string& v) {
      cfg.data_seed = static_cast<std::uint64_t>(to_nonnegative(k, v));
    };
    h["data.train_size"] = index(cfg.train_size);
    h["data.test_size"] = index(cfg.test_size);
    h["data.image_size"] = [this](const std::string& k, const std::string& v) {
      cfg.image_size = to_integer(k, v);
      if (cfg.image_size < 8) throw ConfigError(k, "must be >= 8");
    };
    h["data.min_radius"] = positive(cfg.synth.min_radius);
    h["data.max_radius"] = positive(cfg.synth.max_radius);
    h["data.min_contrast"] = positive(cfg.synth.min_contrast);
    h["data.noise"] = nonneg(cfg.synth.noise);
    h["data.clutter"] = integer(cfg.synth.clutter, 0);
    h["data.augment"] = [this](const std::string& k, const std::string& v) { cfg.train.augment.enabled = to_bool(k, v); };
    h["data.augment_pad"] = index(cfg.train.augment.pad);

    h["model.arch"] = [this](const std::string& k, const std::string& v) {
      const auto names = architecture_names();
      if (std::find(names.begin(), names.end(), v) == names.end()) {
        throw ConfigError(k, "unknown architecture '" + v + "' (valid: " +
                                 join(std::vector<std::string>(names.begin(), names.end())) + ")");
      }
      cfg.arch = v;
    };
    h["model.width_multiplier"] = positive(cfg.width_multiplier);

    h["defense.family"] = [this](const std::string& k, const std::string& v) {
      try {
        parse_defense_family(v);
      } catch (const std::exception& e) {
        throw ConfigError(k, e.what());
      }
      family = v;
    };
    h["defense.lambda"] = [this](const std::string& k, const std::string& v) {
      lambda = to_double(k, v);
      if (!(*lambda >= 0.0)) throw ConfigError(k, "must be >= 0");
    };
    h["defense.lambda_scale"] = nonneg(cfg.lambda_scale);
    h["defense.igr_lambdas"] = [this](const std::string& k, const std::string& v) { cfg.igr_lambdas = to_doubles(k, v); };
    h["defense.fgr_lambdas"] = [this](const std::string& k, const std::string& v) { cfg.fgr_lambdas = to_doubles(k, v); };
    h["defense.penalty_on_clean"] = [this](const std::string& k, const std::string& v) {
      cfg.defense.penalty_on_clean = to_bool(k, v);
    };
    h["defense.inner_epsilon"] = [this](const std::string& k, const std::string& v) {
      inner_epsilon = to_double(k, v);
      if (!(*inner_epsilon >= 0.0)) throw ConfigError(k, "must be >= 0");
    };
    h["defense.inner_iterations"] = [this](const std::string& k, const std::string& v) {
      inner_iterations = static_cast<int>(to_integer(k, v));
      if (*inner_iterations < 1) throw ConfigError(k, "must be >= 1");
    };
    h["defense.inner_step"] = [this](const std::string& k, const std::string& v) {
      inner_step = to_double(k, v);
      if (!(*inner_step > 0.0)) throw ConfigError(k, "must be > 0");
    };
    h["defense.units"] = units(cfg.defense.units);

    h["train.epochs"] = integer(cfg.train.epochs, 1);
    h["train.batch_size"] = integer(cfg.train.batch_size, 1);
    h["train.lr"] = positive(cfg.train.lr.initial);
    h["train.momentum"] = nonneg(cfg.train.momentum);
    h["train.weight_decay"] = nonneg(cfg.train.weight_decay);
    h["train.lr_drop_epochs"] = [this](const std::string& k, const std::string& v) {
      cfg.train.lr.drop_epochs.clear();
      for (const std::string& item : split_list(v)) cfg.train.lr.drop_epochs.push_back(static_cast<int>(to_integer(k, item)));
    };
    h["train.lr_drop_factor"] = positive(cfg.train.lr.factor);

    h["eval.checkpoints"] = [this](const std::string&, const std::string& v) {
      cfg.checkpoints.clear();
      for (const std::string& item : split_list(v)) cfg.checkpoints.emplace_back(item);
    };
    h["eval.attacks"] = [this](const std::string& k, const std::string& v) {
      atk.labels = split_list(v);
      if (atk.labels.empty()) throw ConfigError(k, "attack grid is empty");
      for (const std::string& l : atk.labels) {
        if (std::find(kAttackLabels.begin(), kAttackLabels.end(), l) == kAttackLabels.end()) {
          throw ConfigError(k, "unknown attack '" + l + "' (valid: " + join(kAttackLabels) + ")");
        }
      }
    };
    h["eval.ss_epsilon"] = nonneg(atk.ss_epsilon);
    h["eval.ms_epsilon"] = nonneg(atk.ms_epsilon);
    h["eval.ms_iterations"] = integer(atk.ms_iterations, 1);
    h["eval.ms_step"] = [this](const std::string& k, const std::string& v) {
      atk.ms_step = to_double(k, v);
      if (!(*atk.ms_step > 0.0)) throw ConfigError(k, "must be > 0");
    };
    h["eval.ob_c"] = nonneg(atk.ob_c);
    h["eval.ob_iterations"] = integer(atk.ob_iterations, 1);
    h["eval.ob_step"] = positive(atk.ob_step);
    h["eval.gf_c"] = nonneg(atk.gf_c);
    h["eval.gf_epsilon"] = nonneg(atk.gf_epsilon);
    h["eval.gf_parents"] = integer(atk.gf.parents, 1);
    h["eval.gf_offspring"] = integer(atk.gf.offspring, 1);
    h["eval.gf_generations"] = integer(atk.gf.generations, 0);
    h["eval.gf_sigma"] = [this](const std::string& k, const std::string& v) {
      atk.gf.sigma = to_double(k, v);
      if (!(*atk.gf.sigma >= 0.0)) throw ConfigError(k, "must be >= 0");
    };
    h["eval.fgsm_epsilon"] = nonneg(atk.fgsm_epsilon);
    h["eval.pgd_epsilon"] = nonneg(atk.pgd_epsilon);
    h["eval.pgd_iterations"] = integer(atk.pgd_iterations, 1);
    h["eval.units"] = units(atk.units);
    h["eval.kappa"] = nonneg(atk.kappa);

    h["sweep.parameter"] = [this](const std::string& k, const std::string& v) {
      if (v != "epsilon" && v != "c") throw ConfigError(k, "must be 'epsilon' or 'c', got '" + v + "'");
      cfg.sweep_parameter = v;
    };
    h["sweep.values"] = [this](const std::string& k, const std::string& v) { cfg.sweep_values = to_doubles(k, v); };

    h["landscape.image"] = index(cfg.landscape_image);
    h["landscape.grid"] = integer(cfg.landscape_grid, 1);
    h["landscape.extent"] = nonneg(cfg.landscape_extent);
    return h;
  }
};

double middle(const std::vector<double>& grid, const std::string& key) {
  if (grid.empty()) throw ConfigError(key, "lambda grid is empty");
  return grid[grid.size() / 2];
}

}  // namespace

ExperimentConfig parse_config(const std::string& text) {
  pt::ptree tree;
  try {
    std::istringstream in(text);
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("", "malformed config (line " + std::to_string(e.line()) + "): " + e.message());
  }

  ExperimentConfig cfg;
  AttackSettings atk;
  std::optional<double> lambda, inner_epsilon, inner_step;
  std::optional<int> inner_iterations;
  std::optional<std::string> family;
  Parser parser{cfg, atk, lambda, inner_epsilon, inner_iterations, inner_step, family};
  const auto handlers = parser.handlers();

  for (const auto& [section, entries] : tree) {
    if (entries.empty() && !entries.data().empty()) {
      throw ConfigError(section, "key outside of any [section]");
    }
    for (const auto& [name, node] : entries) {
      const std::string key = section + "." + name;
      const auto it = handlers.find(key);
      if (it == handlers.end()) throw ConfigError(key, "unknown config key");
      it->second(key, trim(node.data()));
    }
    if (entries.empty()) {
      bool known = false;
      for (const auto& [k, _] : handlers) known = known || k.rfind(section + ".", 0) == 0;
      if (!known) throw ConfigError(section, "unknown config section");
    }
  }

  const DefenseFamily fam = family ? parse_defense_family(*family) : DefenseFamily::kStandard;
  double lam = 0.0;
  if (fam == DefenseFamily::kIgr) {
    lam = lambda.value_or(middle(cfg.igr_lambdas, "defense.igr_lambdas"));
  } else if (fam == DefenseFamily::kFgr || fam == DefenseFamily::kFgrAdt) {
    lam = lambda.value_or(middle(cfg.fgr_lambdas, "defense.fgr_lambdas"));
  } else {
    lam = lambda.value_or(0.0);
  }
  const bool clean = cfg.defense.penalty_on_clean;
  const FlowUnits dunits = cfg.defense.units;
  cfg.defense = DefenseSpec::defaults(fam, lam * cfg.lambda_scale);
  cfg.defense.penalty_on_clean = clean;
  cfg.defense.units = dunits;
  if (fam != DefenseFamily::kAt) cfg.defense.inner.units = dunits;
  if (inner_epsilon) cfg.defense.inner.epsilon = *inner_epsilon;
  if (inner_iterations) cfg.defense.inner.iterations = *inner_iterations;
  if (inner_step) cfg.defense.inner.step_size = inner_step;
  cfg.defense.inner.seed = cfg.seed;

  for (const std::string& label : atk.labels) cfg.attacks.push_back({label, make_attack(label, atk, cfg.seed)});

  try {
    cfg.train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("train", e.what());
  }
  try {
    cfg.defense.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("defense", e.what());
  }
  if (cfg.landscape_grid % 2 == 0) throw ConfigError("landscape.grid", "must be odd so the centre is the clean point");
  if (cfg.sweep_values.empty()) throw ConfigError("sweep.values", "must list at least one value");
  for (std::size_t i = 1; i < cfg.sweep_values.size(); ++i) {
    if (cfg.sweep_values[i] < cfg.sweep_values[i - 1]) throw ConfigError("sweep.values", "must be non-decreasing");
  }
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", "cannot read config file " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_config(buffer.str());
}

AttackSpec ExperimentConfig::sweep_attack(double value) const {
  const std::string label = sweep_parameter == "epsilon" ? "ms" : "ob";
  AttackSpec a;
  bool found = false;
  for (const NamedAttack& na : attacks) {
    if (na.label == label) {
      a = na.spec;
      found = true;
    }
  }
  if (!found) a = make_attack(label, AttackSettings{}, seed);
  a.seed = seed;
  if (sweep_parameter == "epsilon") {
    a.epsilon = value;
  } else {
    a.balance = value;
  }
  return a;
}

AttackSpec ExperimentConfig::landscape_attack() const {
  for (const NamedAttack& na : attacks) {
    if (na.label == "ms") return na.spec;
  }
  AttackSpec a = make_attack("ms", AttackSettings{}, seed);
  return a;
}

std::filesystem::path ExperimentConfig::resolved_data_root() const {
  if (!data_root.empty()) return data_root;
  if (const char* env = std::getenv("FLOWREG_DATA"); env != nullptr && *env != '\0') return env;
  return {};
}

nlohmann::json ExperimentConfig::echo() const {
  nlohmann::json attacks_json = nlohmann::json::array();
  for (const NamedAttack& na : attacks) {
    nlohmann::json j = to_json(na.spec);
    j["label"] = na.label;
    attacks_json.push_back(j);
  }
  std::vector<std::string> ckpts;
  for (const auto& p : checkpoints) ckpts.push_back(p.string());
  return {
      {"run", {{"seed", seed}, {"out", out.string()}, {"subset", subset}, {"workers", workers}}},
      {"data",
       {{"dataset", dataset},
        {"root", resolved_data_root().string()},
        {"seed", data_seed},
        {"train_size", train_size},
        {"test_size", test_size},
        {"image_size", image_size},
        {"synth",
         {{"min_radius", synth.min_radius},
          {"max_radius", synth.max_radius},
          {"min_contrast", synth.min_contrast},
          {"noise", synth.noise},
          {"clutter", synth.clutter}}},
        {"augment", train.augment.enabled},
        {"augment_pad", train.augment.pad}}},
      {"model", {{"arch", arch}, {"width_multiplier", width_multiplier}}},
      {"defense",
       {{"family", to_string(defense.family)},
        {"lambda", defense.lambda},
        {"lambda_scale", lambda_scale},
        {"igr_lambdas", igr_lambdas},
        {"fgr_lambdas", fgr_lambdas},
        {"p", defense.p},
        {"q", defense.q},
        {"penalty_on_clean", defense.penalty_on_clean},
        {"units", to_string(defense.units)},
        {"inner", to_json(defense.inner)}}},
      {"train",
       {{"epochs", train.epochs},
        {"batch_size", train.batch_size},
        {"lr", train.lr.initial},
        {"lr_drop_epochs", train.lr.drop_epochs},
        {"lr_drop_factor", train.lr.factor},
        {"momentum", train.momentum},
        {"weight_decay", train.weight_decay}}},
      {"eval", {{"checkpoints", ckpts}, {"attacks", attacks_json}}},
      {"sweep", {{"parameter", sweep_parameter}, {"values", sweep_values}}},
      {"landscape", {{"image", landscape_image}, {"grid", landscape_grid}, {"extent", landscape_extent}}},
  };
}

}  // namespace flowreg
