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

#include "flowreg/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <exception>
#include <fstream>
#include <mutex>
#include <random>
#include <thread>

#include "flowreg/checkpoint.hpp"
#include "flowreg/defenses.hpp"
#include "flowreg/warp.hpp"

#ifndef FLOWREG_VERSION
#define FLOWREG_VERSION "0.0.0"
#endif

namespace flowreg {

namespace {

// Images per attack work item. Fixed so results never depend on the worker count.
constexpr Index kAttackChunk = 50;
constexpr Index kLandscapeChunk = 128;
constexpr Index kDefaultSynthTrain = 2000;

std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::ofstream open_output(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

// Runs body(item) for item in [0, count) on up to `workers` threads.
template <typename Body>
void parallel_for(Index count, int workers, Body body) {
  const int threads = static_cast<int>(std::min<Index>(std::max(workers, 1), count));
  if (threads <= 1) {
    for (Index i = 0; i < count; ++i) body(i);
    return;
  }
  std::atomic<Index> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (Index i = next++; i < count; i = next++) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(failure_mutex);
          if (!failure) failure = std::current_exception();
          next = count;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

class Manifest {
 public:
  Manifest(std::string command, const ExperimentConfig& config)
      : command_(std::move(command)), config_(config), start_(utc_now()) {
    std::filesystem::create_directories(config.out);
  }

  void add(const std::string& file) { files_.push_back(file); }
  void set(const std::string& key, nlohmann::json value) { extra_[key] = std::move(value); }

  std::vector<std::string> finish() {
    nlohmann::json j{{"command", command_},
                     {"version", version_string()},
                     {"seed", config_.seed},
                     {"config", config_.echo()},
                     {"start", start_},
                     {"end", utc_now()},
                     {"files", files_}};
    for (auto& [k, v] : extra_.items()) j[k] = v;
    auto out = open_output(config_.out / "manifest.json");
    out << j.dump(2) << '\n';
    files_.push_back("manifest.json");
    return files_;
  }

 private:
  std::string command_;
  const ExperimentConfig& config_;
  std::string start_;
  std::vector<std::string> files_;
  nlohmann::json extra_ = nlohmann::json::object();
};

Tensor unit_max_norm(Tensor v) {
  const double m = v.numel() == 0 ? 0.0 : v.array().abs().maxCoeff();
  if (m == 0.0) return v;
  return Tensor(v.shape(), v.array() / m);
}

std::vector<Network> load_checkpoints(const ExperimentConfig& config, const ArchDescriptor& expected,
                                      std::vector<std::string>& names) {
  std::vector<std::filesystem::path> paths = config.checkpoints;
  if (paths.empty()) {
    const auto fallback = config.out / "checkpoint.bin";
    if (!std::filesystem::exists(fallback)) throw ConfigError("eval.checkpoints", "no checkpoint given");
    paths.push_back(fallback);
  }
  std::vector<Network> nets;
  for (const auto& p : paths) {
    nets.push_back(load_model(p, expected));
    names.push_back(p.string());
  }
  return nets;
}

}  // namespace

std::string version_string() { return FLOWREG_VERSION; }

void apply_overrides(ExperimentConfig& config, const Overrides& overrides) {
  if (overrides.seed) {
    config.seed = *overrides.seed;
    config.defense.inner.seed = *overrides.seed;
    for (NamedAttack& a : config.attacks) a.spec.seed = *overrides.seed;
  }
  if (overrides.out) config.out = *overrides.out;
  if (overrides.subset) config.subset = *overrides.subset;
  if (overrides.workers) {
    if (*overrides.workers < 1) throw ConfigError("run.workers", "must be >= 1");
    config.workers = *overrides.workers;
  }
  config.train.seed = config.seed;
}

DatasetPair load_datasets(const ExperimentConfig& config) {
  DatasetPair pair;
  if (config.dataset == "synth_shapes") {
    const Index n = config.train_size > 0 ? config.train_size : kDefaultSynthTrain;
    pair.train = synth_shapes(n, config.image_size, config.data_seed, config.synth);
    pair.train.split = "train";
    pair.test = synth_shapes(config.test_size, config.image_size, config.data_seed ^ 0x7E57u, config.synth);
    pair.test.split = "test";
    return pair;
  }
  const auto root = config.resolved_data_root();
  if (root.empty()) throw ConfigError("data.root", "no dataset root (set data.root or FLOWREG_DATA)");
  if (config.dataset == "mnist") {
    pair = load_mnist_idx(root);
  } else {
    pair = load_cifar(root, config.dataset == "cifar10" ? 10 : 100);
  }
  if (config.train_size > 0 && config.train_size < pair.train.size()) {
    const auto idx = select_subset(pair.train.size(), config.train_size, config.data_seed);
    pair.train = pair.train.subset(idx);
  }
  return pair;
}

ArchDescriptor architecture_for(const ExperimentConfig& config, const Dataset& data) {
  return {config.arch, data.height(), data.width(), data.channels(), data.num_classes, config.width_multiplier};
}

Network load_model(const std::filesystem::path& path, const ArchDescriptor& expected) {
  Checkpoint ckpt = load_checkpoint(path);
  const ArchDescriptor& got = ckpt.net.descriptor();
  if (!(got == expected)) {
    throw ConfigError("model.arch", "checkpoint " + path.string() + " holds " + got.name + " for [" +
                                        std::to_string(got.height) + ", " + std::to_string(got.width) + ", " +
                                        std::to_string(got.channels) + "] with " + std::to_string(got.num_classes) +
                                        " classes, config expects " + expected.name + " for [" +
                                        std::to_string(expected.height) + ", " + std::to_string(expected.width) +
                                        ", " + std::to_string(expected.channels) + "] with " +
                                        std::to_string(expected.num_classes) + " classes");
  }
  return std::move(ckpt.net);
}

std::vector<Index> evaluation_subset(const ExperimentConfig& config, const Dataset& test) {
  return select_subset(test.size(), config.subset, config.seed);
}

double attacked_accuracy(const Network& net, const Dataset& test, const AttackSpec& spec, int workers) {
  const Index n = test.size();
  if (n == 0) throw std::invalid_argument("attacked_accuracy: empty test set");
  const Index chunks = (n + kAttackChunk - 1) / kAttackChunk;
  std::vector<Index> correct(static_cast<std::size_t>(chunks), 0);
  parallel_for(chunks, workers, [&](Index c) {
    std::vector<Index> idx;
    for (Index i = c * kAttackChunk; i < std::min(n, (c + 1) * kAttackChunk); ++i) idx.push_back(i);
    AttackSpec s = spec;
    s.index_offset = static_cast<std::uint64_t>(c * kAttackChunk);
    const std::vector<int> y = test.labels_at(idx);
    const AttackResult r = run_attack(net, test.images_at(idx), y, s);
    NoRecordGuard guard;
    const std::vector<int> pred = predict(net, r.adversarial);
    Index k = 0;
    for (std::size_t i = 0; i < y.size(); ++i) k += pred[i] == y[i];
    correct[static_cast<std::size_t>(c)] = k;
  });
  Index total = 0;
  for (Index k : correct) total += k;
  return static_cast<double>(total) / static_cast<double>(n);
}

EvalRow evaluate_model(const std::string& name, const Network& net, const Dataset& test,
                       const std::vector<NamedAttack>& attacks, int workers) {
  EvalRow row;
  row.name = name;
  row.clean = accuracy(net, test.images, test.labels);
  for (const NamedAttack& a : attacks) row.attacked.push_back(attacked_accuracy(net, test, a.spec, workers));
  return row;
}

void write_eval_csv(std::ostream& out, const EvalReport& report) {
  out << "checkpoint,clean";
  for (const NamedAttack& a : report.attacks) out << ',' << a.label;
  out << '\n';
  for (const EvalRow& r : report.rows) {
    out << r.name << ',' << format_number(r.clean);
    for (double v : r.attacked) out << ',' << format_number(v);
    out << '\n';
  }
}

std::vector<SweepRow> sweep(const Network& net, const Dataset& test, const ExperimentConfig& config) {
  if (config.sweep_values.empty()) throw ConfigError("sweep.values", "parameter list is empty");
  const double clean = accuracy(net, test.images, test.labels);
  std::vector<SweepRow> rows;
  for (double v : config.sweep_values) {
    const AttackSpec spec = config.sweep_attack(v);
    rows.push_back({to_string(spec.family), v, attacked_accuracy(net, test, spec, config.workers), clean});
  }
  return rows;
}

void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows) {
  out << "family,parameter,accuracy,clean\n";
  for (const SweepRow& r : rows) {
    out << r.family << ',' << format_number(r.parameter) << ',' << format_number(r.accuracy) << ','
        << format_number(r.clean) << '\n';
  }
}

std::vector<LandscapePoint> loss_landscape(const Network& net, const Tensor& image, int label, const AttackSpec& attack,
                                           int grid, double extent, std::uint64_t seed) {
  if (image.rank() != 4 || image.dim(0) != 1) throw ShapeError("loss_landscape: expected [1, H, W, C] image");
  if (grid < 1 || grid % 2 == 0) throw std::invalid_argument("loss_landscape: grid size must be odd");
  const Index h = image.dim(1), w = image.dim(2);
  const std::vector<int> y{label};
  const Tensor adv = unit_max_norm(run_attack(net, image, y, attack).perturbation);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Array noise(h * w * 2);
  for (Index i = 0; i < noise.size(); ++i) noise[i] = normal(rng);
  const Tensor rnd = unit_max_norm(Tensor({1, h, w, 2}, std::move(noise)));

  std::vector<double> coef(static_cast<std::size_t>(grid));
  const int half = (grid - 1) / 2;
  for (int i = 0; i < grid; ++i) {
    coef[static_cast<std::size_t>(i)] = half == 0 ? 0.0 : extent * static_cast<double>(i - half) / half;
  }
  std::vector<LandscapePoint> points;
  for (double a : coef)
    for (double b : coef) points.push_back({a, b, 0.0});

  NoRecordGuard guard;
  const Index total = static_cast<Index>(points.size()), flow_size = h * w * 2;
  const Index image_size = image.numel();
  for (Index start = 0; start < total; start += kLandscapeChunk) {
    const Index m = std::min(kLandscapeChunk, total - start);
    Array flows(m * flow_size), xs(m * image_size);
    for (Index k = 0; k < m; ++k) {
      const LandscapePoint& p = points[static_cast<std::size_t>(start + k)];
      flows.segment(k * flow_size, flow_size) = p.a * adv.array() + p.b * rnd.array();
      xs.segment(k * image_size, image_size) = image.array();
    }
    Shape xshape = image.shape();
    xshape[0] = m;
    const Tensor warped = bilinear_warp(Tensor(xshape, std::move(xs)),
                                        FlowField(Tensor({m, h, w, 2}, std::move(flows)), attack.units));
    const std::vector<int> labels(static_cast<std::size_t>(m), label);
    const std::vector<double> losses = per_example_loss(net.forward(warped), labels);
    for (Index k = 0; k < m; ++k) points[static_cast<std::size_t>(start + k)].loss = losses[static_cast<std::size_t>(k)];
  }
  return points;
}

void write_landscape_csv(std::ostream& out, const std::vector<LandscapePoint>& points) {
  out << "a,b,loss\n";
  for (const LandscapePoint& p : points) {
    out << format_number(p.a) << ',' << format_number(p.b) << ',' << format_number(p.loss) << '\n';
  }
}

std::vector<std::string> cmd_train(const ExperimentConfig& config) {
  Manifest manifest("train", config);
  const DatasetPair data = load_datasets(config);
  Network net = Network::build(architecture_for(config, data.train), config.seed);
  TrainConfig tc = config.train;
  tc.seed = config.seed;
  DefenseSpec spec = config.defense;
  spec.inner.seed = config.seed;
  const TrainHistory history = train(net, data.train, spec, tc);
  save_checkpoint(config.out / "checkpoint.bin", net, config.seed, tc.epochs);
  manifest.add("checkpoint.bin");
  {
    auto out = open_output(config.out / "history.csv");
    write_history_csv(out, history);
  }
  manifest.add("history.csv");
  return manifest.finish();
}

std::vector<std::string> cmd_eval(const ExperimentConfig& config) {
  if (config.attacks.empty()) throw ConfigError("eval.attacks", "attack grid is empty");
  Manifest manifest("eval", config);
  const DatasetPair data = load_datasets(config);
  std::vector<std::string> names;
  const std::vector<Network> nets = load_checkpoints(config, architecture_for(config, data.train), names);
  const std::vector<Index> subset = evaluation_subset(config, data.test);
  const Dataset test = data.test.subset(subset);
  EvalReport report;
  report.attacks = config.attacks;
  for (std::size_t i = 0; i < nets.size(); ++i) {
    report.rows.push_back(evaluate_model(names[i], nets[i], test, config.attacks, config.workers));
  }
  {
    auto out = open_output(config.out / "eval.csv");
    write_eval_csv(out, report);
  }
  manifest.add("eval.csv");
  manifest.set("subset", subset);
  return manifest.finish();
}

std::vector<std::string> cmd_sweep(const ExperimentConfig& config) {
  Manifest manifest("sweep", config);
  const DatasetPair data = load_datasets(config);
  std::vector<std::string> names;
  const std::vector<Network> nets = load_checkpoints(config, architecture_for(config, data.train), names);
  const std::vector<Index> subset = evaluation_subset(config, data.test);
  const std::vector<SweepRow> rows = sweep(nets.front(), data.test.subset(subset), config);
  {
    auto out = open_output(config.out / "sweep.csv");
    write_sweep_csv(out, rows);
  }
  manifest.add("sweep.csv");
  manifest.set("subset", subset);
  manifest.set("checkpoint", names.front());
  return manifest.finish();
}

std::vector<std::string> cmd_landscape(const ExperimentConfig& config) {
  Manifest manifest("landscape", config);
  const DatasetPair data = load_datasets(config);
  std::vector<std::string> names;
  const std::vector<Network> nets = load_checkpoints(config, architecture_for(config, data.train), names);
  if (config.landscape_image >= data.test.size()) {
    throw ConfigError("landscape.image", "index " + std::to_string(config.landscape_image) + " outside the test set of " +
                                             std::to_string(data.test.size()));
  }
  const std::vector<Index> idx{config.landscape_image};
  AttackSpec attack = config.landscape_attack();
  attack.seed = config.seed;
  const auto points = loss_landscape(nets.front(), data.test.images_at(idx), data.test.labels_at(idx).front(), attack,
                                     config.landscape_grid, config.landscape_extent, config.seed);
  {
    auto out = open_output(config.out / "landscape.csv");
    write_landscape_csv(out, points);
  }
  manifest.add("landscape.csv");
  manifest.set("checkpoint", names.front());
  return manifest.finish();
}

std::vector<std::string> cmd_lipschitz(const ExperimentConfig& config) {
  Manifest manifest("lipschitz", config);
  const DatasetPair data = load_datasets(config);
  const std::vector<Index> subset = evaluation_subset(config, data.test);
  const Tensor images = data.test.images_at(subset);
  const LipschitzEstimate est = estimate_lipschitz(std::span<const Tensor>(&images, 1), config.defense.units);
  {
    auto out = open_output(config.out / "lipschitz.csv");
    out << "norm_kind,sample_count,value\n"
        << est.norm_kind << ',' << est.sample_count << ',' << format_number(est.value) << '\n';
  }
  manifest.add("lipschitz.csv");
  manifest.set("subset", subset);
  return manifest.finish();
}

}  // namespace flowreg
