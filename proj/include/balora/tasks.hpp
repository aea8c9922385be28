// Copyright 2026 The BaLoRA Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Synthetic tasks with a source/target shift, toy backbones and baselines.
//
// Every task draws a source distribution (used to pre-train the backbone) and a shifted
// target distribution (train/val/test, used for adaptation):
//
//   linear           y = W x + b + noise * eps; target adds a rank-one term shift * u v^T x
//   heteroscedastic  y = f(x) + sigma(x) eps, sigma(x) = noise + noise_slope * |x|;
//                    target adds shift * sin(u^T x)
//   two_moons        interleaved half circles in the first two coordinates, remaining
//                    coordinates are noise; target rotates the plane by `shift` radians
//   blobs            d_out Gaussian clusters; target translates every centre by `shift`

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "balora/config.hpp"
#include "balora/data.hpp"
#include "balora/network.hpp"
#include "balora/uncertainty.hpp"
#include "balora/variational.hpp"

namespace balora {

enum class TaskKind { linear, heteroscedastic, two_moons, blobs };
const char* to_string(TaskKind kind);
TaskKind task_kind_from_string(const std::string& s);

struct SyntheticTask {
  TaskKind kind = TaskKind::heteroscedastic;
  std::size_t d_in = 4;
  std::size_t d_out = 1;  ///< number of classes for the classification tasks
  std::size_t n_pretrain = 1024;
  std::size_t n_train = 512;
  std::size_t n_val = 128;
  std::size_t n_test = 256;
  double noise = 0.1;
  double noise_slope = 0.5;
  double shift = 1.0;
  std::uint64_t seed = 0;

  bool classification() const { return kind == TaskKind::two_moons || kind == TaskKind::blobs; }
  Likelihood default_likelihood() const { return classification() ? Likelihood::categorical : Likelihood::gaussian; }
  void validate() const;
};

struct TaskData {
  Dataset pretrain, train, val, test;
  /// Regression targets are stored normalised with the target-train mean/std; this maps
  /// them back. Identity for classification.
  TargetScaling scaling;
};

/// Reproducible from task.seed. Regression targets are normalised (see TaskData).
TaskData generate(const SyntheticTask& task);

/// Ground-truth observation noise standard deviation at x (heteroscedastic task), in
/// the normalised target units used by TaskData.
double true_noise_std(const SyntheticTask& task, const TaskData& data, std::span<const double> x);

/// CSV with header x0..x{d-1} followed by y0.. (regression) or label (classification).
void write_dataset_csv(const std::filesystem::path& path, const Dataset& data);
Dataset read_dataset_csv(const std::filesystem::path& path);

/// Loads the splits from `dir` when a cache for exactly this task exists, otherwise
/// generates and writes them (pretrain.csv, train.csv, val.csv, test.csv, task.json).
TaskData load_or_generate(const SyntheticTask& task, const std::filesystem::path& dir);

struct BackboneSpec {
  std::vector<std::size_t> hidden = {32, 32};
};

/// Fully trainable MLP fitted to the source split.
BaLoRANet pretrain_backbone(const TaskData& data, Likelihood likelihood, const BackboneSpec& spec,
                            const TrainConfig& cfg);

struct AdaptResult {
  BaLoRANet net;
  TrainResult log;
  double seconds = 0.0;
};

/// Copies the backbone, freezes it, attaches adapters and trains them on `train`.
AdaptResult adapt(const BaLoRANet& backbone, const Dataset& train, const AdapterOptions& adapter,
                  const PriorConfig& prior, const TrainConfig& cfg, std::ostream* metrics = nullptr);

AdaptResult pretrain_then_adapt(const TaskData& data, Likelihood likelihood, const BackboneSpec& spec,
                                const TrainConfig& pretrain_cfg, const AdapterOptions& adapter,
                                const PriorConfig& prior, const TrainConfig& cfg, std::ostream* metrics = nullptr);

/// Plain-LoRA adapter sets over one shared frozen backbone, differing only by seed.
struct EnsembleBaseline {
  std::vector<BaLoRANet> members;
  std::vector<double> member_seconds;
};

EnsembleBaseline train_ensemble(const BaLoRANet& backbone, const Dataset& train, std::size_t members,
                                AdapterOptions adapter, const TrainConfig& cfg);

/// Mean and population variance of the members' deterministic predictions (outputs or
/// class probabilities). Throws ArgumentError for fewer than two members.
McPrediction run_ensemble(const EnsembleBaseline& ensemble, const Tensor& x);

/// Mean squared error of the deterministic forward on a regression set.
double deterministic_mse(const BaLoRANet& net, const Dataset& data);

/// Everything a run needs, read from a flat key = value file.
struct ExperimentConfig {
  SyntheticTask task;
  std::optional<Likelihood> likelihood;  ///< defaults to the task's natural head
  BackboneSpec backbone;
  TrainConfig pretrain;
  AdapterOptions adapter;
  PriorConfig prior;
  TrainConfig train;
  std::size_t mc_steps = 100;
  std::size_t ensemble_members = 5;

  Likelihood head() const { return likelihood.value_or(task.default_likelihood()); }

  /// Consumes known keys and rejects anything else (ConfigError names the key).
  static ExperimentConfig from_config(KeyValueConfig& kv);
  static ExperimentConfig load(const std::filesystem::path& path);
  void validate() const;
  nlohmann::json to_json() const;
};

nlohmann::json to_json(const SyntheticTask& task);
nlohmann::json to_json(const TrainConfig& cfg);
nlohmann::json to_json(const AdapterOptions& opts);

}  // namespace balora
