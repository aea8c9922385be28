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

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "balora/data.hpp"
#include "balora/network.hpp"
#include "balora/tensor.hpp"

namespace balora {

/// Row-major [rows x cols] Monte Carlo moments.
struct McPrediction {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t samples = 0;
  std::vector<double> mean;
  std::vector<double> var;  ///< population form, 1/S
};

/// S stochastic forward passes over the batch `x`. Regression networks report the raw
/// outputs, categorical networks the softmax probabilities. Draw s uses the stream
/// Rng(seed).split(s); draws run on worker_count() threads and are reduced in a fixed
/// order, so the result does not depend on the thread count. `workers` = 0 means
/// worker_count().
McPrediction mc_predict(const BaLoRANet& net, const Tensor& x, std::size_t samples, std::uint64_t seed,
                        std::size_t workers = 0);

/// Draw s of mc_predict(net, x, S, seed) for any S > s: raw outputs or class
/// probabilities, row-major [B x out].
std::vector<double> predictive_draw(const BaLoRANet& net, const Tensor& x, std::uint64_t seed, std::size_t s);

/// Law-of-total-variance split of the predictive variance.
///
/// Regression (gaussian head): per output, epistemic = Var_s f_s(x), aleatoric =
/// sigma_obs^2. Classification: with w_s the winning class of draw s, epistemic =
/// Var_s p_{w_s}, aleatoric = mean_s p_{w_s}(1 - p_{w_s}); the decomposed quantity is
/// the indicator that a label drawn from draw s equals w_s.
///
/// `total_joint` is the variance of that quantity over s_outer x s_inner joint draws
/// (inner draws sample the observation given the weights); `total_joint_se` is its
/// standard error treating the joint draws as independent (exact when s_inner = 1).
struct VarianceDecomposition {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> mean;
  std::vector<double> epistemic;
  std::vector<double> aleatoric;
  std::vector<double> total_joint;
  std::vector<double> total_joint_se;
};

VarianceDecomposition decompose_variance(const BaLoRANet& net, const Tensor& x, std::size_t s_outer,
                                         std::size_t s_inner, std::uint64_t seed, std::size_t workers = 0);

/// Expected calibration error of the max-probability confidence; equal-width bins,
/// a confidence on a bin edge falls in the upper bin, 1.0 in the last.
double ece(std::span<const std::vector<double>> probs, std::span<const std::size_t> labels, std::size_t bins = 15);
double ece_from_confidence(std::span<const double> confidence, std::span<const int> correct, std::size_t bins = 15);

/// Rank correlation with average ranks for ties. Throws ArgumentError on constant input.
double spearman(std::span<const double> u, std::span<const double> v);

struct TargetScaling {
  double mean = 0.0;
  double stddev = 1.0;
  double denormalize(double z) const { return z * stddev + mean; }
};

/// Mean absolute error; predictions are mapped through `scaling` first when given.
double mae(std::span<const double> preds, std::span<const double> targets, const TargetScaling* scaling = nullptr);

enum class EvalMode { deterministic, mc };
const char* to_string(EvalMode mode);
EvalMode eval_mode_from_string(const std::string& s);

struct SampleRecord {
  std::size_t id = 0;
  std::vector<double> pred_mean;  ///< outputs (regression) or class probabilities
  std::vector<double> target;     ///< regression targets
  std::optional<std::size_t> label;
  double var_total = 0.0;
  double var_epistemic = 0.0;
  double var_aleatoric = 0.0;
  double error = 0.0;  ///< squared error; (1 - p_label)^2 for classification
};

struct UQMetrics {
  double mae = 0.0;  ///< classification: mean of 1 - p_label
  std::optional<double> accuracy;
  std::optional<double> ece;
  std::optional<double> spearman_var_err;  ///< empty when the variances are constant
};

struct UQReport {
  EvalMode mode = EvalMode::mc;
  std::size_t mc_steps = 0;
  bool classification = false;
  std::vector<SampleRecord> per_sample;
  UQMetrics metrics;

  nlohmann::json to_json() const;
  /// Columns: id, pred, target, var_total, var_epi, var_ale, sq_error.
  void write_csv(const std::filesystem::path& path) const;
};

/// Deterministic mode evaluates the merged network (after checking it against the
/// unmerged deterministic forward); mc mode uses `mc_steps` >= 2 draws. Regression
/// targets and predictions are reported after applying `scaling`.
UQReport evaluate(const BaLoRANet& net, const Dataset& data, EvalMode mode, std::size_t mc_steps, std::uint64_t seed,
                  const TargetScaling& scaling = {});

}  // namespace balora
