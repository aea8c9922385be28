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

// Training objective: closed-form KL to the dropout prior, its normalised form, the
// single-sample ELBO estimator, AdamW and the training loop.
//
// The KL between N(w, alpha w^2) and N(0, p/(1-p) w^2) does not depend on w:
//
//   kl(alpha, p) = 1/2 ((alpha + 1)(1 - p)/p - 1 + log(p/(1-p)) - log alpha)

#include <cstddef>
#include <cstdint>
#include <functional>
#include <ostream>
#include <span>
#include <utility>
#include <vector>

#include "balora/adapter.hpp"
#include "balora/data.hpp"
#include "balora/network.hpp"
#include "balora/rng.hpp"
#include "balora/tensor.hpp"

namespace balora {

struct PriorConfig {
  double p = 0.5;
  void validate() const;
};

struct TrainConfig {
  double lr = 1e-3;
  std::size_t epochs = 1;
  std::size_t batch_size = 32;
  double kl_weight = 1.0;
  double warmup_fraction = 0.0;
  double weight_decay = 0.0;
  double grad_clip_norm = 1.0;
  std::uint64_t seed = 0;
  void validate() const;
};

/// Per-entry KL. Throws ArgumentError for alpha outside `bounds` or p outside (0,1).
double kl_per_entry(double alpha, double p, const AlphaBounds& bounds = {});
/// Taped elementwise KL of a tensor of alphas.
Tensor kl_per_entry(const Tensor& alpha, double p);

/// Largest KL over the clamp range: max(kl(alpha_min), kl(alpha_max)).
double kl_max(double p, const AlphaBounds& bounds = {});

/// Mean over layers of kl(alpha_l, p) / kl_max. The per-entry KL is the same for all
/// r*d entries of a layer, so dividing the layer sum by r*d leaves kl(alpha_l, p).
double kl_normalized(std::span<const double> alpha_per_layer, double p,
                     std::span<const std::pair<std::size_t, std::size_t>> ranks_dims,
                     const AlphaBounds& bounds = {});
/// Taped batch form: mean over rows and layers of alpha [B x L].
Tensor kl_normalized(const Tensor& alpha, double p, const AlphaBounds& bounds = {});

/// Mean negative log-likelihood of `batch` under the network output.
Tensor negative_log_likelihood(const BaLoRANet& net, const Tensor& output, const Dataset& batch);

struct ElboTerms {
  Tensor loss;       ///< nll + kl_weight * kl_normalized (taped)
  double nll = 0.0;
  double kl_normalized = 0.0;
  std::vector<double> alpha_mean;  ///< per adapted layer, averaged over the batch
};

/// Loss with caller-supplied noise (one [B x r_l] tensor per adapted layer).
ElboTerms elbo_loss(const BaLoRANet& net, const Dataset& batch, const PriorConfig& prior, double kl_weight,
                    const std::vector<Tensor>& noise);
/// One ELBO estimate with a fresh noise draw per layer and per example.
ElboTerms elbo_step(const BaLoRANet& net, const Dataset& batch, const PriorConfig& prior, const TrainConfig& cfg,
                    Rng& rng);

/// Scales every gradient by min(1, max_norm / ||g||); returns the norm before clipping.
double clip_global_norm(std::vector<std::vector<double>>& grads, double max_norm);

/// AdamW with decoupled weight decay, linear warmup then linear decay, global-norm clipping.
class AdamW {
 public:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  AdamW(std::vector<Tensor> params, const TrainConfig& cfg, std::size_t total_steps);

  double learning_rate(std::size_t step) const;

  struct StepInfo {
    double lr = 0.0;
    double grad_norm = 0.0;     ///< before clipping
    double applied_norm = 0.0;  ///< after clipping
  };
  /// Reads the gradients of the tracked parameters (missing grads count as zero).
  StepInfo step();
  std::size_t steps_taken() const { return t_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  TrainConfig cfg_;
  std::size_t total_steps_;
  std::size_t warmup_steps_;
  std::size_t t_ = 0;
};

struct TrainResult {
  std::vector<double> step_losses;
  std::size_t steps = 0;
  double final_loss = 0.0;
};

/// Minibatch training of the trainable parameters. One JSON object per step is written
/// to `metrics` when non-null. Throws TapeError if a frozen parameter receives gradient.
TrainResult train(BaLoRANet& net, const Dataset& data, const PriorConfig& prior, const TrainConfig& cfg,
                  std::ostream* metrics = nullptr);

}  // namespace balora
