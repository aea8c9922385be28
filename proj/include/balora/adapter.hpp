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

#include "balora/rng.hpp"
#include "balora/tensor.hpp"

namespace balora {

/// Admissible range of the per-layer noise scale alpha. Applied after the softplus of
/// the inference network; the endpoints also define the KL normaliser.
struct AlphaBounds {
  double min = 1e-6;
  double max = 1e3;
};

/// Frozen base weights plus a low-rank adapter whose reduction matrix carries
/// multiplicative Gaussian noise: omega_A[i,j] ~ N(W_A[i,j], alpha * W_A[i,j]^2).
///
/// The update is scaled by `lora_scale` (lora_alpha / r); the scale multiplies the
/// noise path too, so output variances pick up lora_scale^2.
struct BaLoRALayer {
  Tensor base;            ///< W0 [k x d], never requires grad
  Tensor reduction;       ///< W_A [r x d]
  Tensor reconstruction;  ///< W_B [k x r]
  std::size_t rank = 0;
  double lora_scale = 1.0;

  std::size_t in_dim() const { return base.cols(); }
  std::size_t out_dim() const { return base.rows(); }
};

/// Exact output law of one adapted layer for a fixed input:
/// N(mean, W_B diag(d_vec) W_B^T), with d_vec = alpha * lora_scale^2 * (W_A^2 x^2).
struct PredictiveGaussian {
  Tensor mean;            ///< [k]
  Tensor d_vec;           ///< [r], non-negative
  Tensor reconstruction;  ///< shares storage with the layer's W_B

  /// Materialised k x k covariance; test and diagnostics use only.
  Tensor covariance() const;
  /// One exact draw: mean + W_B (sqrt(d_vec) .* eps), eps ~ N(0, I_r). O(k r).
  Tensor sample(Rng& rng) const;
};

/// W_A ~ N(0, init_std^2), W_B = 0. `base` must be [k x d]; it is detached and frozen.
BaLoRALayer init_layer(Rng& rng, Tensor base, std::size_t rank, double init_std, double lora_scale);
/// As above with a random frozen base W0 ~ N(0, 1/d).
BaLoRALayer init_layer(Rng& rng, std::size_t d, std::size_t k, std::size_t rank, double init_std,
                       double lora_scale);

/// W0 x + lora_scale W_B W_A x, for x of extent d.
Tensor forward_deterministic(const BaLoRALayer& layer, const Tensor& x);

/// Throws ArgumentError when alpha <= 0 or is not finite.
PredictiveGaussian analytic_predictive(const BaLoRALayer& layer, const Tensor& x, double alpha);

/// Exact posterior-predictive draw; noise is sampled in R^r and lifted by W_B.
Tensor sample_lowrank(const BaLoRALayer& layer, const Tensor& x, double alpha, Rng& rng);

/// Largest output dimension the dense oracle sampler accepts.
inline constexpr std::size_t kFullCovMaxDim = 2048;

/// Reference sampler: forms Sigma + ridge I, Cholesky-factorises it and returns
/// mean + L z. The ridge starts at 1e-10 and is escalated x10 up to 1e-6.
Tensor sample_full_cov_oracle(const BaLoRALayer& layer, const Tensor& x, double alpha, Rng& rng);

/// W0 + lora_scale W_B W_A.
Tensor merge_weights(const BaLoRALayer& layer);

/// Taped batch forward used in training and batched inference.
///
/// `x` is [B x d]. With `alpha` ([B x 1] or B elements) and `noise` ([B x r]) the
/// result is one reparametrised posterior-predictive draw per row; with either
/// missing it is the deterministic (posterior-mean) forward.
Tensor lora_forward(const BaLoRALayer& layer, const Tensor& x, const Tensor* alpha = nullptr,
                    const Tensor* noise = nullptr);

}  // namespace balora
