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
#include <optional>
#include <vector>

#include "balora/adapter.hpp"
#include "balora/alpha_net.hpp"
#include "balora/rng.hpp"
#include "balora/tensor.hpp"

namespace balora {

enum class AdapterKind { none, lora, balora };
enum class Likelihood { gaussian, l1, categorical };

const char* to_string(AdapterKind kind);
const char* to_string(Likelihood likelihood);
AdapterKind adapter_kind_from_string(const std::string& s);
Likelihood likelihood_from_string(const std::string& s);

/// One affine map of the stack. When `adapter` is set it shares `weight` as its
/// frozen base.
struct DenseLayer {
  Tensor weight;  ///< [k x d]
  Tensor bias;    ///< [k]
  std::optional<BaLoRALayer> adapter;
};

struct NetForward {
  Tensor output;  ///< [B x out]
  Tensor alpha;   ///< [B x L]; empty when the network has no stochastic adapters
};

struct AdapterOptions {
  AdapterKind kind = AdapterKind::balora;
  std::size_t rank = 4;
  double lora_alpha = 8.0;  ///< lora_scale = lora_alpha / rank
  double init_std = 0.02;
  /// One flag per layer; empty means "every layer but the output head".
  std::vector<bool> placement;
  bool train_head = true;
  std::vector<std::size_t> alpha_hidden = {256, 256};
  double alpha_init = 0.1;
  AlphaBounds bounds;
};

/// MLP (GELU between layers) with optional low-rank adapters on chosen layers, an
/// optional alpha inference network fed with the raw input, and a likelihood head.
class BaLoRANet {
 public:
  std::vector<DenseLayer> layers;
  AdapterKind kind = AdapterKind::none;
  Likelihood likelihood = Likelihood::gaussian;
  std::optional<AlphaNet> alpha_net;
  /// Per-adapted-layer alpha used when there is no inference network.
  std::vector<double> fixed_alpha;
  AlphaBounds bounds;
  /// Log of the homoscedastic observation noise (gaussian likelihood only).
  Tensor log_sigma_obs = Tensor::scalar(0.0);

  /// Fully trainable MLP with widths in -> hidden... -> out.
  static BaLoRANet mlp(Rng& rng, std::size_t in_dim, const std::vector<std::size_t>& hidden, std::size_t out_dim,
                       Likelihood likelihood);

  /// Freezes every base weight, then adds adapters (and, for balora, an AlphaNet).
  void attach_adapters(Rng& rng, const AdapterOptions& options);

  std::size_t in_dim() const { return layers.front().weight.cols(); }
  std::size_t out_dim() const { return layers.back().weight.rows(); }
  std::size_t num_adapted() const;
  bool stochastic() const { return kind == AdapterKind::balora && num_adapted() > 0; }
  /// True when a per-draw conditional variance is defined (gaussian or categorical).
  bool has_conditional_variance() const { return likelihood != Likelihood::l1; }
  double sigma_obs() const;

  /// Per-sample noise scales [B x L] (empty tensor for non-stochastic networks).
  Tensor alphas(const Tensor& x) const;
  /// One standard-normal [B x r_l] tensor per adapted layer.
  std::vector<Tensor> draw_noise(Rng& rng, std::size_t batch) const;
  /// Deterministic forward when `rng` is null or the network is not stochastic.
  NetForward forward(const Tensor& x, Rng* rng) const;
  /// Forward with explicit (frozen) noise; `noise` as returned by draw_noise.
  NetForward forward_with_noise(const Tensor& x, const std::vector<Tensor>& noise) const;

  std::vector<Tensor> trainable_parameters() const;
  std::vector<Tensor> frozen_parameters() const;

  /// Deterministic-mode copy: every adapter folded into its base weight.
  BaLoRANet merged() const;
  /// Deep copy; no storage is shared with the original.
  BaLoRANet clone() const;
};

}  // namespace balora
