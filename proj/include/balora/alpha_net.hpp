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
#include <vector>

#include "balora/adapter.hpp"
#include "balora/rng.hpp"
#include "balora/tensor.hpp"

namespace balora {

/// Inference network producing one noise scale per adapted layer:
/// features -> [Linear -> GELU]* -> Linear -> softplus -> clamp to bounds.
class AlphaNet {
 public:
  /// Hidden weights ~ N(0, 1/fan_in); the output layer starts near zero with its bias
  /// set so every alpha initially equals `alpha_init`.
  AlphaNet(std::size_t feature_dim, std::vector<std::size_t> hidden_dims, std::size_t num_layers, Rng& rng,
           double alpha_init = 0.1, AlphaBounds bounds = {});

  /// Network with every weight and bias equal to zero.
  static AlphaNet zeros(std::size_t feature_dim, std::vector<std::size_t> hidden_dims, std::size_t num_layers,
                        AlphaBounds bounds = {});

  /// features [B x feature_dim] -> alpha [B x L].
  Tensor forward(const Tensor& features) const;

  std::size_t feature_dim() const { return feature_dim_; }
  const std::vector<std::size_t>& hidden_dims() const { return hidden_dims_; }
  std::size_t num_layers() const { return num_layers_; }
  const AlphaBounds& bounds() const { return bounds_; }

  /// Weight then bias for each linear map, input to output. Weights are [in x out].
  std::vector<Tensor> parameters() const;
  void set_trainable(bool flag);

 private:
  AlphaNet() = default;
  void allocate();

  std::size_t feature_dim_ = 0;
  std::vector<std::size_t> hidden_dims_;
  std::size_t num_layers_ = 0;
  AlphaBounds bounds_;
  std::vector<Tensor> weights_;
  std::vector<Tensor> biases_;
};

/// Single-input convenience: feat [feature_dim] -> alpha [L]. Throws NumericError on
/// non-finite features.
Tensor alpha_forward(const AlphaNet& net, const Tensor& feat);

}  // namespace balora
