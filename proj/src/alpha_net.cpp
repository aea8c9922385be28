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

#include "balora/alpha_net.hpp"

#include <cmath>
#include <string>

#include "balora/errors.hpp"

namespace balora {

namespace {

double inverse_softplus(double y) { return y > 30.0 ? y : std::log(std::expm1(y)); }

}  // namespace

void AlphaNet::allocate() {
  if (feature_dim_ == 0) throw ArgumentError("AlphaNet: feature_dim must be positive");
  if (num_layers_ == 0) throw ArgumentError("AlphaNet: num_layers must be positive");
  if (!(bounds_.min > 0.0) || !(bounds_.max > bounds_.min)) throw ArgumentError("AlphaNet: invalid alpha bounds");
  std::size_t in = feature_dim_;
  std::vector<std::size_t> outs = hidden_dims_;
  outs.push_back(num_layers_);
  for (std::size_t out : outs) {
    if (out == 0) throw ArgumentError("AlphaNet: hidden widths must be positive");
    weights_.push_back(Tensor::zeros({in, out}, true));
    biases_.push_back(Tensor::zeros({out}, true));
    in = out;
  }
}

AlphaNet::AlphaNet(std::size_t feature_dim, std::vector<std::size_t> hidden_dims, std::size_t num_layers, Rng& rng,
                   double alpha_init, AlphaBounds bounds)
    : feature_dim_(feature_dim), hidden_dims_(std::move(hidden_dims)), num_layers_(num_layers), bounds_(bounds) {
  if (!(alpha_init >= bounds.min && alpha_init <= bounds.max)) {
    throw ArgumentError("AlphaNet: alpha_init outside the alpha bounds");
  }
  allocate();
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    const bool output = l + 1 == weights_.size();
    const double fan_in = static_cast<double>(weights_[l].rows());
    const double stddev = output ? 0.01 / std::sqrt(fan_in) : 1.0 / std::sqrt(fan_in);
    auto w = weights_[l].mutable_values();
    for (double& x : w) x = stddev * rng.normal();
    if (output) {
      auto b = biases_[l].mutable_values();
      for (double& x : b) x = inverse_softplus(alpha_init);
    }
  }
}

AlphaNet AlphaNet::zeros(std::size_t feature_dim, std::vector<std::size_t> hidden_dims, std::size_t num_layers,
                         AlphaBounds bounds) {
  AlphaNet net;
  net.feature_dim_ = feature_dim;
  net.hidden_dims_ = std::move(hidden_dims);
  net.num_layers_ = num_layers;
  net.bounds_ = bounds;
  net.allocate();
  return net;
}

Tensor AlphaNet::forward(const Tensor& features) const {
  if (features.rank() != 2 || features.cols() != feature_dim_) {
    throw ShapeError("AlphaNet: features " + shape_str(features.shape()) + " for feature_dim " +
                     std::to_string(feature_dim_));
  }
  Tensor h = features;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    h = add_row(matmul(h, weights_[l]), biases_[l]);
    if (l + 1 < weights_.size()) h = gelu(h);
  }
  return clamp(softplus(h), bounds_.min, bounds_.max);
}

std::vector<Tensor> AlphaNet::parameters() const {
  std::vector<Tensor> p;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    p.push_back(weights_[l]);
    p.push_back(biases_[l]);
  }
  return p;
}

void AlphaNet::set_trainable(bool flag) {
  for (auto& t : weights_) t.set_requires_grad(flag);
  for (auto& t : biases_) t.set_requires_grad(flag);
}

Tensor alpha_forward(const AlphaNet& net, const Tensor& feat) {
  for (double v : feat.values()) {
    if (!std::isfinite(v)) throw NumericError("alpha_forward: non-finite feature");
  }
  if (feat.size() != net.feature_dim()) throw ShapeError("alpha_forward: feature extent mismatch");
  const auto out = net.forward(feat.reshape({1, feat.size()}));
  return out.reshape({net.num_layers()});
}

}  // namespace balora
