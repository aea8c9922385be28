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

#include "balora/network.hpp"

#include <cmath>
#include <string>

#include "balora/errors.hpp"

namespace balora {

const char* to_string(AdapterKind kind) {
  switch (kind) {
    case AdapterKind::none: return "none";
    case AdapterKind::lora: return "lora";
    case AdapterKind::balora: return "balora";
  }
  return "?";
}

const char* to_string(Likelihood likelihood) {
  switch (likelihood) {
    case Likelihood::gaussian: return "gaussian";
    case Likelihood::l1: return "l1";
    case Likelihood::categorical: return "categorical";
  }
  return "?";
}

AdapterKind adapter_kind_from_string(const std::string& s) {
  if (s == "none") return AdapterKind::none;
  if (s == "lora") return AdapterKind::lora;
  if (s == "balora") return AdapterKind::balora;
  throw ArgumentError("unknown adapter kind '" + s + "'");
}

Likelihood likelihood_from_string(const std::string& s) {
  if (s == "gaussian") return Likelihood::gaussian;
  if (s == "l1") return Likelihood::l1;
  if (s == "categorical") return Likelihood::categorical;
  throw ArgumentError("unknown likelihood '" + s + "'");
}

BaLoRANet BaLoRANet::mlp(Rng& rng, std::size_t in_dim, const std::vector<std::size_t>& hidden, std::size_t out_dim,
                         Likelihood likelihood) {
  BaLoRANet net;
  net.likelihood = likelihood;
  std::vector<std::size_t> widths = {in_dim};
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(out_dim);
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const std::size_t d = widths[l], k = widths[l + 1];
    if (d == 0 || k == 0) throw ArgumentError("mlp: layer widths must be positive");
    auto w = randn(rng, {k, d});
    std::vector<double> v(w.values().begin(), w.values().end());
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    for (double& x : v) x *= s;
    net.layers.push_back({Tensor::from_values({k, d}, std::move(v), true), Tensor::zeros({k}, true), std::nullopt});
  }
  net.log_sigma_obs = Tensor::scalar(0.0, likelihood == Likelihood::gaussian);
  return net;
}

void BaLoRANet::attach_adapters(Rng& rng, const AdapterOptions& options) {
  if (options.kind == AdapterKind::none) throw ArgumentError("attach_adapters: adapter kind 'none'");
  if (num_adapted() > 0) throw ArgumentError("attach_adapters: adapters already attached");
  std::vector<bool> placement = options.placement;
  if (placement.empty()) {
    placement.assign(layers.size(), true);
    placement.back() = false;
  }
  if (placement.size() != layers.size()) throw ArgumentError("attach_adapters: placement mask size mismatch");

  kind = options.kind;
  bounds = options.bounds;
  const double scale = options.lora_alpha / static_cast<double>(options.rank);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    auto& layer = layers[l];
    layer.weight.set_requires_grad(false);
    const bool head = l + 1 == layers.size();
    layer.bias.set_requires_grad(head && !placement[l] && options.train_head);
    if (head && !placement[l] && options.train_head) layer.weight.set_requires_grad(true);
    if (placement[l]) {
      layer.adapter = init_layer(rng, layer.weight, options.rank, options.init_std, scale);
    }
  }
  if (num_adapted() == 0) throw ArgumentError("attach_adapters: placement selects no layer");
  if (kind == AdapterKind::balora) {
    alpha_net.emplace(in_dim(), options.alpha_hidden, num_adapted(), rng, options.alpha_init, options.bounds);
  }
}

std::size_t BaLoRANet::num_adapted() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.adapter.has_value();
  return n;
}

double BaLoRANet::sigma_obs() const { return std::exp(log_sigma_obs.item()); }

Tensor BaLoRANet::alphas(const Tensor& x) const {
  if (!stochastic()) return Tensor();
  if (alpha_net) return alpha_net->forward(x);
  const std::size_t L = num_adapted();
  if (fixed_alpha.size() != L) throw ArgumentError("network has neither an AlphaNet nor per-layer fixed alphas");
  std::vector<double> v(x.rows() * L);
  for (std::size_t b = 0; b < x.rows(); ++b)
    for (std::size_t l = 0; l < L; ++l) {
      if (!(fixed_alpha[l] > 0.0)) throw ArgumentError("fixed alpha must be positive");
      v[b * L + l] = fixed_alpha[l];
    }
  return Tensor::from_values({x.rows(), L}, std::move(v));
}

std::vector<Tensor> BaLoRANet::draw_noise(Rng& rng, std::size_t batch) const {
  std::vector<Tensor> noise;
  for (const auto& l : layers) {
    if (l.adapter) noise.push_back(randn(rng, {batch, l.adapter->rank}));
  }
  return noise;
}

NetForward BaLoRANet::forward(const Tensor& x, Rng* rng) const {
  if (rng != nullptr && stochastic()) return forward_with_noise(x, draw_noise(*rng, x.rows()));
  return forward_with_noise(x, {});
}

NetForward BaLoRANet::forward_with_noise(const Tensor& x, const std::vector<Tensor>& noise) const {
  if (x.rank() != 2 || x.cols() != in_dim()) {
    throw ShapeError("network input " + shape_str(x.shape()) + " for in_dim " + std::to_string(in_dim()));
  }
  const bool sample = stochastic() && !noise.empty();
  if (sample && noise.size() != num_adapted()) throw ShapeError("one noise tensor per adapted layer required");
  NetForward result;
  if (sample) result.alpha = alphas(x);

  Tensor h = x;
  std::size_t adapted = 0;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& layer = layers[l];
    Tensor pre;
    if (layer.adapter) {
      if (sample) {
        const Tensor a = column(result.alpha, adapted);
        pre = lora_forward(*layer.adapter, h, &a, &noise[adapted]);
      } else {
        pre = lora_forward(*layer.adapter, h);
      }
      ++adapted;
    } else {
      pre = matmul(h, transpose(layer.weight));
    }
    pre = add_row(pre, layer.bias);
    h = (l + 1 < layers.size()) ? gelu(pre) : pre;
  }
  result.output = h;
  return result;
}

std::vector<Tensor> BaLoRANet::trainable_parameters() const {
  std::vector<Tensor> p;
  for (const auto& l : layers) {
    if (l.weight.requires_grad()) p.push_back(l.weight);
    if (l.bias.requires_grad()) p.push_back(l.bias);
    if (l.adapter) {
      p.push_back(l.adapter->reduction);
      p.push_back(l.adapter->reconstruction);
    }
  }
  if (alpha_net) {
    for (const auto& t : alpha_net->parameters())
      if (t.requires_grad()) p.push_back(t);
  }
  if (log_sigma_obs.requires_grad()) p.push_back(log_sigma_obs);
  return p;
}

std::vector<Tensor> BaLoRANet::frozen_parameters() const {
  std::vector<Tensor> p;
  for (const auto& l : layers) {
    if (!l.weight.requires_grad()) p.push_back(l.weight);
    if (!l.bias.requires_grad()) p.push_back(l.bias);
  }
  return p;
}

BaLoRANet BaLoRANet::merged() const {
  BaLoRANet out;
  out.kind = AdapterKind::none;
  out.likelihood = likelihood;
  out.bounds = bounds;
  out.log_sigma_obs = log_sigma_obs.detach();
  for (const auto& l : layers) {
    Tensor w = l.adapter ? merge_weights(*l.adapter) : l.weight.detach();
    out.layers.push_back({w, l.bias.detach(), std::nullopt});
  }
  return out;
}

namespace {

Tensor deep(const Tensor& t) {
  auto c = Tensor::from_values(t.shape(), std::vector<double>(t.values().begin(), t.values().end()),
                               t.requires_grad());
  return c;
}

}  // namespace

BaLoRANet BaLoRANet::clone() const {
  BaLoRANet out;
  out.kind = kind;
  out.likelihood = likelihood;
  out.fixed_alpha = fixed_alpha;
  out.bounds = bounds;
  out.log_sigma_obs = deep(log_sigma_obs);
  for (const auto& l : layers) {
    DenseLayer c{deep(l.weight), deep(l.bias), std::nullopt};
    if (l.adapter) {
      BaLoRALayer a = *l.adapter;
      a.base = c.weight;
      a.reduction = deep(l.adapter->reduction);
      a.reconstruction = deep(l.adapter->reconstruction);
      c.adapter = a;
    }
    out.layers.push_back(std::move(c));
  }
  if (alpha_net) {
    AlphaNet copy = AlphaNet::zeros(alpha_net->feature_dim(), alpha_net->hidden_dims(), alpha_net->num_layers(),
                                    alpha_net->bounds());
    const auto src = alpha_net->parameters();
    auto dst = copy.parameters();
    for (std::size_t i = 0; i < src.size(); ++i) {
      dst[i].set_values(src[i].values());
      dst[i].set_requires_grad(src[i].requires_grad());
    }
    out.alpha_net = std::move(copy);
  }
  return out;
}

}  // namespace balora
