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

#include "balora/variational.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

#include <json.hpp>

#include "balora/errors.hpp"

namespace balora {

void PriorConfig::validate() const {
  if (!(p > 0.0 && p < 1.0)) throw ConfigError("p", "prior probability must lie strictly inside (0, 1)");
}

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr", "must be positive");
  if (epochs == 0) throw ConfigError("epochs", "must be positive");
  if (batch_size == 0) throw ConfigError("batch_size", "must be positive");
  if (!(kl_weight >= 0.0) || !std::isfinite(kl_weight)) throw ConfigError("kl_weight", "must be non-negative");
  if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0)) {
    throw ConfigError("warmup_fraction", "must lie in [0, 1]");
  }
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) {
    throw ConfigError("weight_decay", "must be non-negative");
  }
  if (!(grad_clip_norm > 0.0)) throw ConfigError("grad_clip_norm", "must be positive");
}

namespace {

void check_p(double p) {
  if (!(p > 0.0 && p < 1.0)) throw ArgumentError("prior probability p must lie strictly inside (0, 1)");
}

double kl_unchecked(double alpha, double p) {
  return 0.5 * ((alpha + 1.0) * (1.0 - p) / p - 1.0 + std::log(p / (1.0 - p)) - std::log(alpha));
}

}  // namespace

double kl_per_entry(double alpha, double p, const AlphaBounds& bounds) {
  check_p(p);
  if (!(alpha >= bounds.min && alpha <= bounds.max)) {
    throw ArgumentError("alpha " + std::to_string(alpha) + " outside [" + std::to_string(bounds.min) + ", " +
                        std::to_string(bounds.max) + "]");
  }
  return kl_unchecked(alpha, p);
}

Tensor kl_per_entry(const Tensor& alpha, double p) {
  check_p(p);
  const double c = (1.0 - p) / p;
  return 0.5 * ((alpha + 1.0) * c - log(alpha) + (std::log(p / (1.0 - p)) - 1.0));
}

double kl_max(double p, const AlphaBounds& bounds) {
  check_p(p);
  if (!(bounds.min > 0.0 && bounds.max > bounds.min)) throw ArgumentError("invalid alpha bounds");
  return std::max(kl_unchecked(bounds.min, p), kl_unchecked(bounds.max, p));
}

double kl_normalized(std::span<const double> alpha_per_layer, double p,
                     std::span<const std::pair<std::size_t, std::size_t>> ranks_dims, const AlphaBounds& bounds) {
  if (alpha_per_layer.empty()) throw ArgumentError("kl_normalized: empty layer list");
  if (ranks_dims.size() != alpha_per_layer.size()) {
    throw ArgumentError("kl_normalized: one (r, d) pair per layer required");
  }
  const double top = kl_max(p, bounds);
  double total = 0.0;
  for (std::size_t l = 0; l < alpha_per_layer.size(); ++l) {
    const auto [r, d] = ranks_dims[l];
    if (r == 0 || d == 0) throw ArgumentError("kl_normalized: layer with zero parameters");
    const double entries = static_cast<double>(r * d);
    // The rd identical entries summed, then averaged over the rd parameters.
    const double layer_kl = entries * kl_per_entry(alpha_per_layer[l], p, bounds) / entries;
    total += layer_kl / top;
  }
  return total / static_cast<double>(alpha_per_layer.size());
}

Tensor kl_normalized(const Tensor& alpha, double p, const AlphaBounds& bounds) {
  if (alpha.size() == 0) throw ArgumentError("kl_normalized: empty layer list");
  return mean(kl_per_entry(alpha, p)) * (1.0 / kl_max(p, bounds));
}

Tensor negative_log_likelihood(const BaLoRANet& net, const Tensor& output, const Dataset& batch) {
  switch (net.likelihood) {
    case Likelihood::categorical:
      if (batch.labels.size() != output.rows()) throw ShapeError("categorical likelihood needs one label per row");
      return softmax_cross_entropy(output, batch.labels);
    case Likelihood::gaussian: {
      if (batch.y.shape() != output.shape()) {
        throw ShapeError("targets " + shape_str(batch.y.shape()) + " vs outputs " + shape_str(output.shape()));
      }
      const Tensor inv_var = exp(net.log_sigma_obs * -2.0);
      const Tensor sq = mean(square(output - batch.y));
      return 0.5 * sq * inv_var + net.log_sigma_obs + 0.5 * std::log(2.0 * std::numbers::pi);
    }
    case Likelihood::l1:
      if (batch.y.shape() != output.shape()) {
        throw ShapeError("targets " + shape_str(batch.y.shape()) + " vs outputs " + shape_str(output.shape()));
      }
      return mean(abs(output - batch.y));
  }
  throw ArgumentError("unknown likelihood");
}

ElboTerms elbo_loss(const BaLoRANet& net, const Dataset& batch, const PriorConfig& prior, double kl_weight,
                    const std::vector<Tensor>& noise) {
  prior.validate();
  if (batch.size() == 0) throw ArgumentError("elbo: empty batch");
  const NetForward fwd = net.forward_with_noise(batch.x, noise);
  const Tensor nll = negative_log_likelihood(net, fwd.output, batch);
  ElboTerms terms;
  terms.nll = nll.item();
  Tensor loss = nll;
  if (fwd.alpha.size() > 0) {
    const Tensor kl = kl_normalized(fwd.alpha, prior.p, net.bounds);
    terms.kl_normalized = kl.item();
    if (kl_weight > 0.0) loss = loss + kl * kl_weight;
    const std::size_t B = fwd.alpha.rows(), L = fwd.alpha.cols();
    terms.alpha_mean.assign(L, 0.0);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t l = 0; l < L; ++l) terms.alpha_mean[l] += fwd.alpha.at(b, l) / static_cast<double>(B);
  }
  if (!std::isfinite(loss.item())) {
    throw NumericError("elbo: non-finite loss (nll " + std::to_string(terms.nll) + ", kl " +
                       std::to_string(terms.kl_normalized) + ")");
  }
  terms.loss = loss;
  return terms;
}

ElboTerms elbo_step(const BaLoRANet& net, const Dataset& batch, const PriorConfig& prior, const TrainConfig& cfg,
                    Rng& rng) {
  return elbo_loss(net, batch, prior, cfg.kl_weight, net.draw_noise(rng, batch.size()));
}

double clip_global_norm(std::vector<std::vector<double>>& grads, double max_norm) {
  if (!(max_norm > 0.0)) throw ArgumentError("clip norm must be positive");
  double sq = 0.0;
  for (const auto& g : grads)
    for (double v : g) sq += v * v;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& g : grads)
      for (double& v : g) v *= s;
  }
  return norm;
}

AdamW::AdamW(std::vector<Tensor> params, const TrainConfig& cfg, std::size_t total_steps)
    : params_(std::move(params)), cfg_(cfg), total_steps_(std::max<std::size_t>(total_steps, 1)) {
  cfg_.validate();
  for (const auto& p : params_) {
    if (!p.requires_grad() || !p.is_leaf()) throw ArgumentError("AdamW: parameters must be trainable leaves");
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
  warmup_steps_ = static_cast<std::size_t>(std::llround(cfg_.warmup_fraction * static_cast<double>(total_steps_)));
  warmup_steps_ = std::min(warmup_steps_, total_steps_);
}

double AdamW::learning_rate(std::size_t step) const {
  if (step < warmup_steps_) {
    return cfg_.lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps_);
  }
  if (step >= total_steps_) return 0.0;
  return cfg_.lr * static_cast<double>(total_steps_ - step) / static_cast<double>(total_steps_ - warmup_steps_);
}

AdamW::StepInfo AdamW::step() {
  std::vector<std::vector<double>> grads;
  grads.reserve(params_.size());
  for (const auto& p : params_) grads.push_back(p.grad_or_zero());
  StepInfo info;
  info.grad_norm = clip_global_norm(grads, cfg_.grad_clip_norm);
  info.applied_norm = std::min(info.grad_norm, cfg_.grad_clip_norm);
  info.lr = learning_rate(t_);
  ++t_;
  const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto theta = params_[i].mutable_values();
    auto& m = m_[i];
    auto& v = v_[i];
    const auto& g = grads[i];
    for (std::size_t j = 0; j < theta.size(); ++j) {
      m[j] = kBeta1 * m[j] + (1.0 - kBeta1) * g[j];
      v[j] = kBeta2 * v[j] + (1.0 - kBeta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      theta[j] -= info.lr * cfg_.weight_decay * theta[j];
      theta[j] -= info.lr * mhat / (std::sqrt(vhat) + kEps);
    }
  }
  return info;
}

namespace {

double frozen_grad_norm(const BaLoRANet& net) {
  double sq = 0.0;
  for (const auto& t : net.frozen_parameters()) {
    if (!t.has_grad()) continue;
    for (double g : t.grad()) sq += g * g;
  }
  return std::sqrt(sq);
}

}  // namespace

TrainResult train(BaLoRANet& net, const Dataset& data, const PriorConfig& prior, const TrainConfig& cfg,
                  std::ostream* metrics) {
  cfg.validate();
  prior.validate();
  const std::size_t n = data.size();
  if (n == 0) throw ArgumentError("train: empty dataset");
  const std::size_t per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total = per_epoch * cfg.epochs;

  auto params = net.trainable_parameters();
  AdamW opt(params, cfg, total);
  const Rng root(cfg.seed);
  const Rng shuffle_root = root.split(1);
  const Rng noise_root = root.split(2);

  TrainResult result;
  std::vector<std::size_t> order(n);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle = shuffle_root.split(epoch);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

    for (std::size_t start = 0; start < n; start += cfg.batch_size, ++step) {
      const std::size_t stop = std::min(n, start + cfg.batch_size);
      const Dataset batch = data.subset(std::span<const std::size_t>(order).subspan(start, stop - start));
      for (auto& p : params) p.clear_grad();
      Rng noise = noise_root.split(step);
      const ElboTerms terms = elbo_step(net, batch, prior, cfg, noise);
      backward(terms.loss);
      const double frozen = frozen_grad_norm(net);
      if (frozen != 0.0) throw TapeError("frozen backbone received gradient (norm " + std::to_string(frozen) + ")");
      const auto info = opt.step();
      const double loss = terms.loss.item();
      result.step_losses.push_back(loss);

      if (metrics != nullptr) {
        nlohmann::json line = {{"step", step},
                               {"epoch", epoch},
                               {"loss", loss},
                               {"nll", terms.nll},
                               {"kl_normalized", terms.kl_normalized},
                               {"kl_weight", cfg.kl_weight},
                               {"lr", info.lr},
                               {"grad_norm", info.grad_norm},
                               {"frozen_grad_norm", frozen}};
        if (!terms.alpha_mean.empty()) {
          const auto [lo, hi] = std::minmax_element(terms.alpha_mean.begin(), terms.alpha_mean.end());
          line["alpha"] = {{"per_layer_mean", terms.alpha_mean},
                           {"min", *lo},
                           {"max", *hi}};
        }
        if (net.likelihood == Likelihood::gaussian) line["sigma_obs"] = net.sigma_obs();
        *metrics << line.dump() << '\n';
      }
    }
  }
  result.steps = step;
  result.final_loss = result.step_losses.empty() ? 0.0 : result.step_losses.back();
  return result;
}

}  // namespace balora
