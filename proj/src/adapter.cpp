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

#include "balora/adapter.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "balora/errors.hpp"

namespace balora {

namespace {

void check_alpha(double alpha) {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) {
    throw ArgumentError("alpha must be positive and finite, got " + std::to_string(alpha));
  }
}

void check_input(const BaLoRALayer& layer, const Tensor& x) {
  if (x.size() != layer.in_dim()) {
    throw ShapeError("input of extent " + std::to_string(x.size()) + " for a layer with d = " +
                     std::to_string(layer.in_dim()));
  }
}

// y[k] = M[k x n] v[n]
void matvec(std::span<const double> m, std::span<const double> v, std::size_t rows, std::span<double> y) {
  const std::size_t n = v.size();
  for (std::size_t i = 0; i < rows; ++i) {
    double s = 0.0;
    const double* row = m.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) s += row[j] * v[j];
    y[i] = s;
  }
}

// In-place lower Cholesky of a row-major n x n matrix. False on a non-positive pivot.
bool cholesky_lower(std::vector<double>& a, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) {
    double* aj = a.data() + j * n;
    double diag = aj[j];
    for (std::size_t k = 0; k < j; ++k) diag -= aj[k] * aj[k];
    if (!(diag > 0.0)) return false;
    const double ljj = std::sqrt(diag);
    aj[j] = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double* ai = a.data() + i * n;
      double s = ai[j];
      for (std::size_t k = 0; k < j; ++k) s -= ai[k] * aj[k];
      ai[j] = s / ljj;
    }
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) a[i * n + j] = 0.0;
  return true;
}

}  // namespace

Tensor PredictiveGaussian::covariance() const {
  const std::size_t k = reconstruction.rows(), r = reconstruction.cols();
  const auto wb = reconstruction.values();
  const auto d = d_vec.values();
  std::vector<double> sigma(k * k, 0.0);
  for (std::size_t a = 0; a < k; ++a)
    for (std::size_t b = 0; b < k; ++b) {
      double s = 0.0;
      for (std::size_t i = 0; i < r; ++i) s += wb[a * r + i] * d[i] * wb[b * r + i];
      sigma[a * k + b] = s;
    }
  return Tensor::from_values({k, k}, std::move(sigma));
}

Tensor PredictiveGaussian::sample(Rng& rng) const {
  const std::size_t k = reconstruction.rows(), r = reconstruction.cols();
  const auto wb = reconstruction.values();
  const auto d = d_vec.values();
  std::vector<double> latent(r);
  for (std::size_t i = 0; i < r; ++i) latent[i] = std::sqrt(d[i]) * rng.normal();
  std::vector<double> y(mean.values().begin(), mean.values().end());
  for (std::size_t a = 0; a < k; ++a) {
    double s = 0.0;
    for (std::size_t i = 0; i < r; ++i) s += wb[a * r + i] * latent[i];
    y[a] += s;
  }
  return Tensor::from_values({k}, std::move(y));
}

BaLoRALayer init_layer(Rng& rng, Tensor base, std::size_t rank, double init_std, double lora_scale) {
  if (base.rank() != 2) throw ShapeError("init_layer: base weights must be 2-D");
  const std::size_t k = base.rows(), d = base.cols();
  if (rank == 0 || rank > std::min(d, k)) {
    throw ArgumentError("rank " + std::to_string(rank) + " exceeds min(d, k) = " + std::to_string(std::min(d, k)));
  }
  if (!(init_std > 0.0)) throw ArgumentError("init_std must be positive");
  if (!(lora_scale > 0.0)) throw ArgumentError("lora_scale must be positive");
  BaLoRALayer layer;
  layer.base = base.is_leaf() && !base.requires_grad() ? base : base.detach();
  auto wa = randn(rng, {rank, d});
  std::vector<double> v(wa.values().begin(), wa.values().end());
  for (double& x : v) x *= init_std;
  layer.reduction = Tensor::from_values({rank, d}, std::move(v), true);
  layer.reconstruction = Tensor::zeros({k, rank}, true);
  layer.rank = rank;
  layer.lora_scale = lora_scale;
  return layer;
}

BaLoRALayer init_layer(Rng& rng, std::size_t d, std::size_t k, std::size_t rank, double init_std,
                       double lora_scale) {
  if (rank == 0 || rank > std::min(d, k)) {
    throw ArgumentError("rank " + std::to_string(rank) + " exceeds min(d, k) = " + std::to_string(std::min(d, k)));
  }
  auto w0 = randn(rng, {k, d});
  std::vector<double> v(w0.values().begin(), w0.values().end());
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  for (double& x : v) x *= s;
  return init_layer(rng, Tensor::from_values({k, d}, std::move(v)), rank, init_std, lora_scale);
}

Tensor forward_deterministic(const BaLoRALayer& layer, const Tensor& x) {
  check_input(layer, x);
  const std::size_t k = layer.out_dim(), r = layer.rank;
  std::vector<double> y(k), h(r), upd(k);
  matvec(layer.base.values(), x.values(), k, y);
  matvec(layer.reduction.values(), x.values(), r, h);
  matvec(layer.reconstruction.values(), h, k, upd);
  for (std::size_t i = 0; i < k; ++i) y[i] += layer.lora_scale * upd[i];
  return Tensor::from_values({k}, std::move(y));
}

PredictiveGaussian analytic_predictive(const BaLoRALayer& layer, const Tensor& x, double alpha) {
  check_alpha(alpha);
  check_input(layer, x);
  const std::size_t d = layer.in_dim(), r = layer.rank;
  const auto wa = layer.reduction.values();
  const auto xv = x.values();
  std::vector<double> dv(r);
  const double s2 = layer.lora_scale * layer.lora_scale;
  for (std::size_t i = 0; i < r; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double w = wa[i * d + j];
      acc += w * w * xv[j] * xv[j];
    }
    dv[i] = alpha * s2 * acc;
  }
  return PredictiveGaussian{forward_deterministic(layer, x), Tensor::from_values({r}, std::move(dv)),
                            layer.reconstruction};
}

Tensor sample_lowrank(const BaLoRALayer& layer, const Tensor& x, double alpha, Rng& rng) {
  return analytic_predictive(layer, x, alpha).sample(rng);
}

Tensor sample_full_cov_oracle(const BaLoRALayer& layer, const Tensor& x, double alpha, Rng& rng) {
  const std::size_t k = layer.out_dim();
  if (k > kFullCovMaxDim) {
    throw ArgumentError("full-covariance sampler supports k <= " + std::to_string(kFullCovMaxDim) + ", got " +
                        std::to_string(k));
  }
  const auto pred = analytic_predictive(layer, x, alpha);
  const auto sigma = pred.covariance();
  const auto sv = sigma.values();

  // Sigma has rank <= r < k, so it needs a ridge to be factorised. The ridge is
  // relative to the mean diagonal once that exceeds 1.
  double diag_mean = 0.0;
  for (std::size_t i = 0; i < k; ++i) diag_mean += sv[i * k + i];
  diag_mean = std::max(1.0, diag_mean / static_cast<double>(std::max<std::size_t>(k, 1)));

  std::vector<double> l;
  bool ok = false;
  for (double ridge = 1e-10; ridge <= 1e-6 * 1.0001; ridge *= 10.0) {
    l.assign(sv.begin(), sv.end());
    for (std::size_t i = 0; i < k; ++i) l[i * k + i] += ridge * diag_mean;
    if (cholesky_lower(l, k)) {
      ok = true;
      break;
    }
  }
  if (!ok) throw NumericError("full-covariance factorisation failed after ridge escalation to 1e-6");

  std::vector<double> z(k);
  for (double& v : z) v = rng.normal();
  std::vector<double> y(pred.mean.values().begin(), pred.mean.values().end());
  for (std::size_t i = 0; i < k; ++i) {
    double s = 0.0;
    const double* li = l.data() + i * k;
    for (std::size_t j = 0; j <= i; ++j) s += li[j] * z[j];
    y[i] += s;
  }
  return Tensor::from_values({k}, std::move(y));
}

Tensor merge_weights(const BaLoRALayer& layer) {
  const std::size_t k = layer.out_dim(), d = layer.in_dim(), r = layer.rank;
  const auto w0 = layer.base.values();
  const auto wa = layer.reduction.values();
  const auto wb = layer.reconstruction.values();
  std::vector<double> w(w0.begin(), w0.end());
  for (std::size_t a = 0; a < k; ++a)
    for (std::size_t i = 0; i < r; ++i) {
      const double b = layer.lora_scale * wb[a * r + i];
      if (b == 0.0) continue;
      for (std::size_t j = 0; j < d; ++j) w[a * d + j] += b * wa[i * d + j];
    }
  return Tensor::from_values({k, d}, std::move(w));
}

Tensor lora_forward(const BaLoRALayer& layer, const Tensor& x, const Tensor* alpha, const Tensor* noise) {
  if (x.rank() != 2 || x.cols() != layer.in_dim()) {
    throw ShapeError("lora_forward: input " + shape_str(x.shape()) + " for d = " + std::to_string(layer.in_dim()));
  }
  const Tensor base_out = matmul(x, transpose(layer.base));
  Tensor latent = matmul(x, transpose(layer.reduction));
  if (alpha != nullptr && noise != nullptr) {
    if (noise->size() != latent.size()) {
      throw ShapeError("lora_forward: noise " + shape_str(noise->shape()) + " for latent " +
                       shape_str(latent.shape()));
    }
    const Tensor variance = scale_rows(matmul(square(x), transpose(square(layer.reduction))), *alpha);
    latent = latent + sqrt(variance) * noise->reshape(latent.shape());
  }
  return base_out + matmul(latent, transpose(layer.reconstruction)) * layer.lora_scale;
}

}  // namespace balora
