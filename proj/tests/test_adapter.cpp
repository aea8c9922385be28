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

#include <doctest.h>

#include <cmath>

#include "balora/adapter.hpp"
#include "balora/errors.hpp"
#include "balora/oracles.hpp"

using namespace balora;

namespace {

// k=2, r=1, d=1, W0=0, W_B=[1,2]^T, W_A=[3]; with x=[1], alpha=1 the law is
// N(mean, [[9,18],[18,36]]).
BaLoRALayer tiny_layer() {
  BaLoRALayer l;
  l.base = Tensor::zeros({2, 1});
  l.reduction = Tensor::matrix({{3.0}}, true);
  l.reconstruction = Tensor::matrix({{1.0}, {2.0}}, true);
  l.rank = 1;
  l.lora_scale = 1.0;
  return l;
}

BaLoRALayer random_layer(Rng& rng, std::size_t d, std::size_t k, std::size_t r, double scale = 1.0) {
  auto layer = init_layer(rng, d, k, r, 0.5, scale);
  layer.reconstruction.set_values(randn(rng, {k, r}).values());
  return layer;
}

}  // namespace

TEST_CASE("init_layer contract") {
  Rng rng(1);
  auto layer = init_layer(rng, 6, 4, 4, 0.1, 2.0);
  CHECK(layer.base.shape() == Shape{4, 6});
  CHECK(layer.reduction.shape() == Shape{4, 6});
  CHECK(layer.reconstruction.shape() == Shape{4, 4});
  CHECK_FALSE(layer.base.requires_grad());
  CHECK(layer.reduction.requires_grad());
  for (double v : layer.reconstruction.values()) CHECK(v == 0.0);

  // Adapter contributes nothing at init.
  for (int t = 0; t < 10; ++t) {
    const auto x = randn(rng, {6});
    const auto y = forward_deterministic(layer, x);
    const auto ref = oracle::naive_matmul(oracle::to_dense(layer.base), oracle::to_dense(x.reshape({6, 1})));
    CHECK(oracle::max_abs_diff(y.values(), ref.v) < 1e-14);
  }

  CHECK_NOTHROW(init_layer(rng, 6, 4, 4, 0.1, 1.0));
  CHECK_THROWS_AS(init_layer(rng, 6, 4, 5, 0.1, 1.0), ArgumentError);
  CHECK_THROWS_AS(init_layer(rng, 6, 4, 2, 0.0, 1.0), ArgumentError);
}

TEST_CASE("init_layer draws W_A with the requested spread") {
  Rng rng(2);
  auto layer = init_layer(rng, 400, 100, 50, 0.3, 1.0);
  double m2 = 0.0;
  for (double v : layer.reduction.values()) m2 += v * v;
  m2 /= static_cast<double>(layer.reduction.size());
  // 20000 draws: sd of the variance estimate ~0.09^2 * sqrt(2/20000) ~ 9e-4.
  CHECK(std::abs(m2 - 0.09) < 0.004);
}

TEST_CASE("forward_deterministic hand cases") {
  BaLoRALayer l;
  l.base = Tensor::zeros({3, 3});
  l.reduction = Tensor::matrix({{1, 0, 0}, {0, 1, 0}}, true);
  l.reconstruction = Tensor::matrix({{1, 0}, {0, 1}, {0, 0}}, true);
  l.rank = 2;
  l.lora_scale = 1.0;
  const auto y = forward_deterministic(l, Tensor::vector({1, 0, 0}));
  CHECK(y[0] == 1.0);
  CHECK(y[1] == 0.0);
  CHECK(y[2] == 0.0);
  const auto z = forward_deterministic(l, Tensor::vector({0, 0, 5}));
  for (double v : z.values()) CHECK(v == 0.0);
  CHECK_THROWS_AS(forward_deterministic(l, Tensor::vector({1, 2})), ShapeError);
}

TEST_CASE("merge_weights equals the deterministic forward") {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t d = 2 + rng.below(7), k = 2 + rng.below(7);
    const std::size_t r = 1 + rng.below(std::min(d, k));
    auto layer = random_layer(rng, d, k, r, 0.5 + rng.uniform());
    const auto merged = merge_weights(layer);
    const auto merged_again = merge_weights(layer);
    CHECK(oracle::max_abs_diff(merged.values(), merged_again.values()) == 0.0);
    for (int t = 0; t < 100; ++t) {
      const auto x = randn(rng, {d});
      const auto y = forward_deterministic(layer, x);
      const auto ref = oracle::naive_matmul(oracle::to_dense(merged), oracle::to_dense(x.reshape({d, 1})));
      const double scale = std::max(1.0, oracle::frobenius(y.values()));
      CHECK(oracle::max_abs_diff(y.values(), ref.v) < 1e-12 * scale);
    }
  }
  Rng rng2(4);
  auto fresh = init_layer(rng2, 5, 3, 2, 0.1, 4.0);
  const auto w = merge_weights(fresh);
  CHECK(oracle::max_abs_diff(w.values(), fresh.base.values()) == 0.0);
}

TEST_CASE("analytic predictive: tiny hand case") {
  const auto layer = tiny_layer();
  const auto pred = analytic_predictive(layer, Tensor::vector({1.0}), 1.0);
  CHECK(pred.d_vec.size() == 1);
  CHECK(pred.d_vec[0] == doctest::Approx(9.0).epsilon(1e-15));
  const auto sigma = pred.covariance();
  CHECK(sigma.at(0, 0) == doctest::Approx(9.0));
  CHECK(sigma.at(0, 1) == doctest::Approx(18.0));
  CHECK(sigma.at(1, 0) == doctest::Approx(18.0));
  CHECK(sigma.at(1, 1) == doctest::Approx(36.0));
  CHECK(pred.mean[0] == doctest::Approx(3.0));
  CHECK(pred.mean[1] == doctest::Approx(6.0));
  CHECK(pred.reconstruction.same_storage(layer.reconstruction));
}

TEST_CASE("analytic predictive: null input, homogeneity, lora_scale, errors") {
  Rng rng(5);
  auto layer = random_layer(rng, 4, 5, 2, 1.0);
  layer.base = Tensor::zeros({5, 4});
  const auto zero = analytic_predictive(layer, Tensor::zeros({4}), 0.7);
  for (double v : zero.mean.values()) CHECK(v == 0.0);
  for (double v : zero.d_vec.values()) CHECK(v == 0.0);

  const auto x = randn(rng, {4});
  std::vector<double> twice(x.values().begin(), x.values().end());
  for (double& v : twice) v *= 2.0;
  const auto p1 = analytic_predictive(layer, x, 0.7);
  const auto p2 = analytic_predictive(layer, Tensor::from_values({4}, twice), 0.7);
  for (std::size_t i = 0; i < 5; ++i) CHECK(p2.mean[i] == doctest::Approx(2.0 * p1.mean[i]));
  for (std::size_t i = 0; i < 2; ++i) CHECK(p2.d_vec[i] == doctest::Approx(4.0 * p1.d_vec[i]));

  auto scaled = layer;
  scaled.lora_scale = 3.0;
  const auto p3 = analytic_predictive(scaled, x, 0.7);
  for (std::size_t i = 0; i < 2; ++i) CHECK(p3.d_vec[i] == doctest::Approx(9.0 * p1.d_vec[i]));

  CHECK_THROWS_AS(analytic_predictive(layer, x, 0.0), ArgumentError);
  CHECK_THROWS_AS(analytic_predictive(layer, x, -1.0), ArgumentError);
  CHECK_THROWS_AS(sample_lowrank(layer, x, 0.0, rng), ArgumentError);
}

TEST_CASE("low-rank sampler matches the tiny-case law (2e5 draws, 3 SE)") {
  const auto layer = tiny_layer();
  const auto x = Tensor::vector({1.0});
  const auto pred = analytic_predictive(layer, x, 1.0);
  Rng rng(6);
  oracle::MomentAccumulator acc(2);
  for (int i = 0; i < 200000; ++i) acc.add(sample_lowrank(layer, x, 1.0, rng).values());
  const std::vector<double> sigma = {9, 18, 18, 36};
  const auto check = oracle::check_gaussian_moments(acc, pred.mean.values(), sigma, 3.0);
  CHECK_MESSAGE(check.passed, "mean z " << check.max_mean_z << " cov z " << check.max_cov_z);
}

TEST_CASE("zero-noise limit reproduces the deterministic forward") {
  Rng rng(7);
  auto layer = random_layer(rng, 5, 4, 3);
  const auto x = randn(rng, {5});
  const auto det = forward_deterministic(layer, x);
  const auto y = sample_lowrank(layer, x, 1e-30, rng);
  CHECK(oracle::max_abs_diff(det.values(), y.values()) < 1e-12);
}

TEST_CASE("full-covariance oracle sampler") {
  const auto layer = tiny_layer();
  const auto x = Tensor::vector({1.0});
  Rng rng(8);
  // Rank-1 covariance: samples lie on the line through the mean along W_B's column.
  const auto basis = oracle::orthonormal_columns(oracle::to_dense(layer.reconstruction));
  const auto pred = analytic_predictive(layer, x, 1.0);
  for (int i = 0; i < 1000; ++i) {
    const auto y = sample_full_cov_oracle(layer, x, 1.0, rng);
    std::vector<double> resid = {y[0] - pred.mean[0], y[1] - pred.mean[1]};
    // Ridge noise has standard deviation sqrt(1e-10 * mean diagonal) ~ 5e-5.
    CHECK(oracle::orthogonal_residual(basis, resid) < 5e-4);
  }

  // Two-sample moments against the low-rank sampler.
  Rng a(9), b(10);
  oracle::MomentAccumulator lowrank(2), dense(2);
  for (int i = 0; i < 200000; ++i) {
    lowrank.add(sample_lowrank(layer, x, 1.0, a).values());
    dense.add(sample_full_cov_oracle(layer, x, 1.0, b).values());
  }
  const std::vector<double> sigma = {9, 18, 18, 36};
  const auto check = oracle::compare_two_samples(lowrank, dense, sigma, 3.0);
  CHECK_MESSAGE(check.passed, "mean z " << check.max_mean_z << " cov z " << check.max_cov_z);

  Rng rng2(11);
  BaLoRALayer big;
  big.base = Tensor::zeros({kFullCovMaxDim + 1, 2});
  big.reduction = Tensor::zeros({1, 2}, true);
  big.reconstruction = Tensor::zeros({kFullCovMaxDim + 1, 1}, true);
  big.rank = 1;
  CHECK_THROWS_AS(sample_full_cov_oracle(big, Tensor::vector({1, 1}), 1.0, rng2), ArgumentError);
}

TEST_CASE("moment matching on random small configurations (1e5 draws, 4 SE)") {
  Rng rng(12);
  constexpr int kDraws = 100000;
  for (int config = 0; config < 8; ++config) {
    const std::size_t d = 1 + rng.below(8), k = 1 + rng.below(8);
    const std::size_t r = 1 + rng.below(std::min(d, k));
    const auto layer = random_layer(rng, d, k, r, 0.5 + rng.uniform());
    const auto x = randn(rng, {d});
    const double alpha = 0.05 + rng.uniform();
    const auto pred = analytic_predictive(layer, x, alpha);
    const auto sigma = pred.covariance();
    Rng stream = rng.split(config);
    oracle::MomentAccumulator acc(k);
    for (int i = 0; i < kDraws; ++i) acc.add(sample_lowrank(layer, x, alpha, stream).values());
    const auto check = oracle::check_gaussian_moments(acc, pred.mean.values(), sigma.values(), 4.0);
    CHECK_MESSAGE(check.passed, "config " << config << " mean z " << check.max_mean_z << " cov z "
                                          << check.max_cov_z);
  }
}

TEST_CASE("subspace confinement and null-space inputs") {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t d = 3 + rng.below(6), k = 3 + rng.below(6);
    const std::size_t r = 1 + rng.below(2);
    const auto layer = random_layer(rng, d, k, r);
    const auto basis = oracle::orthonormal_columns(oracle::to_dense(layer.reconstruction));
    const auto x = randn(rng, {d});
    const auto base = oracle::naive_matmul(oracle::to_dense(layer.base), oracle::to_dense(x.reshape({d, 1})));
    for (int s = 0; s < 50; ++s) {
      const auto y = sample_lowrank(layer, x, 0.8, rng);
      std::vector<double> resid(k);
      for (std::size_t i = 0; i < k; ++i) resid[i] = y[i] - base.v[i];
      CHECK(oracle::orthogonal_residual(basis, resid) < 1e-9 * std::max(1.0, oracle::frobenius(resid)));
    }
  }

  // x supported only on columns where every row of W_A is zero: no uncertainty.
  auto layer = random_layer(rng, 6, 5, 2);
  auto wa = layer.reduction.mutable_values();
  for (std::size_t i = 0; i < 2; ++i) wa[i * 6 + 4] = wa[i * 6 + 5] = 0.0;
  const auto x = Tensor::vector({0, 0, 0, 0, 1.5, -2.0});
  const auto pred = analytic_predictive(layer, x, 3.0);
  for (double v : pred.d_vec.values()) CHECK(v == 0.0);
  const auto det = forward_deterministic(layer, x);
  for (int s = 0; s < 100; ++s) {
    const auto y = sample_lowrank(layer, x, 3.0, rng);
    CHECK(oracle::max_abs_diff(y.values(), det.values()) <= 1e-12);
  }
}

TEST_CASE("taped batch forward agrees with the single-input paths") {
  Rng rng(14);
  const std::size_t d = 5, k = 4, r = 3, batch = 6;
  const auto layer = random_layer(rng, d, k, r, 1.5);
  const auto x = randn(rng, {batch, d});
  const auto det = lora_forward(layer, x);
  for (std::size_t b = 0; b < batch; ++b) {
    std::vector<double> row(x.values().begin() + b * d, x.values().begin() + (b + 1) * d);
    const auto ref = forward_deterministic(layer, Tensor::from_values({d}, row));
    for (std::size_t i = 0; i < k; ++i) CHECK(det.at(b, i) == doctest::Approx(ref[i]).epsilon(1e-13));
  }

  // With explicit noise, row b equals mean_b + W_B (sqrt(d_b) .* eps_b).
  const auto noise = randn(rng, {batch, r});
  const auto alpha = Tensor::from_values({batch, 1}, {0.1, 0.5, 1.0, 2.0, 0.3, 0.9});
  const auto y = lora_forward(layer, x, &alpha, &noise);
  for (std::size_t b = 0; b < batch; ++b) {
    std::vector<double> row(x.values().begin() + b * d, x.values().begin() + (b + 1) * d);
    const auto pred = analytic_predictive(layer, Tensor::from_values({d}, row), alpha[b]);
    for (std::size_t i = 0; i < k; ++i) {
      double expected = pred.mean[i];
      for (std::size_t j = 0; j < r; ++j) {
        expected += layer.reconstruction.at(i, j) * std::sqrt(pred.d_vec[j]) * noise.at(b, j);
      }
      CHECK(y.at(b, i) == doctest::Approx(expected).epsilon(1e-12));
    }
  }
}

TEST_CASE("reparametrised sample gradient w.r.t. W_A and W_B matches finite differences") {
  Rng rng(15);
  auto layer = random_layer(rng, 4, 3, 2);
  const auto x = randn(rng, {5, 4});
  const auto noise = randn(rng, {5, 2});
  const auto alpha = Tensor::full({5, 1}, 0.6);
  auto loss = [&] { return sum(square(lora_forward(layer, x, &alpha, &noise))); };
  layer.reduction.clear_grad();
  layer.reconstruction.clear_grad();
  backward(loss());
  for (Tensor* leaf : {&layer.reduction, &layer.reconstruction}) {
    const auto tape = leaf->grad_or_zero();
    const auto fd = oracle::finite_difference(*leaf, [&] {
      NoGradGuard guard;
      return loss().item();
    });
    const auto check = oracle::compare_gradients(tape, fd, 1e-4, 1e-7);
    CHECK_MESSAGE(check.passed, "max abs err " << check.max_abs_err);
  }
}

TEST_CASE("moment-check bookkeeping and the normal quantile") {
  CHECK(oracle::normal_two_sided_quantile(std::erfc(3.0 / std::sqrt(2.0))) == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(oracle::normal_two_sided_quantile(0.05) == doctest::Approx(1.959963984540054).epsilon(1e-12));
  CHECK_THROWS(oracle::normal_two_sided_quantile(0.0));

  const auto layer = tiny_layer();
  const auto x = Tensor::vector({1.0});
  Rng rng(16);
  oracle::MomentAccumulator acc(2);
  for (int i = 0; i < 1000; ++i) acc.add(sample_lowrank(layer, x, 1.0, rng).values());
  const auto pred = analytic_predictive(layer, x, 1.0);
  const std::vector<double> sigma = {9, 18, 18, 36};
  const auto ok = oracle::check_gaussian_moments(acc, pred.mean.values(), sigma, 1e9);
  CHECK(ok.tests == 5);
  CHECK(ok.beyond == 0);
  const std::vector<double> wrong = {1, 2, 2, 4};
  const auto bad = oracle::check_gaussian_moments(acc, pred.mean.values(), wrong, 3.0);
  CHECK(bad.beyond > 0);
  CHECK_FALSE(bad.passed);
}
