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

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "balora/errors.hpp"
#include "balora/oracles.hpp"
#include "balora/uncertainty.hpp"

using namespace balora;

namespace {

// One linear layer: W0 = 0, W_A = [3], W_B = [1, 2]^T, fixed alpha. Output law at x = [1]
// is N(W_B W_A x, alpha [[9,18],[18,36]]).
BaLoRANet tiny_net(double alpha) {
  BaLoRANet net;
  net.kind = AdapterKind::balora;
  net.likelihood = Likelihood::gaussian;
  DenseLayer layer{Tensor::zeros({2, 1}), Tensor::zeros({2}), std::nullopt};
  BaLoRALayer a;
  a.base = layer.weight;
  a.reduction = Tensor::matrix({{3.0}}, true);
  a.reconstruction = Tensor::matrix({{1.0}, {2.0}}, true);
  a.rank = 1;
  a.lora_scale = 1.0;
  layer.adapter = a;
  net.layers.push_back(layer);
  net.fixed_alpha = {alpha};
  return net;
}

BaLoRANet small_net(Rng& rng, std::size_t d, std::size_t out, Likelihood lik, double init_std = 0.3) {
  auto net = BaLoRANet::mlp(rng, d, {8, 6}, out, lik);
  AdapterOptions opts;
  opts.rank = 2;
  opts.lora_alpha = 2.0;
  opts.init_std = init_std;
  opts.alpha_hidden = {6};
  opts.alpha_init = 0.3;
  net.attach_adapters(rng, opts);
  for (auto& l : net.layers)
    if (l.adapter) l.adapter->reconstruction.set_values(randn(rng, l.adapter->reconstruction.shape()).values());
  return net;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

TEST_CASE("mc_predict on the tiny layer matches the analytic law") {
  const auto net = tiny_net(1.0);
  const auto x = Tensor::matrix({{1.0}});
  const auto pred = mc_predict(net, x, 100000, 3);
  CHECK(pred.rows == 1);
  CHECK(pred.cols == 2);
  CHECK(pred.var[0] == doctest::Approx(9.0).epsilon(0.05));
  CHECK(pred.var[1] == doctest::Approx(36.0).epsilon(0.05));
  CHECK(std::abs(pred.mean[0] - 3.0) < 3.0 * std::sqrt(9.0 / 1e5));
  CHECK(std::abs(pred.mean[1] - 6.0) < 3.0 * std::sqrt(36.0 / 1e5));
  CHECK_THROWS_AS(mc_predict(net, x, 1, 3), ArgumentError);
}

TEST_CASE("mc_predict: population variance form") {
  // Two draws: variance is half the squared difference over two, not over one.
  const auto net = tiny_net(1.0);
  const auto x = Tensor::matrix({{1.0}});
  const auto pred = mc_predict(net, x, 2, 9);
  Rng root(9);
  std::vector<double> y;
  for (std::uint64_t s = 0; s < 2; ++s) {
    Rng r = root.split(s);
    NoGradGuard g;
    y.push_back(net.forward(x, &r).output[0]);
  }
  const double m = 0.5 * (y[0] + y[1]);
  CHECK(pred.mean[0] == doctest::Approx(m).epsilon(1e-14));
  CHECK(pred.var[0] == doctest::Approx(0.5 * ((y[0] - m) * (y[0] - m) + (y[1] - m) * (y[1] - m))).epsilon(1e-12));
}

TEST_CASE("mc_predict: zero-noise limit, determinism and thread independence") {
  Rng rng(4);
  auto net = small_net(rng, 3, 1, Likelihood::gaussian, 0.02);
  net.alpha_net.reset();
  net.fixed_alpha = {1e-6, 1e-6};
  for (auto& l : net.layers)
    if (l.adapter) {
      std::vector<double> v(l.adapter->reconstruction.size());
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.1 * l.adapter->reconstruction[i];
      l.adapter->reconstruction.set_values(v);
    }
  const auto x = randn(rng, {5, 3});
  const auto pred = mc_predict(net, x, 200, 1);
  NoGradGuard g;
  const auto det = net.forward(x, nullptr).output;
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(pred.var[i] < 1e-8);
    CHECK(std::abs(pred.mean[i] - det[i]) < 1e-4);
  }

  auto noisy = small_net(rng, 3, 2, Likelihood::gaussian);
  const auto a = mc_predict(noisy, x, 100, 11, 1);
  const auto b = mc_predict(noisy, x, 100, 11, 1);
  const auto c = mc_predict(noisy, x, 100, 11, 4);
  CHECK(a.mean == b.mean);
  CHECK(a.var == b.var);
  CHECK(a.mean == c.mean);
  CHECK(a.var == c.var);
  const auto d = mc_predict(noisy, x, 100, 12, 1);
  CHECK(a.mean != d.mean);
}

TEST_CASE("mc variance error shrinks like 1/sqrt(S)") {
  const auto net = tiny_net(1.0);
  const auto x = Tensor::matrix({{1.0}});
  std::vector<double> small, large;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    small.push_back(std::abs(mc_predict(net, x, 10000, 1000 + seed).var[0] - 9.0));
    large.push_back(std::abs(mc_predict(net, x, 40000, 2000 + seed).var[0] - 9.0));
  }
  const double ratio = median(small) / median(large);
  MESSAGE("median |err| at S=1e4 / at S=4e4: " << ratio);
  CHECK(ratio >= 2.0);
}

TEST_CASE("decompose_variance: limits") {
  Rng rng(5);
  auto net = small_net(rng, 3, 1, Likelihood::gaussian, 0.02);
  net.alpha_net.reset();
  net.fixed_alpha = {1e-6, 1e-6};
  net.log_sigma_obs.set_values(std::vector<double>{std::log(0.4)});
  const auto x = randn(rng, {4, 3});
  const auto dec = decompose_variance(net, x, 200, 1, 7);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(dec.epistemic[i] < 1e-8);
    CHECK(dec.aleatoric[i] == doctest::Approx(0.16).epsilon(1e-12));
  }

  auto sharp = small_net(rng, 3, 1, Likelihood::gaussian);
  sharp.log_sigma_obs.set_values(std::vector<double>{-400.0});
  const auto d2 = decompose_variance(sharp, x, 500, 1, 8);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(d2.aleatoric[i] == 0.0);
    CHECK(d2.total_joint[i] == doctest::Approx(d2.epistemic[i]).epsilon(1e-12));
  }

  auto l1 = BaLoRANet::mlp(rng, 3, {4}, 1, Likelihood::l1);
  CHECK_THROWS_AS(decompose_variance(l1, x, 10, 1, 1), ArgumentError);
  CHECK_THROWS_AS(decompose_variance(sharp, x, 1, 1, 1), ArgumentError);
}

TEST_CASE("decompose_variance: epistemic + aleatoric equals the joint total") {
  Rng rng(6);
  for (auto lik : {Likelihood::gaussian, Likelihood::categorical}) {
    auto net = small_net(rng, 3, lik == Likelihood::categorical ? 3 : 1, lik, 0.8);
    net.log_sigma_obs.set_values(std::vector<double>{std::log(0.5)});
    const auto x = randn(rng, {3, 3});
    const auto dec = decompose_variance(net, x, 10000, 1, 21);
    for (std::size_t i = 0; i < dec.epistemic.size(); ++i) {
      const double sum = dec.epistemic[i] + dec.aleatoric[i];
      CHECK(dec.epistemic[i] > 0.0);
      CHECK_MESSAGE(std::abs(sum - dec.total_joint[i]) <= 3.0 * dec.total_joint_se[i],
                    to_string(lik) << " row " << i << " epi+ale " << sum << " joint " << dec.total_joint[i] << " se "
                                   << dec.total_joint_se[i]);
    }
  }
}

TEST_CASE("ece hand cases") {
  const std::vector<double> ones(10, 1.0);
  const std::vector<int> half = {1, 0, 1, 0, 1, 0, 1, 0, 1, 0};
  CHECK(ece_from_confidence(ones, half) == doctest::Approx(0.5).epsilon(1e-15));

  const double conf[] = {0.9, 0.9, 0.6, 0.6};
  const int correct[] = {1, 0, 1, 1};
  CHECK(ece_from_confidence(conf, correct) == doctest::Approx(0.4).epsilon(1e-15));

  // Same case through probability vectors.
  const std::vector<std::vector<double>> probs = {{0.9, 0.1}, {0.9, 0.1}, {0.4, 0.6}, {0.4, 0.6}};
  const std::size_t labels[] = {0, 1, 1, 1};
  CHECK(ece(probs, labels) == doctest::Approx(0.4).epsilon(1e-15));

  // Perfect calibration: in each bin the hit rate equals the confidence.
  std::vector<double> c;
  std::vector<int> ok;
  for (int k = 0; k < 10; ++k) {
    for (int i = 0; i < 10; ++i) {
      c.push_back(0.05 + 0.1 * k);
      ok.push_back(i < k + 1 ? 1 : 0);
    }
  }
  // Confidence 0.05 + 0.1k with k+1 hits in ten: gap 0.05 everywhere.
  CHECK(ece_from_confidence(c, ok) == doctest::Approx(0.05).epsilon(1e-12));
  std::vector<int> exact;
  std::vector<double> ce;
  for (int i = 0; i < 4; ++i) {
    ce.push_back(0.75);
    exact.push_back(i < 3);
  }
  CHECK(ece_from_confidence(ce, exact) == doctest::Approx(0.0).scale(1.0).epsilon(1e-15));

  // Bin edges go up; 1.0 and 0.0 stay inside the range.
  const double edge[] = {1.0 / 15.0 + 1e-12, 0.0, 1.0};
  const int hits[] = {1, 0, 1};
  CHECK_NOTHROW(ece_from_confidence(edge, hits));

  const std::vector<std::vector<double>> bad_sum = {{0.5, 0.6}};
  const std::size_t l0[] = {0};
  CHECK_THROWS_AS(ece(bad_sum, l0), ArgumentError);
  const std::vector<std::vector<double>> good = {{0.5, 0.5}};
  const std::size_t l2[] = {2};
  CHECK_THROWS_AS(ece(good, l2), ArgumentError);
}

TEST_CASE("ece is invariant to sample order") {
  Rng rng(7);
  std::vector<double> conf(200);
  std::vector<int> ok(200);
  for (std::size_t i = 0; i < conf.size(); ++i) {
    conf[i] = rng.uniform();
    ok[i] = rng.uniform() < conf[i];
  }
  const double base = ece_from_confidence(conf, ok);
  for (int t = 0; t < 20; ++t) {
    for (std::size_t i = conf.size(); i > 1; --i) {
      const std::size_t j = rng.below(i);
      std::swap(conf[i - 1], conf[j]);
      std::swap(ok[i - 1], ok[j]);
    }
    CHECK(ece_from_confidence(conf, ok) == doctest::Approx(base).epsilon(1e-12));
  }
}

TEST_CASE("spearman hand cases and errors") {
  const double u[] = {1, 2, 3, 4};
  const double same[] = {1, 2, 3, 4};
  const double neg[] = {-1, -2, -3, -4};
  const double v[] = {1, 3, 2, 4};
  CHECK(spearman(u, same) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(spearman(u, neg) == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(spearman(u, v) == doctest::Approx(0.8).epsilon(1e-15));
  const double flat[] = {2, 2, 2, 2};
  CHECK_THROWS_AS(spearman(u, flat), ArgumentError);
  const double one[] = {1};
  CHECK_THROWS_AS(spearman(one, one), ArgumentError);
  CHECK_THROWS_AS(spearman(u, one), ShapeError);

  // Ties take average ranks: ranks of {1, 2, 2, 3} are {1, 2.5, 2.5, 4}.
  const double tied[] = {1, 2, 2, 3};
  const double r[] = {1, 2.5, 2.5, 4};
  CHECK(spearman(tied, u) == doctest::Approx(spearman(r, u)).epsilon(1e-15));
  CHECK(spearman(tied, u) == doctest::Approx(4.5 / std::sqrt(4.5 * 5.0)).epsilon(1e-14));
}

TEST_CASE("spearman: oracle agreement and monotone invariance") {
  Rng rng(8);
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 3 + rng.below(40);
    std::vector<double> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = rng.normal();
      b[i] = a[i] + rng.normal();
    }
    const double rho = spearman(a, b);
    CHECK(rho == doctest::Approx(oracle::spearman_no_ties(a, b)).epsilon(1e-12));
    CHECK(rho >= -1.0);
    CHECK(rho <= 1.0);
    std::vector<double> ea(n), cb(n);
    for (std::size_t i = 0; i < n; ++i) {
      ea[i] = std::exp(a[i]);
      cb[i] = b[i] * b[i] * b[i];
    }
    CHECK(spearman(ea, b) == doctest::Approx(rho).epsilon(1e-12));
    CHECK(spearman(a, cb) == doctest::Approx(rho).epsilon(1e-12));
    CHECK(spearman(ea, cb) == doctest::Approx(rho).epsilon(1e-12));
  }
}

TEST_CASE("mae") {
  const double p[] = {1.0, 2.0};
  CHECK(mae(p, p) == 0.0);
  const double t[] = {0.0, 3.0};
  CHECK(mae(p, t) == doctest::Approx(1.0));
  const TargetScaling s{2.0899, 1.1295};
  const double z[] = {0.0, 1.0, -2.0};
  const double raw[] = {2.0899, 2.0899 + 1.1295, 2.0899 - 2.259};
  CHECK(mae(z, raw, &s) == doctest::Approx(0.0).scale(1.0).epsilon(1e-12));
  const double off[] = {3.0, 3.0, 3.0};
  const double expected = (std::abs(2.0899 - 3.0) + std::abs(3.2194 - 3.0) + std::abs(-0.1691 - 3.0)) / 3.0;
  CHECK(mae(z, off, &s) == doctest::Approx(expected).epsilon(1e-12));
  CHECK_THROWS_AS(mae(std::span<const double>(), std::span<const double>()), ArgumentError);
  CHECK_THROWS_AS(mae(p, z), ShapeError);
}

TEST_CASE("evaluate: regression report") {
  Rng rng(9);
  auto net = small_net(rng, 3, 1, Likelihood::gaussian);
  net.log_sigma_obs.set_values(std::vector<double>{std::log(0.3)});
  Dataset data{randn(rng, {12, 3}), randn(rng, {12, 1}), {}};
  const TargetScaling scaling{2.0, 0.5};
  const auto report = evaluate(net, data, EvalMode::mc, 50, 3, scaling);
  CHECK(report.per_sample.size() == 12);
  for (const auto& r : report.per_sample) {
    CHECK(std::abs(r.var_total - r.var_epistemic - r.var_aleatoric) <= 1e-9);
    CHECK(r.var_aleatoric == doctest::Approx(0.09 * 0.25).epsilon(1e-12));
    CHECK(r.var_epistemic > 0.0);
  }
  REQUIRE(report.metrics.spearman_var_err.has_value());
  CHECK(*report.metrics.spearman_var_err >= -1.0);
  CHECK(*report.metrics.spearman_var_err <= 1.0);
  CHECK_FALSE(report.metrics.ece.has_value());

  const auto again = evaluate(net, data, EvalMode::mc, 50, 3, scaling);
  CHECK(report.to_json().dump() == again.to_json().dump());

  const auto j = nlohmann::json::parse(report.to_json().dump());
  CHECK(j.at("mode") == "mc");
  CHECK(j.at("mc_steps") == 50);
  CHECK(j.at("per_sample").size() == 12);
  CHECK(j.at("metrics").at("ece").is_null());

  const auto det = evaluate(net, data, EvalMode::deterministic, 0, 3, scaling);
  CHECK(det.mc_steps == 1);
  for (const auto& r : det.per_sample) CHECK(r.var_epistemic == 0.0);
  CHECK_FALSE(det.metrics.spearman_var_err.has_value());
  CHECK_THROWS_AS(evaluate(net, data, EvalMode::mc, 1, 3), ArgumentError);

  const auto path = std::filesystem::temp_directory_path() / "balora_uq.csv";
  report.write_csv(path);
  std::ifstream in(path);
  std::string header, line;
  std::getline(in, header);
  CHECK(header == "id,pred,target,var_total,var_epi,var_ale,sq_error");
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    CHECK(std::count(line.begin(), line.end(), ',') == 6);
    ++rows;
  }
  CHECK(rows == 12);
}

TEST_CASE("evaluate: classification report") {
  Rng rng(10);
  auto net = small_net(rng, 3, 3, Likelihood::categorical, 0.8);
  Dataset data{randn(rng, {20, 3}), Tensor(), {}};
  for (std::size_t i = 0; i < 20; ++i) data.labels.push_back(i % 3);
  const auto report = evaluate(net, data, EvalMode::mc, 40, 5);
  REQUIRE(report.metrics.accuracy.has_value());
  REQUIRE(report.metrics.ece.has_value());
  CHECK(*report.metrics.ece >= 0.0);
  CHECK(*report.metrics.ece <= 1.0);
  for (const auto& r : report.per_sample) {
    double s = 0.0;
    for (double p : r.pred_mean) s += p;
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(std::abs(r.var_total - r.var_epistemic - r.var_aleatoric) <= 1e-9);
    CHECK(r.label.has_value());
  }
  Dataset wrong{data.x, randn(rng, {20, 3}), {}};
  CHECK_THROWS_AS(evaluate(net, wrong, EvalMode::mc, 10, 1), ArgumentError);
}
