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
#include <functional>

#include "balora/errors.hpp"
#include "balora/oracles.hpp"
#include "balora/tensor.hpp"

using namespace balora;

namespace {

Tensor random_leaf(Rng& rng, Shape shape, double scale = 1.0) {
  auto t = randn(rng, std::move(shape));
  std::vector<double> v(t.values().begin(), t.values().end());
  for (double& x : v) x *= scale;
  return Tensor::from_values(t.shape(), std::move(v), true);
}

// Tape gradient of `loss_of` w.r.t. every leaf vs central differences.
void check_gradients(std::vector<Tensor> leaves, const std::function<Tensor()>& loss_of, double rtol = 1e-4,
                     double atol = 1e-7) {
  for (auto& l : leaves) l.clear_grad();
  backward(loss_of());
  for (auto& leaf : leaves) {
    const auto tape = leaf.grad_or_zero();
    const auto fd = oracle::finite_difference(leaf, [&] {
      NoGradGuard guard;
      return loss_of().item();
    });
    const auto r = oracle::compare_gradients(tape, fd, rtol, atol);
    CHECK_MESSAGE(r.passed, "max abs err " << r.max_abs_err);
  }
}

}  // namespace

TEST_CASE("matmul hand cases") {
  const auto id = Tensor::identity(2);
  const auto m = Tensor::matrix({{1, 2}, {3, 4}});
  const auto p = matmul(id, m);
  CHECK(std::vector<double>(p.values().begin(), p.values().end()) == std::vector<double>{1, 2, 3, 4});
  const auto q = matmul(Tensor::matrix({{1, 2}}), Tensor::matrix({{3}, {4}}));
  CHECK(q.shape() == Shape{1, 1});
  CHECK(q.item() == 11.0);
}

TEST_CASE("matmul matches triple-loop oracle") {
  Rng rng(11);
  const auto a = randn(rng, {5, 7});
  const auto b = randn(rng, {7, 3});
  const auto c = matmul(a, b);
  const auto ref = oracle::naive_matmul(oracle::to_dense(a), oracle::to_dense(b));
  CHECK(oracle::max_abs_diff(c.values(), ref.v) < 1e-12);
}

TEST_CASE("matmul associativity against the dense oracle") {
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = 1 + rng.below(6), n = 1 + rng.below(6), p = 1 + rng.below(6), q = 1 + rng.below(6);
    const auto a = randn(rng, {m, n});
    const auto b = randn(rng, {n, p});
    const auto c = randn(rng, {p, q});
    const auto left = matmul(matmul(a, b), c);
    const auto right = matmul(a, matmul(b, c));
    const auto ref = oracle::naive_matmul(oracle::naive_matmul(oracle::to_dense(a), oracle::to_dense(b)),
                                          oracle::to_dense(c));
    const double norm = oracle::frobenius(ref.v);
    std::vector<double> dl(ref.v.size()), dr(ref.v.size());
    for (std::size_t i = 0; i < ref.v.size(); ++i) {
      dl[i] = left[i] - ref.v[i];
      dr[i] = right[i] - ref.v[i];
    }
    CHECK(oracle::frobenius(dl) <= 1e-10 * norm);
    CHECK(oracle::frobenius(dr) <= 1e-10 * norm);
  }
}

TEST_CASE("matmul rejects mismatched inner dimensions") {
  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
  CHECK_THROWS_AS(matmul(Tensor::zeros({3}), Tensor::zeros({3, 1})), ShapeError);
}

TEST_CASE("elementwise hand values") {
  const auto sq = square(Tensor::vector({-2, 3}));
  CHECK(sq[0] == 4.0);
  CHECK(sq[1] == 9.0);
  CHECK(softplus(Tensor::scalar(0.0)).item() == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(softplus(Tensor::scalar(1000.0)).item() == doctest::Approx(1000.0));
  CHECK(softplus(Tensor::scalar(-1000.0)).item() >= 0.0);

  Rng rng(1);
  const auto v = randn(rng, {50});
  const auto back = sqrt(square(v));
  for (std::size_t i = 0; i < v.size(); ++i) CHECK(back[i] == doctest::Approx(std::abs(v[i])).epsilon(1e-15));
}

TEST_CASE("elementwise domain and broadcast errors") {
  CHECK_THROWS_AS(sqrt(Tensor::vector({1.0, -1.0})), NumericError);
  CHECK_THROWS_AS(log(Tensor::vector({-0.5})), NumericError);
  CHECK_THROWS_AS(log(Tensor::vector({0.0})), NumericError);  // -inf is not finite
  CHECK_THROWS_AS(exp(Tensor::vector({1000.0})), NumericError);
  CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), ShapeError);
  CHECK_THROWS_AS(add(Tensor::zeros({2}), Tensor::zeros({3})), ShapeError);
  const auto b = add(Tensor::zeros({2, 3}), Tensor::scalar(1.5));
  CHECK(b.shape() == Shape{2, 3});
  CHECK(b[5] == 1.5);
  const auto c = elementwise(ElementwiseOp::sub, Tensor::scalar(1.0), Tensor::full({3}, 4.0));
  CHECK(c.shape() == Shape{3});
  CHECK(c[2] == -3.0);
  CHECK_THROWS_AS(Tensor::from_values({2}, {1.0, NAN}), NumericError);
}

TEST_CASE("backward hand cases") {
  auto w = Tensor::vector({1, 2}, true);
  backward(sum(square(w)));
  const auto g = w.grad();
  CHECK(g[0] == 4.0 / 2.0);
  CHECK(g[1] == 4.0);

  auto used = Tensor::vector({3}, true);
  auto unused = Tensor::vector({5, 6}, true);
  unused.zero_grad();
  backward(sum(used * used));
  CHECK(unused.grad_or_zero() == std::vector<double>{0.0, 0.0});
  CHECK(unused.grad()[0] == 0.0);
}

TEST_CASE("backward errors") {
  auto w = Tensor::vector({1, 2}, true);
  CHECK_THROWS_AS(backward(square(w)), TapeError);
  const auto loss = sum(square(w));
  backward(loss);
  CHECK_THROWS_AS(backward(loss), TapeError);
  CHECK_THROWS_AS(backward(sum(Tensor::vector({1.0}))), TapeError);
}

TEST_CASE("no-grad guard suppresses recording") {
  auto w = Tensor::vector({1, 2}, true);
  Tensor loss;
  {
    NoGradGuard guard;
    loss = sum(square(w));
  }
  CHECK_FALSE(loss.requires_grad());
  CHECK(grad_enabled());
}

TEST_CASE("sum(matmul) gradients match finite differences") {
  Rng rng(21);
  auto a = random_leaf(rng, {3, 4});
  auto b = random_leaf(rng, {4, 2});
  check_gradients({a, b}, [&] { return sum(matmul(a, b)); }, 1e-5, 1e-9);
}

TEST_CASE("every differentiable op passes finite differences at 20 random points") {
  using Fn = std::function<Tensor(const Tensor&, const Tensor&)>;
  const std::vector<std::pair<const char*, Fn>> ops = {
      {"add", [](const Tensor& a, const Tensor& b) { return sum(square(a + b)); }},
      {"sub", [](const Tensor& a, const Tensor& b) { return sum(square(a - b)); }},
      {"mul", [](const Tensor& a, const Tensor& b) { return sum(a * b * a); }},
      {"scalar-broadcast", [](const Tensor& a, const Tensor& b) { return sum(square(a * mean(b))); }},
      {"square", [](const Tensor& a, const Tensor&) { return sum(square(a)); }},
      {"sqrt", [](const Tensor& a, const Tensor&) { return sum(sqrt(square(a) + 0.5)); }},
      {"softplus", [](const Tensor& a, const Tensor&) { return sum(softplus(a) * a); }},
      {"exp", [](const Tensor& a, const Tensor&) { return sum(exp(a)); }},
      {"log", [](const Tensor& a, const Tensor&) { return sum(log(square(a) + 1.0)); }},
      {"gelu", [](const Tensor& a, const Tensor&) { return sum(gelu(a) * a); }},
      {"abs", [](const Tensor& a, const Tensor&) { return sum(abs(a) * a); }},
      {"clamp", [](const Tensor& a, const Tensor&) { return sum(square(clamp(a, -0.7, 0.9))); }},
      {"matmul", [](const Tensor& a, const Tensor& b) { return sum(square(matmul(a, transpose(b)))); }},
      {"transpose", [](const Tensor& a, const Tensor&) { return sum(square(transpose(a)) * transpose(a)); }},
      {"mean", [](const Tensor& a, const Tensor& b) { return mean(a) * mean(b); }},
      {"add_row", [](const Tensor& a, const Tensor& b) { return sum(square(add_row(a, column(b, 0)))); }},
      {"scale_rows", [](const Tensor& a, const Tensor& b) { return sum(square(scale_rows(a, column(b, 1)))); }},
      {"reshape", [](const Tensor& a, const Tensor&) { return sum(square(a.reshape({a.size()})) * a.reshape({a.size()})); }},
  };
  Rng rng(31);
  for (const auto& [name, fn] : ops) {
    CAPTURE(name);
    for (int point = 0; point < 20; ++point) {
      auto a = random_leaf(rng, {3, 3});
      auto b = random_leaf(rng, {3, 3});
      // Keep clamp and abs away from their kinks.
      auto av = a.mutable_values();
      for (double& x : av) {
        if (std::abs(x) < 0.05) x += 0.1;
        if (std::abs(x - 0.9) < 0.05 || std::abs(x + 0.7) < 0.05) x += 0.1;
      }
      check_gradients({a, b}, [&] { return fn(a, b); }, 1e-4, 1e-7);
    }
  }
}

TEST_CASE("softmax cross-entropy value and gradient") {
  const auto logits = Tensor::matrix({{0.0, 0.0}});
  const std::vector<std::size_t> y = {1};
  CHECK(softmax_cross_entropy(logits, y).item() == doctest::Approx(std::log(2.0)));
  Rng rng(41);
  auto l = random_leaf(rng, {4, 3}, 2.0);
  const std::vector<std::size_t> labels = {0, 2, 1, 2};
  check_gradients({l}, [&] { return softmax_cross_entropy(l, labels); });
  CHECK_THROWS_AS(softmax_cross_entropy(l, std::vector<std::size_t>{0, 1, 3, 0}), ArgumentError);
}

TEST_CASE("gradients accumulate across uses and the graph is released") {
  auto w = Tensor::scalar(3.0, true);
  const auto y = w * w + w;
  backward(y);
  CHECK(w.grad()[0] == doctest::Approx(7.0));
  backward(w * 2.0);
  CHECK(w.grad()[0] == doctest::Approx(9.0));
  // Reusing an interior node of a consumed graph is rejected.
  CHECK_THROWS_AS(backward(y * 2.0), TapeError);
}

TEST_CASE("leaf mutation contract") {
  auto w = Tensor::vector({1, 2}, true);
  auto y = w * 2.0;
  CHECK_THROWS_AS(y.set_values(std::vector<double>{1.0, 2.0}), TapeError);
  w.set_values(std::vector<double>{5.0, 6.0});
  CHECK(w[0] == 5.0);
  CHECK_THROWS_AS(w.set_values(std::vector<double>{1.0}), ShapeError);
  const auto d = w.detach();
  CHECK_FALSE(d.requires_grad());
  CHECK_FALSE(d.same_storage(w));
}

TEST_CASE("gather_rows and column shapes") {
  const auto m = Tensor::matrix({{1, 2}, {3, 4}, {5, 6}});
  const std::vector<std::size_t> idx = {2, 0};
  const auto g = gather_rows(m, idx);
  CHECK(g.shape() == Shape{2, 2});
  CHECK(g.at(0, 1) == 6.0);
  CHECK(g.at(1, 0) == 1.0);
  const auto c = column(m, 1);
  CHECK(c.shape() == Shape{3, 1});
  CHECK(c[2] == 6.0);
  CHECK_THROWS_AS(column(m, 2), ShapeError);
}
