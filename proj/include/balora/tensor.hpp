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
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "balora/rng.hpp"

namespace balora {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct Node;
}

/// Dense row-major float64 array with optional participation in a reverse-mode tape.
///
/// Tensor is a cheap handle: copies share the same storage. Values are immutable once
/// an op has produced them; only leaves may be overwritten (set_values) and only
/// gradients accumulate. Every op checks that its output is finite.
///
/// The tape is dynamic: an op records its parents and a gradient rule whenever grad
/// mode is on and any input requires grad. backward() walks that graph once and
/// releases it.
class Tensor {
 public:
  /// Empty rank-1 tensor of extent 0.
  Tensor();

  static Tensor from_values(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  /// Row-major 2-D literal; `rows.size()` rows of equal length.
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                       bool requires_grad = false);
  static Tensor vector(std::initializer_list<double> values, bool requires_grad = false);
  static Tensor identity(std::size_t n);

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const;
  /// Rows/cols of a 2-D tensor; a rank-1 tensor is treated as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> values() const;
  double operator[](std::size_t i) const { return values()[i]; }
  double at(std::size_t row, std::size_t col) const;
  /// Value of a single-element tensor.
  double item() const;

  bool requires_grad() const;
  bool is_leaf() const;
  bool has_grad() const;
  /// Accumulated gradient; throws TapeError when none has been accumulated.
  std::span<const double> grad() const;
  /// Accumulated gradient, or zeros when none has been accumulated.
  std::vector<double> grad_or_zero() const;
  void zero_grad();
  void clear_grad();

  /// Overwrite a leaf's values in place (same size). Throws TapeError on non-leaves.
  void set_values(std::span<const double> values);
  std::span<double> mutable_values();
  void set_requires_grad(bool flag);

  /// Fresh leaf holding a copy of the values; never requires grad.
  Tensor detach() const;
  /// Same storage order, new extents (taped; gradient passes through).
  Tensor reshape(Shape shape) const;

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  friend struct TensorAccess;
  std::shared_ptr<detail::Node> node_;
};

/// Populate gradients of every requires-grad leaf reachable from `loss` and release
/// the graph. `loss` must be a single-element tensor produced by taped ops.
void backward(const Tensor& loss);

bool grad_enabled();

/// Disables tape recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

enum class ElementwiseOp { add, sub, mul, square, sqrt, softplus, exp, log };

/// Unary ops: square, sqrt, softplus, exp, log.
Tensor elementwise(ElementwiseOp op, const Tensor& a);
/// Binary ops: add, sub, mul. Operands must have equal shapes, or one of them must
/// hold a single element (scalar broadcast).
Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor square(const Tensor& a);
/// Gradient at exactly 0 is taken as 0.
Tensor sqrt(const Tensor& a);
/// log1p(exp(-|z|)) + max(z, 0).
Tensor softplus(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
/// Exact GELU, x * Phi(x).
Tensor gelu(const Tensor& a);
Tensor abs(const Tensor& a);
/// Values outside [lo, hi] are clamped; their gradient is zero.
Tensor clamp(const Tensor& a, double lo, double hi);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator+(const Tensor& a, double s);
Tensor operator+(double s, const Tensor& a);
Tensor operator-(const Tensor& a, double s);
Tensor operator*(const Tensor& a, double s);
Tensor operator*(double s, const Tensor& a);
Tensor operator-(const Tensor& a);

/// [m x n] . [n x p] -> [m x p].
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// m[B x n] + row[n] added to every row.
Tensor add_row(const Tensor& m, const Tensor& row);
/// m[B x n] with row b multiplied by col[b] (col has B elements).
Tensor scale_rows(const Tensor& m, const Tensor& col);
/// Column j of m[B x n] as [B x 1].
Tensor column(const Tensor& m, std::size_t j);
/// Mean softmax cross-entropy of logits[B x C] against integer labels.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

/// Rows of m selected by `rows`; the result is a constant (not taped).
Tensor gather_rows(const Tensor& m, std::span<const std::size_t> rows);

/// I.i.d. standard normal entries drawn from `rng`.
Tensor randn(Rng& rng, Shape shape);

}  // namespace balora
