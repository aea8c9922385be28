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

#include "balora/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <sstream>
#include <unordered_set>

#include "balora/errors.hpp"

namespace balora {

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  bool consumed = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads self.grad and accumulates into the parents.
  std::function<void(Node&)> backward_fn;
};

}  // namespace detail

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

struct TensorAccess {
  static const NodePtr& node(const Tensor& t) { return t.node_; }
  static Tensor wrap(NodePtr n) { return Tensor(std::move(n)); }
};

namespace {

thread_local bool g_grad_enabled = true;

const NodePtr& node_of(const Tensor& t) { return TensorAccess::node(t); }

std::vector<double>& grad_of(Node& n) {
  if (n.grad.empty() && !n.value.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

void check_finite(const std::vector<double>& v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite value produced by ") + op);
  }
}

// Builds the output node and, when any input is on the tape, records the rule.
Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                   std::vector<NodePtr> parents, std::function<void(Node&)> rule) {
  check_finite(value, op);
  auto out = std::make_shared<Node>();
  out->shape = std::move(shape);
  out->value = std::move(value);
  out->leaf = true;
  if (g_grad_enabled) {
    const bool any = std::any_of(parents.begin(), parents.end(),
                                 [](const NodePtr& p) { return p->requires_grad; });
    if (any) {
      out->requires_grad = true;
      out->leaf = false;
      out->parents = std::move(parents);
      out->backward_fn = std::move(rule);
    }
  }
  return TensorAccess::wrap(std::move(out));
}

bool is_single(const Node& n) { return n.value.size() == 1; }

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a 2-D tensor, got " + shape_str(t.shape()));
  }
}

double stable_softplus(double z) { return std::log1p(std::exp(-std::abs(z))) + std::max(z, 0.0); }

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }
double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }

template <class Fwd, class Deriv>
Tensor unary(const char* op, const Tensor& a, Fwd fwd, Deriv deriv) {
  const NodePtr& pa = node_of(a);
  std::vector<double> out(pa->value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(pa->value[i]);
  return make_result(op, pa->shape, std::move(out), {pa}, [deriv](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = grad_of(p);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * deriv(p.value[i], self.value[i]);
  });
}

}  // namespace

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor() : node_(std::make_shared<Node>()) { node_->shape = {0}; }

Tensor Tensor::from_values(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_size(shape) != values.size()) {
    throw ShapeError("shape " + shape_str(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  }
  check_finite(values, "construction");
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_size(shape);
  return from_values(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from_values({}, {value}, requires_grad); }

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows, bool requires_grad) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> v;
  v.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("ragged matrix literal");
    v.insert(v.end(), row.begin(), row.end());
  }
  return from_values({r, c}, std::move(v), requires_grad);
}

Tensor Tensor::vector(std::initializer_list<double> values, bool requires_grad) {
  return from_values({values.size()}, std::vector<double>(values), requires_grad);
}

Tensor Tensor::identity(std::size_t n) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  return from_values({n, n}, std::move(v));
}

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::size() const { return node_->value.size(); }

std::size_t Tensor::rows() const {
  if (rank() == 2) return shape()[0];
  if (rank() == 1) return 1;
  throw ShapeError("rows(): tensor of shape " + shape_str(shape()));
}

std::size_t Tensor::cols() const {
  if (rank() == 2) return shape()[1];
  if (rank() == 1) return shape()[0];
  throw ShapeError("cols(): tensor of shape " + shape_str(shape()));
}

std::span<const double> Tensor::values() const { return node_->value; }

double Tensor::at(std::size_t row, std::size_t col) const { return node_->value[row * cols() + col]; }

double Tensor::item() const {
  if (node_->value.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }
bool Tensor::is_leaf() const { return node_->leaf; }
bool Tensor::has_grad() const { return !node_->grad.empty() || node_->value.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw TapeError("tensor has no accumulated gradient");
  return node_->grad;
}

std::vector<double> Tensor::grad_or_zero() const {
  if (node_->grad.empty()) return std::vector<double>(node_->value.size(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }
void Tensor::clear_grad() { node_->grad.clear(); }

void Tensor::set_values(std::span<const double> values) {
  if (!node_->leaf) throw TapeError("set_values on a non-leaf tensor");
  if (values.size() != node_->value.size()) throw ShapeError("set_values: size mismatch");
  std::vector<double> copy(values.begin(), values.end());
  check_finite(copy, "set_values");
  node_->value = std::move(copy);
}

std::span<double> Tensor::mutable_values() {
  if (!node_->leaf) throw TapeError("mutable_values on a non-leaf tensor");
  return node_->value;
}

void Tensor::set_requires_grad(bool flag) {
  if (!node_->leaf) throw TapeError("set_requires_grad on a non-leaf tensor");
  node_->requires_grad = flag;
  if (!flag) node_->grad.clear();
}

Tensor Tensor::detach() const { return from_values(node_->shape, node_->value, false); }

Tensor Tensor::reshape(Shape shape) const {
  if (shape_size(shape) != size()) {
    throw ShapeError("reshape " + shape_str(this->shape()) + " -> " + shape_str(shape));
  }
  return make_result("reshape", std::move(shape), node_->value, {node_}, [](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = grad_of(p);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Tape

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void backward(const Tensor& loss) {
  const NodePtr& root = node_of(loss);
  if (root->value.size() != 1) {
    throw TapeError("backward() needs a scalar loss, got shape " + shape_str(root->shape));
  }
  if (root->consumed) throw TapeError("backward() called twice on the same tape");
  if (!root->requires_grad) throw TapeError("backward() on a loss that is not on the tape");

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (n->consumed) throw TapeError("graph contains a node already consumed by backward()");
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && !p->leaf && visited.insert(p).second) stack.emplace_back(p, 0);
      continue;
    }
    order.push_back(n);
    stack.pop_back();
  }

  if (root->leaf) {
    grad_of(*root)[0] += 1.0;
    return;
  }
  root->grad.assign(1, 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->grad.empty() && n->backward_fn) n->backward_fn(*n);
  }
  for (Node* n : order) {
    n->grad.clear();
    n->grad.shrink_to_fit();
    n->backward_fn = nullptr;
    n->parents.clear();
    n->consumed = true;
  }
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor elementwise(ElementwiseOp op, const Tensor& a) {
  switch (op) {
    case ElementwiseOp::square:
      return unary("square", a, [](double x) { return x * x; },
                   [](double x, double) { return 2.0 * x; });
    case ElementwiseOp::sqrt:
      for (double x : a.values()) {
        if (x < 0.0) throw NumericError("sqrt of a negative value");
      }
      return unary("sqrt", a, [](double x) { return std::sqrt(x); },
                   [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
    case ElementwiseOp::softplus:
      return unary("softplus", a, stable_softplus, [](double x, double) { return sigmoid(x); });
    case ElementwiseOp::exp:
      return unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
    case ElementwiseOp::log:
      for (double x : a.values()) {
        if (x < 0.0) throw NumericError("log of a negative value");
      }
      return unary("log", a, [](double x) { return std::log(x); },
                   [](double x, double) { return 1.0 / x; });
    default:
      throw ArgumentError("elementwise: binary op used with one operand");
  }
}

Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor& b) {
  const NodePtr& pa = node_of(a);
  const NodePtr& pb = node_of(b);
  Shape shape;
  if (pa->shape == pb->shape || is_single(*pb)) {
    shape = pa->shape;
  } else if (is_single(*pa)) {
    shape = pb->shape;
  } else {
    throw ShapeError("elementwise: shapes " + shape_str(pa->shape) + " and " + shape_str(pb->shape) +
                     " are not broadcast-compatible");
  }
  const std::size_t n = shape_size(shape);
  const bool a_bcast = pa->value.size() != n;
  const bool b_bcast = pb->value.size() != n;
  auto av = [&](std::size_t i) { return pa->value[a_bcast ? 0 : i]; };
  auto bv = [&](std::size_t i) { return pb->value[b_bcast ? 0 : i]; };

  std::vector<double> out(n);
  const char* name = "";
  switch (op) {
    case ElementwiseOp::add:
      name = "add";
      for (std::size_t i = 0; i < n; ++i) out[i] = av(i) + bv(i);
      break;
    case ElementwiseOp::sub:
      name = "sub";
      for (std::size_t i = 0; i < n; ++i) out[i] = av(i) - bv(i);
      break;
    case ElementwiseOp::mul:
      name = "mul";
      for (std::size_t i = 0; i < n; ++i) out[i] = av(i) * bv(i);
      break;
    default:
      throw ArgumentError("elementwise: unary op used with two operands");
  }

  return make_result(name, shape, std::move(out), {pa, pb}, [op, a_bcast, b_bcast](Node& self) {
    Node& x = *self.parents[0];
    Node& y = *self.parents[1];
    const std::size_t m = self.grad.size();
    auto xv = [&](std::size_t i) { return x.value[a_bcast ? 0 : i]; };
    auto yv = [&](std::size_t i) { return y.value[b_bcast ? 0 : i]; };
    if (x.requires_grad) {
      auto& g = grad_of(x);
      for (std::size_t i = 0; i < m; ++i) {
        double d = self.grad[i];
        if (op == ElementwiseOp::mul) d *= yv(i);
        g[a_bcast ? 0 : i] += d;
      }
    }
    if (y.requires_grad) {
      auto& g = grad_of(y);
      for (std::size_t i = 0; i < m; ++i) {
        double d = self.grad[i];
        if (op == ElementwiseOp::sub) d = -d;
        if (op == ElementwiseOp::mul) d *= xv(i);
        g[b_bcast ? 0 : i] += d;
      }
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::mul, a, b); }
Tensor square(const Tensor& a) { return elementwise(ElementwiseOp::square, a); }
Tensor sqrt(const Tensor& a) { return elementwise(ElementwiseOp::sqrt, a); }
Tensor softplus(const Tensor& a) { return elementwise(ElementwiseOp::softplus, a); }
Tensor exp(const Tensor& a) { return elementwise(ElementwiseOp::exp, a); }
Tensor log(const Tensor& a) { return elementwise(ElementwiseOp::log, a); }

Tensor gelu(const Tensor& a) {
  return unary("gelu", a, [](double x) { return x * normal_cdf(x); },
               [](double x, double) { return normal_cdf(x) + x * normal_pdf(x); });
}

Tensor abs(const Tensor& a) {
  return unary("abs", a, [](double x) { return std::abs(x); },
               [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (!(lo <= hi)) throw ArgumentError("clamp: lo > hi");
  return unary("clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
               [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
Tensor operator+(const Tensor& a, double s) { return add(a, Tensor::scalar(s)); }
Tensor operator+(double s, const Tensor& a) { return add(Tensor::scalar(s), a); }
Tensor operator-(const Tensor& a, double s) { return sub(a, Tensor::scalar(s)); }
Tensor operator*(const Tensor& a, double s) { return mul(a, Tensor::scalar(s)); }
Tensor operator*(double s, const Tensor& a) { return mul(Tensor::scalar(s), a); }
Tensor operator-(const Tensor& a) { return mul(a, Tensor::scalar(-1.0)); }

// ---------------------------------------------------------------------------
// Linear algebra and reductions

namespace {

// c[m x p] += a[m x n] . b[n x p]
void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t n, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * p;
    const double* ai = a + i * n;
    for (std::size_t k = 0; k < n; ++k) {
      const double aik = ai[k];
      if (aik == 0.0) continue;
      const double* bk = b + k * p;
      for (std::size_t j = 0; j < p; ++j) ci[j] += aik * bk[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.shape()[0], n = a.shape()[1], p = b.shape()[1];
  if (b.shape()[0] != n) {
    throw ShapeError("matmul: inner dimensions of " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " disagree");
  }
  std::vector<double> out(m * p, 0.0);
  gemm_acc(node_of(a)->value.data(), node_of(b)->value.data(), out.data(), m, n, p);
  return make_result("matmul", {m, p}, std::move(out), {node_of(a), node_of(b)}, [m, n, p](Node& self) {
    Node& x = *self.parents[0];
    Node& y = *self.parents[1];
    const double* g = self.grad.data();
    if (x.requires_grad) {
      // dX[i,k] += sum_j G[i,j] Y[k,j]
      auto& gx = grad_of(x);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t k = 0; k < n; ++k) {
          double s = 0.0;
          for (std::size_t j = 0; j < p; ++j) s += g[i * p + j] * y.value[k * p + j];
          gx[i * n + k] += s;
        }
      }
    }
    if (y.requires_grad) {
      // dY[k,j] += sum_i X[i,k] G[i,j]
      auto& gy = grad_of(y);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t k = 0; k < n; ++k) {
          const double xik = x.value[i * n + k];
          for (std::size_t j = 0; j < p; ++j) gy[k * p + j] += xik * g[i * p + j];
        }
      }
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  std::vector<double> out(r * c);
  const auto& v = node_of(a)->value;
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = v[i * c + j];
  return make_result("transpose", {c, r}, std::move(out), {node_of(a)}, [r, c](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = grad_of(p);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.values()) s += x;
  return make_result("sum", {}, {s}, {node_of(a)}, [](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = grad_of(p);
    for (double& x : g) x += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ShapeError("mean of an empty tensor");
  return sum(a) * (1.0 / static_cast<double>(a.size()));
}

Tensor add_row(const Tensor& m, const Tensor& row) {
  require_matrix(m, "add_row");
  const std::size_t r = m.shape()[0], c = m.shape()[1];
  if (row.size() != c) {
    throw ShapeError("add_row: row of " + std::to_string(row.size()) + " for matrix " + shape_str(m.shape()));
  }
  std::vector<double> out(node_of(m)->value);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += row[j];
  return make_result("add_row", m.shape(), std::move(out), {node_of(m), node_of(row)}, [r, c](Node& self) {
    Node& x = *self.parents[0];
    Node& b = *self.parents[1];
    if (x.requires_grad) {
      auto& g = grad_of(x);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (b.requires_grad) {
      auto& g = grad_of(b);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[j] += self.grad[i * c + j];
    }
  });
}

Tensor scale_rows(const Tensor& m, const Tensor& col) {
  require_matrix(m, "scale_rows");
  const std::size_t r = m.shape()[0], c = m.shape()[1];
  if (col.size() != r) {
    throw ShapeError("scale_rows: " + std::to_string(col.size()) + " scales for matrix " + shape_str(m.shape()));
  }
  std::vector<double> out(node_of(m)->value);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] *= col[i];
  return make_result("scale_rows", m.shape(), std::move(out), {node_of(m), node_of(col)}, [r, c](Node& self) {
    Node& x = *self.parents[0];
    Node& s = *self.parents[1];
    if (x.requires_grad) {
      auto& g = grad_of(x);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[i * c + j] * s.value[i];
    }
    if (s.requires_grad) {
      auto& g = grad_of(s);
      for (std::size_t i = 0; i < r; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < c; ++j) acc += self.grad[i * c + j] * x.value[i * c + j];
        g[i] += acc;
      }
    }
  });
}

Tensor column(const Tensor& m, std::size_t j) {
  require_matrix(m, "column");
  const std::size_t r = m.shape()[0], c = m.shape()[1];
  if (j >= c) throw ShapeError("column index out of range");
  std::vector<double> out(r);
  for (std::size_t i = 0; i < r; ++i) out[i] = m.at(i, j);
  return make_result("column", {r, 1}, std::move(out), {node_of(m)}, [r, c, j](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = grad_of(p);
    for (std::size_t i = 0; i < r; ++i) g[i * c + j] += self.grad[i];
  });
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  require_matrix(logits, "softmax_cross_entropy");
  const std::size_t r = logits.shape()[0], c = logits.shape()[1];
  if (labels.size() != r) throw ShapeError("softmax_cross_entropy: label count mismatch");
  if (r == 0) throw ShapeError("softmax_cross_entropy: empty batch");
  std::vector<double> probs(r * c);
  double loss = 0.0;
  for (std::size_t i = 0; i < r; ++i) {
    if (labels[i] >= c) throw ArgumentError("softmax_cross_entropy: label out of range");
    double mx = logits.at(i, 0);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, logits.at(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(logits.at(i, j) - mx);
    const double log_z = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(logits.at(i, j) - log_z);
    loss += log_z - logits.at(i, labels[i]);
  }
  loss /= static_cast<double>(r);
  std::vector<std::size_t> y(labels.begin(), labels.end());
  return make_result("softmax_cross_entropy", {}, {loss}, {node_of(logits)},
                     [probs = std::move(probs), y = std::move(y), r, c](Node& self) {
                       Node& p = *self.parents[0];
                       if (!p.requires_grad) return;
                       auto& g = grad_of(p);
                       const double scale = self.grad[0] / static_cast<double>(r);
                       for (std::size_t i = 0; i < r; ++i) {
                         for (std::size_t j = 0; j < c; ++j) {
                           const double target = (j == y[i]) ? 1.0 : 0.0;
                           g[i * c + j] += scale * (probs[i * c + j] - target);
                         }
                       }
                     });
}

Tensor gather_rows(const Tensor& m, std::span<const std::size_t> rows) {
  require_matrix(m, "gather_rows");
  const std::size_t c = m.shape()[1];
  std::vector<double> out;
  out.reserve(rows.size() * c);
  const auto v = m.values();
  for (auto i : rows) {
    if (i >= m.shape()[0]) throw ShapeError("gather_rows: row index out of range");
    out.insert(out.end(), v.begin() + static_cast<std::ptrdiff_t>(i * c),
               v.begin() + static_cast<std::ptrdiff_t>((i + 1) * c));
  }
  return Tensor::from_values({rows.size(), c}, std::move(out));
}

Tensor randn(Rng& rng, Shape shape) {
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = rng.normal();
  return Tensor::from_values(std::move(shape), std::move(v));
}

}  // namespace balora
