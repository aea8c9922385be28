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

// Brute-force reference computations. Nothing here calls into the code paths it is
// used to check: products are triple loops, gradients are finite differences, KL is
// numerical integration of the density ratio, linear solves use partial pivoting.

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "balora/tensor.hpp"

namespace balora::oracle {

/// Row-major dense matrix used by the oracles.
struct Dense {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> v;

  Dense() = default;
  Dense(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), v(r * c, fill) {}
  double& operator()(std::size_t i, std::size_t j) { return v[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return v[i * cols + j]; }
};

Dense to_dense(const Tensor& t);

/// c[i][j] = sum_k a[i][k] b[k][j], accumulated in index order.
Dense naive_matmul(const Dense& a, const Dense& b);

double max_abs_diff(std::span<const double> a, std::span<const double> b);
double frobenius(std::span<const double> a);

/// Central differences of `loss` with respect to every entry of the leaf `param`.
/// The leaf's values are perturbed in place and restored.
std::vector<double> finite_difference(Tensor& param, const std::function<double()>& loss, double h = 1e-5);

struct GradCheck {
  bool passed = true;
  double worst_excess = 0.0;  // max(|g - fd| - (atol + rtol |fd|)), <= 0 when passing
  double max_abs_err = 0.0;
};

GradCheck compare_gradients(std::span<const double> tape, std::span<const double> fd, double rtol,
                            double atol);

/// Adaptive Gauss-Kronrod (7/15) quadrature on [a, b].
double integrate(const std::function<double(double)>& f, double a, double b, double abs_tol = 1e-13,
                 double rel_tol = 1e-13);

/// KL( N(w, alpha w^2) || N(0, p/(1-p) w^2) ) by integrating q log(q/prior) over w.
double kl_quadrature(double alpha, double p, double w);

/// Golden-section minimisation of a unimodal function on [lo, hi] in log-space of x.
double golden_section_log_min(const std::function<double(double)>& f, double lo, double hi, double tol = 1e-12);

/// Sample moments accumulated in a single pass (Welford); covariance uses 1/N.
class MomentAccumulator {
 public:
  explicit MomentAccumulator(std::size_t dim);
  void add(std::span<const double> x);
  std::size_t count() const { return n_; }
  const std::vector<double>& mean() const { return mean_; }
  /// Population covariance (1/N), row-major dim x dim.
  std::vector<double> covariance() const;

 private:
  std::size_t dim_;
  std::size_t n_ = 0;
  std::vector<double> mean_;
  std::vector<double> m2_;
};

/// Standard error of the sample covariance entry (i,j) for a Gaussian with covariance
/// `sigma` from n draws: sqrt((S_ii S_jj + S_ij^2) / n).
double covariance_standard_error(std::span<const double> sigma, std::size_t dim, std::size_t i,
                                 std::size_t j, std::size_t n);

struct MomentCheck {
  double max_mean_z = 0.0;  ///< largest |mean error| / standard error
  double max_cov_z = 0.0;   ///< largest |covariance error| / standard error
  std::size_t tests = 0;    ///< entrywise comparisons made (means plus upper triangle)
  std::size_t beyond = 0;   ///< comparisons outside nsigma
  bool passed = true;
};

/// Entrywise z-scores of the sample mean/covariance in `acc` against a Gaussian with
/// the given mean and covariance. Entries whose standard error is zero must match to
/// 1e-12 relative to the largest variance.
MomentCheck check_gaussian_moments(const MomentAccumulator& acc, std::span<const double> mean,
                                   std::span<const double> sigma, double nsigma);

/// Two-sample comparison of `a` and `b`, both drawn from a law with covariance
/// `sigma`; standard errors of the difference add in quadrature.
MomentCheck compare_two_samples(const MomentAccumulator& a, const MomentAccumulator& b,
                                std::span<const double> sigma, double nsigma);

/// Two-sided standard-normal threshold z with P(|Z| > z) = prob.
double normal_two_sided_quantile(double prob);

/// Orthonormal basis of the column space of `a` (modified Gram-Schmidt with one
/// re-orthogonalisation pass; columns with relative norm below `tol` are dropped).
Dense orthonormal_columns(const Dense& a, double tol = 1e-12);

/// Norm of the component of `v` orthogonal to the columns of orthonormal `q`.
double orthogonal_residual(const Dense& q, std::span<const double> v);

/// Solves a x = b with Gaussian elimination and partial pivoting.
std::vector<double> solve(Dense a, std::vector<double> b);

/// Ordinary least squares: argmin_W ||X W^T - Y||_F^2 via normal equations, W is
/// [Y.cols x X.cols].
Dense least_squares(const Dense& x, const Dense& y);

/// 1 - 6 sum d^2 / (n (n^2 - 1)); valid only without ties.
double spearman_no_ties(std::span<const double> u, std::span<const double> v);

}  // namespace balora::oracle
