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

#include "balora/oracles.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <numeric>
#include <limits>
#include <stdexcept>

namespace balora::oracle {

Dense to_dense(const Tensor& t) {
  Dense d(t.rows(), t.cols());
  std::copy(t.values().begin(), t.values().end(), d.v.begin());
  return d;
}

Dense naive_matmul(const Dense& a, const Dense& b) {
  if (a.cols != b.rows) throw std::invalid_argument("naive_matmul: shape mismatch");
  Dense c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t j = 0; j < b.cols; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols; ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  }
  return c;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("max_abs_diff: size mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double frobenius(std::span<const double> a) {
  double s = 0.0;
  for (double x : a) s += x * x;
  return std::sqrt(s);
}

std::vector<double> finite_difference(Tensor& param, const std::function<double()>& loss, double h) {
  auto values = param.mutable_values();
  std::vector<double> grad(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + h;
    const double up = loss();
    values[i] = saved - h;
    const double down = loss();
    values[i] = saved;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

GradCheck compare_gradients(std::span<const double> tape, std::span<const double> fd, double rtol,
                            double atol) {
  if (tape.size() != fd.size()) throw std::invalid_argument("compare_gradients: size mismatch");
  GradCheck r;
  r.worst_excess = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < tape.size(); ++i) {
    const double err = std::abs(tape[i] - fd[i]);
    const double excess = err - (atol + rtol * std::abs(fd[i]));
    r.max_abs_err = std::max(r.max_abs_err, err);
    r.worst_excess = std::max(r.worst_excess, excess);
    if (excess > 0.0) r.passed = false;
  }
  if (tape.empty()) r.worst_excess = 0.0;
  return r;
}

namespace {

// 15-point Kronrod nodes/weights with the embedded 7-point Gauss rule.
constexpr std::array<double, 8> kXgk = {0.991455371120812639206854697526329, 0.949107912342758524526189684047851,
                                        0.864864423359769072789712788640926, 0.741531185599394439863864773280788,
                                        0.586087235467691130294144845693013, 0.405845151377397166906606412076961,
                                        0.207784955007898467600689403773245, 0.000000000000000000000000000000000};
constexpr std::array<double, 8> kWgk = {0.022935322010529224963732008058970, 0.063092092629978553290700663189204,
                                        0.104790010322250183839876322541518, 0.140653259715525918745189590510238,
                                        0.169004726639267902826583426598550, 0.190350578064785409913256402421014,
                                        0.204432940075298892414161999234649, 0.209482141084727828012999174891714};
constexpr std::array<double, 4> kWg = {0.129484966168869693270611432679082, 0.279705391489276667901467771423780,
                                       0.381830050505118944950369775488975, 0.417959183673469387755102040816327};

void gk15(const std::function<double(double)>& f, double a, double b, double& result, double& error) {
  const double center = 0.5 * (a + b);
  const double half = 0.5 * (b - a);
  const double fc = f(center);
  double kronrod = fc * kWgk[7];
  double gauss = fc * kWg[3];
  for (int j = 0; j < 7; ++j) {
    const double dx = half * kXgk[j];
    const double f1 = f(center - dx);
    const double f2 = f(center + dx);
    kronrod += kWgk[j] * (f1 + f2);
    if (j % 2 == 1) gauss += kWg[j / 2] * (f1 + f2);
  }
  result = kronrod * half;
  error = std::abs((kronrod - gauss) * half);
}

double adapt(const std::function<double(double)>& f, double a, double b, double abs_tol, double rel_tol,
             int depth) {
  double r, e;
  gk15(f, a, b, r, e);
  if (depth >= 50 || e <= std::max(abs_tol, rel_tol * std::abs(r))) return r;
  const double m = 0.5 * (a + b);
  return adapt(f, a, m, 0.5 * abs_tol, rel_tol, depth + 1) + adapt(f, m, b, 0.5 * abs_tol, rel_tol, depth + 1);
}

}  // namespace

double integrate(const std::function<double(double)>& f, double a, double b, double abs_tol, double rel_tol) {
  return adapt(f, a, b, abs_tol, rel_tol, 0);
}

double kl_quadrature(double alpha, double p, double w) {
  const double sq = std::sqrt(alpha) * std::abs(w);
  const double sp = std::sqrt(p / (1.0 - p)) * std::abs(w);
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  // Substitute x = w + sq * t so the posterior is standard normal in t.
  auto integrand = [&](double t) {
    const double x = w + sq * t;
    const double log_q = -0.5 * t * t - std::log(sq) - half_log_2pi;
    const double log_prior = -0.5 * (x / sp) * (x / sp) - std::log(sp) - half_log_2pi;
    const double density_t = std::exp(-0.5 * t * t) / std::sqrt(2.0 * std::numbers::pi);
    return density_t * (log_q - log_prior);
  };
  // Split at the origin of t so each panel is smooth and well resolved.
  double total = 0.0;
  const double edges[] = {-14.0, -6.0, -2.0, 0.0, 2.0, 6.0, 14.0};
  for (int i = 0; i + 1 < 7; ++i) total += integrate(integrand, edges[i], edges[i + 1], 1e-15, 1e-14);
  return total;
}

double golden_section_log_min(const std::function<double(double)>& f, double lo, double hi, double tol) {
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = std::log(lo), b = std::log(hi);
  double c = b - inv_phi * (b - a);
  double d = a + inv_phi * (b - a);
  double fc = f(std::exp(c)), fd = f(std::exp(d));
  while (b - a > tol) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - inv_phi * (b - a);
      fc = f(std::exp(c));
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + inv_phi * (b - a);
      fd = f(std::exp(d));
    }
  }
  return std::exp(0.5 * (a + b));
}

MomentAccumulator::MomentAccumulator(std::size_t dim) : dim_(dim), mean_(dim, 0.0), m2_(dim * dim, 0.0) {}

void MomentAccumulator::add(std::span<const double> x) {
  if (x.size() != dim_) throw std::invalid_argument("MomentAccumulator: dimension mismatch");
  ++n_;
  std::vector<double> delta(dim_);
  for (std::size_t i = 0; i < dim_; ++i) {
    delta[i] = x[i] - mean_[i];
    mean_[i] += delta[i] / static_cast<double>(n_);
  }
  for (std::size_t i = 0; i < dim_; ++i) {
    const double after = x[i] - mean_[i];
    for (std::size_t j = 0; j < dim_; ++j) m2_[i * dim_ + j] += after * delta[j];
  }
}

std::vector<double> MomentAccumulator::covariance() const {
  std::vector<double> c(m2_);
  for (double& x : c) x /= static_cast<double>(n_);
  // Symmetrise the accumulation roundoff.
  for (std::size_t i = 0; i < dim_; ++i)
    for (std::size_t j = i + 1; j < dim_; ++j) {
      const double s = 0.5 * (c[i * dim_ + j] + c[j * dim_ + i]);
      c[i * dim_ + j] = c[j * dim_ + i] = s;
    }
  return c;
}

double covariance_standard_error(std::span<const double> sigma, std::size_t dim, std::size_t i, std::size_t j,
                                 std::size_t n) {
  const double sii = sigma[i * dim + i], sjj = sigma[j * dim + j], sij = sigma[i * dim + j];
  return std::sqrt((sii * sjj + sij * sij) / static_cast<double>(n));
}

namespace {

double z_score(double diff, double se, double scale) {
  if (se > 1e-300) return std::abs(diff) / se;
  return std::abs(diff) <= 1e-12 * std::max(1.0, scale) ? 0.0 : std::numeric_limits<double>::infinity();
}

void tally(MomentCheck& r, double z, double nsigma) {
  ++r.tests;
  if (z > nsigma) ++r.beyond;
}

}  // namespace

double normal_two_sided_quantile(double prob) {
  if (!(prob > 0.0 && prob < 1.0)) throw std::invalid_argument("normal_two_sided_quantile: prob outside (0, 1)");
  // P(|Z| > z) = erfc(z / sqrt 2) is decreasing in z; bisect.
  double lo = 0.0, hi = 40.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (std::erfc(mid / std::sqrt(2.0)) > prob ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

MomentCheck check_gaussian_moments(const MomentAccumulator& acc, std::span<const double> mean,
                                   std::span<const double> sigma, double nsigma) {
  const std::size_t k = mean.size();
  const std::size_t n = acc.count();
  double scale = 0.0;
  for (std::size_t i = 0; i < k; ++i) scale = std::max(scale, sigma[i * k + i]);
  MomentCheck r;
  const auto cov = acc.covariance();
  for (std::size_t i = 0; i < k; ++i) {
    const double se = std::sqrt(sigma[i * k + i] / static_cast<double>(n));
    const double zm = z_score(acc.mean()[i] - mean[i], se, std::abs(mean[i]) + scale);
    r.max_mean_z = std::max(r.max_mean_z, zm);
    tally(r, zm, nsigma);
    for (std::size_t j = i; j < k; ++j) {
      const double se_c = covariance_standard_error(sigma, k, i, j, n);
      const double zc = z_score(cov[i * k + j] - sigma[i * k + j], se_c, scale);
      r.max_cov_z = std::max(r.max_cov_z, zc);
      tally(r, zc, nsigma);
    }
  }
  r.passed = r.beyond == 0;
  return r;
}

MomentCheck compare_two_samples(const MomentAccumulator& a, const MomentAccumulator& b,
                                std::span<const double> sigma, double nsigma) {
  const std::size_t k = a.mean().size();
  const double na = static_cast<double>(a.count()), nb = static_cast<double>(b.count());
  double scale = 0.0;
  for (std::size_t i = 0; i < k; ++i) scale = std::max(scale, sigma[i * k + i]);
  MomentCheck r;
  const auto ca = a.covariance(), cb = b.covariance();
  for (std::size_t i = 0; i < k; ++i) {
    const double se = std::sqrt(sigma[i * k + i] / na + sigma[i * k + i] / nb);
    const double zm = z_score(a.mean()[i] - b.mean()[i], se, std::abs(a.mean()[i]) + scale);
    r.max_mean_z = std::max(r.max_mean_z, zm);
    tally(r, zm, nsigma);
    for (std::size_t j = i; j < k; ++j) {
      const double v = sigma[i * k + i] * sigma[j * k + j] + sigma[i * k + j] * sigma[i * k + j];
      const double se_c = std::sqrt(v / na + v / nb);
      const double zc = z_score(ca[i * k + j] - cb[i * k + j], se_c, scale);
      r.max_cov_z = std::max(r.max_cov_z, zc);
      tally(r, zc, nsigma);
    }
  }
  r.passed = r.beyond == 0;
  return r;
}

Dense orthonormal_columns(const Dense& a, double tol) {
  double scale = 0.0;
  for (double x : a.v) scale = std::max(scale, std::abs(x));
  std::vector<std::vector<double>> basis;
  for (std::size_t c = 0; c < a.cols; ++c) {
    std::vector<double> v(a.rows);
    for (std::size_t r = 0; r < a.rows; ++r) v[r] = a(r, c);
    const double original = frobenius(v);
    for (int pass = 0; pass < 2; ++pass) {
      for (const auto& q : basis) {
        double dot = 0.0;
        for (std::size_t r = 0; r < a.rows; ++r) dot += q[r] * v[r];
        for (std::size_t r = 0; r < a.rows; ++r) v[r] -= dot * q[r];
      }
    }
    const double norm = frobenius(v);
    if (original == 0.0 || norm <= tol * std::max(original, scale)) continue;
    for (double& x : v) x /= norm;
    basis.push_back(std::move(v));
  }
  Dense q(a.rows, basis.size());
  for (std::size_t c = 0; c < basis.size(); ++c)
    for (std::size_t r = 0; r < a.rows; ++r) q(r, c) = basis[c][r];
  return q;
}

double orthogonal_residual(const Dense& q, std::span<const double> v) {
  std::vector<double> res(v.begin(), v.end());
  for (int pass = 0; pass < 2; ++pass) {
    for (std::size_t c = 0; c < q.cols; ++c) {
      double dot = 0.0;
      for (std::size_t r = 0; r < q.rows; ++r) dot += q(r, c) * res[r];
      for (std::size_t r = 0; r < q.rows; ++r) res[r] -= dot * q(r, c);
    }
  }
  return frobenius(res);
}

std::vector<double> solve(Dense a, std::vector<double> b) {
  const std::size_t n = a.rows;
  if (a.cols != n || b.size() != n) throw std::invalid_argument("solve: shape mismatch");
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t piv = k;
    for (std::size_t i = k + 1; i < n; ++i)
      if (std::abs(a(i, k)) > std::abs(a(piv, k))) piv = i;
    if (a(piv, k) == 0.0) throw std::runtime_error("solve: singular matrix");
    if (piv != k) {
      for (std::size_t j = 0; j < n; ++j) std::swap(a(k, j), a(piv, j));
      std::swap(b[k], b[piv]);
    }
    for (std::size_t i = k + 1; i < n; ++i) {
      const double f = a(i, k) / a(k, k);
      for (std::size_t j = k; j < n; ++j) a(i, j) -= f * a(k, j);
      b[i] -= f * b[k];
    }
  }
  std::vector<double> x(n);
  for (std::size_t ii = n; ii-- > 0;) {
    double s = b[ii];
    for (std::size_t j = ii + 1; j < n; ++j) s -= a(ii, j) * x[j];
    x[ii] = s / a(ii, ii);
  }
  return x;
}

Dense least_squares(const Dense& x, const Dense& y) {
  const std::size_t d = x.cols, k = y.cols;
  Dense gram(d, d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      double s = 0.0;
      for (std::size_t n = 0; n < x.rows; ++n) s += x(n, i) * x(n, j);
      gram(i, j) = s;
    }
  Dense w(k, d);
  for (std::size_t out = 0; out < k; ++out) {
    std::vector<double> rhs(d);
    for (std::size_t i = 0; i < d; ++i) {
      double s = 0.0;
      for (std::size_t n = 0; n < x.rows; ++n) s += x(n, i) * y(n, out);
      rhs[i] = s;
    }
    const auto sol = solve(gram, rhs);
    for (std::size_t i = 0; i < d; ++i) w(out, i) = sol[i];
  }
  return w;
}

double spearman_no_ties(std::span<const double> u, std::span<const double> v) {
  const std::size_t n = u.size();
  auto ranks = [n](std::span<const double> x) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> r(n);
    for (std::size_t i = 0; i < n; ++i) r[idx[i]] = static_cast<double>(i + 1);
    return r;
  };
  const auto ru = ranks(u), rv = ranks(v);
  double d2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) d2 += (ru[i] - rv[i]) * (ru[i] - rv[i]);
  const double nn = static_cast<double>(n);
  return 1.0 - 6.0 * d2 / (nn * (nn * nn - 1.0));
}

}  // namespace balora::oracle
