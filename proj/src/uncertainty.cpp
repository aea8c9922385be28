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

#include "balora/uncertainty.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "balora/errors.hpp"
#include "balora/parallel.hpp"

namespace balora {

namespace {

constexpr std::size_t kBlock = 16;

struct Welford {
  std::size_t n = 0;
  std::vector<double> mean;
  std::vector<double> m2;

  explicit Welford(std::size_t dim = 0) : mean(dim, 0.0), m2(dim, 0.0) {}

  void add(std::span<const double> x) {
    ++n;
    const double inv = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < mean.size(); ++i) {
      const double d = x[i] - mean[i];
      mean[i] += d * inv;
      m2[i] += d * (x[i] - mean[i]);
    }
  }

  void merge(const Welford& o) {
    if (o.n == 0) return;
    if (n == 0) {
      *this = o;
      return;
    }
    const double na = static_cast<double>(n), nb = static_cast<double>(o.n), nt = na + nb;
    for (std::size_t i = 0; i < mean.size(); ++i) {
      const double d = o.mean[i] - mean[i];
      mean[i] += d * nb / nt;
      m2[i] += o.m2[i] + d * d * na * nb / nt;
    }
    n += o.n;
  }

  std::vector<double> variance() const {
    std::vector<double> v(m2.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = n == 0 ? 0.0 : m2[i] / static_cast<double>(n);
    return v;
  }
};

void softmax_rows(std::vector<double>& v, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = v.data() + r * cols;
    const double top = *std::max_element(row, row + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += (row[c] = std::exp(row[c] - top));
    for (std::size_t c = 0; c < cols; ++c) row[c] /= z;
  }
}

/// One stochastic pass: raw outputs or class probabilities, row-major.
std::vector<double> draw_outputs(const BaLoRANet& net, const Tensor& x, Rng rng) {
  NoGradGuard guard;
  const Tensor out = net.forward(x, &rng).output;
  std::vector<double> v(out.values().begin(), out.values().end());
  if (net.likelihood == Likelihood::categorical) softmax_rows(v, out.rows(), out.cols());
  return v;
}

std::size_t argmax(const double* row, std::size_t n) {
  return static_cast<std::size_t>(std::max_element(row, row + n) - row);
}

}  // namespace

std::vector<double> predictive_draw(const BaLoRANet& net, const Tensor& x, std::uint64_t seed, std::size_t s) {
  if (x.rank() != 2) throw ShapeError("predictive_draw: expected a [B x d] batch");
  return draw_outputs(net, x, Rng(seed).split(s));
}

McPrediction mc_predict(const BaLoRANet& net, const Tensor& x, std::size_t samples, std::uint64_t seed,
                        std::size_t workers) {
  if (samples < 2) throw ArgumentError("mc_predict: need at least 2 samples");
  if (x.rank() != 2) throw ShapeError("mc_predict: expected a [B x d] batch");
  const std::size_t rows = x.rows(), cols = net.out_dim();
  const Rng root(seed);
  const std::size_t blocks = (samples + kBlock - 1) / kBlock;
  std::vector<Welford> parts(blocks, Welford(rows * cols));
  parallel_for(blocks, [&](std::size_t b) {
    for (std::size_t s = b * kBlock; s < std::min(samples, (b + 1) * kBlock); ++s) {
      parts[b].add(draw_outputs(net, x, root.split(s)));
    }
  }, workers == 0 ? worker_count() : workers);
  Welford total(rows * cols);
  for (const auto& p : parts) total.merge(p);
  return {rows, cols, samples, total.mean, total.variance()};
}

VarianceDecomposition decompose_variance(const BaLoRANet& net, const Tensor& x, std::size_t s_outer,
                                         std::size_t s_inner, std::uint64_t seed, std::size_t workers) {
  if (!net.has_conditional_variance()) {
    throw ArgumentError("decompose_variance: the network has no conditional-variance head");
  }
  if (s_outer < 2 || s_inner < 1) throw ArgumentError("decompose_variance: need s_outer >= 2 and s_inner >= 1");
  const bool categorical = net.likelihood == Likelihood::categorical;
  const std::size_t rows = x.rows(), classes = net.out_dim();
  const std::size_t cols = categorical ? 1 : classes;
  const std::size_t dim = rows * cols;
  const double sigma = categorical ? 0.0 : net.sigma_obs();

  struct Block {
    Welford outer, aleatoric, joint;
    std::vector<double> p3, p4;  // raw third/fourth power sums of the joint draws
  };
  const Rng root(seed);
  const std::size_t blocks = (s_outer + kBlock - 1) / kBlock;
  std::vector<Block> parts(blocks, Block{Welford(dim), Welford(dim), Welford(dim), std::vector<double>(dim, 0.0),
                                         std::vector<double>(dim, 0.0)});
  parallel_for(blocks, [&](std::size_t b) {
    auto& blk = parts[b];
    std::vector<double> cond_mean(dim), cond_var(dim), z(dim);
    for (std::size_t s = b * kBlock; s < std::min(s_outer, (b + 1) * kBlock); ++s) {
      const Rng draw = root.split(s);
      const auto out = draw_outputs(net, x, draw.split(0));
      std::vector<std::size_t> winner(rows);
      for (std::size_t i = 0; i < dim; ++i) {
        if (categorical) {
          winner[i] = argmax(out.data() + i * classes, classes);
          const double p = out[i * classes + winner[i]];
          cond_mean[i] = p;
          cond_var[i] = p * (1.0 - p);
        } else {
          cond_mean[i] = out[i];
          cond_var[i] = sigma * sigma;
        }
      }
      blk.outer.add(cond_mean);
      blk.aleatoric.add(cond_var);
      Rng inner = draw.split(1);
      for (std::size_t t = 0; t < s_inner; ++t) {
        for (std::size_t i = 0; i < dim; ++i) {
          if (categorical) {
            const double u = inner.uniform();
            double acc = 0.0;
            std::size_t label = classes - 1;
            for (std::size_t c = 0; c < classes; ++c) {
              acc += out[i * classes + c];
              if (u < acc) {
                label = c;
                break;
              }
            }
            z[i] = label == winner[i] ? 1.0 : 0.0;
          } else {
            z[i] = cond_mean[i] + sigma * inner.normal();
          }
          blk.p3[i] += z[i] * z[i] * z[i];
          blk.p4[i] += z[i] * z[i] * z[i] * z[i];
        }
        blk.joint.add(z);
      }
    }
  }, workers == 0 ? worker_count() : workers);

  Welford outer(dim), aleatoric(dim), joint(dim);
  std::vector<double> p3(dim, 0.0), p4(dim, 0.0);
  for (const auto& blk : parts) {
    outer.merge(blk.outer);
    aleatoric.merge(blk.aleatoric);
    joint.merge(blk.joint);
    for (std::size_t i = 0; i < dim; ++i) {
      p3[i] += blk.p3[i];
      p4[i] += blk.p4[i];
    }
  }
  VarianceDecomposition out;
  out.rows = rows;
  out.cols = cols;
  out.mean = outer.mean;
  out.epistemic = outer.variance();
  out.aleatoric = aleatoric.mean;
  out.total_joint = joint.variance();
  out.total_joint_se.resize(dim);
  const double n = static_cast<double>(joint.n);
  for (std::size_t i = 0; i < dim; ++i) {
    const double mu = joint.mean[i];
    const double e2 = out.total_joint[i] + mu * mu;
    const double e3 = p3[i] / n, e4 = p4[i] / n;
    const double m4 = e4 - 4.0 * mu * e3 + 6.0 * mu * mu * e2 - 3.0 * mu * mu * mu * mu;
    const double v = out.total_joint[i];
    out.total_joint_se[i] = std::sqrt(std::max(0.0, m4 - v * v) / n);
  }
  return out;
}

double ece_from_confidence(std::span<const double> confidence, std::span<const int> correct, std::size_t bins) {
  if (confidence.size() != correct.size()) throw ShapeError("ece: confidence/correctness length mismatch");
  if (confidence.empty()) throw ArgumentError("ece: empty input");
  if (bins == 0) throw ArgumentError("ece: need at least one bin");
  std::vector<double> conf_sum(bins, 0.0), acc_sum(bins, 0.0);
  std::vector<std::size_t> count(bins, 0);
  for (std::size_t i = 0; i < confidence.size(); ++i) {
    const double c = confidence[i];
    if (!(c >= 0.0 && c <= 1.0)) throw ArgumentError("ece: confidence outside [0, 1]");
    const auto m = std::min(bins - 1, static_cast<std::size_t>(std::floor(c * static_cast<double>(bins))));
    conf_sum[m] += c;
    acc_sum[m] += correct[i] != 0 ? 1.0 : 0.0;
    ++count[m];
  }
  double total = 0.0;
  const double n = static_cast<double>(confidence.size());
  for (std::size_t m = 0; m < bins; ++m) {
    if (count[m] == 0) continue;
    const double k = static_cast<double>(count[m]);
    total += (k / n) * std::abs(acc_sum[m] / k - conf_sum[m] / k);
  }
  return total;
}

double ece(std::span<const std::vector<double>> probs, std::span<const std::size_t> labels, std::size_t bins) {
  if (probs.size() != labels.size()) throw ShapeError("ece: probability/label count mismatch");
  std::vector<double> conf(probs.size());
  std::vector<int> correct(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const auto& p = probs[i];
    if (p.empty()) throw ShapeError("ece: empty probability vector");
    const double s = std::accumulate(p.begin(), p.end(), 0.0);
    if (std::abs(s - 1.0) > 1e-6) throw ArgumentError("ece: probabilities do not sum to 1");
    if (labels[i] >= p.size()) throw ArgumentError("ece: label out of range");
    const std::size_t top = argmax(p.data(), p.size());
    conf[i] = p[top];
    correct[i] = top == labels[i];
  }
  return ece_from_confidence(conf, correct, bins);
}

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> rank(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = r;
    i = j + 1;
  }
  return rank;
}

}  // namespace

double spearman(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw ShapeError("spearman: length mismatch");
  if (u.size() < 2) throw ArgumentError("spearman: need at least two points");
  for (std::size_t i = 0; i < u.size(); ++i)
    if (!std::isfinite(u[i]) || !std::isfinite(v[i])) throw NumericError("spearman: non-finite input");
  const auto ru = average_ranks(u), rv = average_ranks(v);
  const double n = static_cast<double>(u.size());
  const double mu = std::accumulate(ru.begin(), ru.end(), 0.0) / n;
  const double mv = std::accumulate(rv.begin(), rv.end(), 0.0) / n;
  double suv = 0.0, suu = 0.0, svv = 0.0;
  for (std::size_t i = 0; i < ru.size(); ++i) {
    suv += (ru[i] - mu) * (rv[i] - mv);
    suu += (ru[i] - mu) * (ru[i] - mu);
    svv += (rv[i] - mv) * (rv[i] - mv);
  }
  if (suu == 0.0 || svv == 0.0) throw ArgumentError("spearman: undefined for constant input");
  return std::clamp(suv / std::sqrt(suu * svv), -1.0, 1.0);
}

double mae(std::span<const double> preds, std::span<const double> targets, const TargetScaling* scaling) {
  if (preds.size() != targets.size()) throw ShapeError("mae: length mismatch");
  if (preds.empty()) throw ArgumentError("mae: empty input");
  double total = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const double p = scaling != nullptr ? scaling->denormalize(preds[i]) : preds[i];
    total += std::abs(p - targets[i]);
  }
  return total / static_cast<double>(preds.size());
}

const char* to_string(EvalMode mode) { return mode == EvalMode::mc ? "mc" : "deterministic"; }

EvalMode eval_mode_from_string(const std::string& s) {
  if (s == "mc") return EvalMode::mc;
  if (s == "deterministic") return EvalMode::deterministic;
  throw ArgumentError("unknown eval mode '" + s + "'");
}

namespace {

void check_merge(const BaLoRANet& net, const BaLoRANet& merged, const Tensor& x) {
  NoGradGuard guard;
  const auto a = net.forward(x, nullptr).output;
  const auto b = merged.forward(x, nullptr).output;
  double scale = 1.0, worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    scale = std::max(scale, std::abs(a[i]));
    worst = std::max(worst, std::abs(a[i] - b[i]));
  }
  if (worst > 1e-12 * scale) {
    std::ostringstream msg;
    msg << "merged network disagrees with the adapter forward by " << worst;
    throw VerificationError(msg.str());
  }
}

}  // namespace

UQReport evaluate(const BaLoRANet& net, const Dataset& data, EvalMode mode, std::size_t mc_steps, std::uint64_t seed,
                  const TargetScaling& scaling) {
  const std::size_t n = data.size();
  if (n == 0) throw ArgumentError("evaluate: empty dataset");
  if (mode == EvalMode::mc && mc_steps < 2) throw ArgumentError("evaluate: mc mode needs mc_steps >= 2");
  const bool categorical = net.likelihood == Likelihood::categorical;
  if (categorical != data.classification()) throw ArgumentError("evaluate: dataset does not match the network head");
  const std::size_t cols = net.out_dim();

  UQReport report;
  report.mode = mode;
  report.mc_steps = mode == EvalMode::mc ? mc_steps : 1;
  report.classification = categorical;

  // Per output entry: predictive mean, variance over weight draws, and (classification)
  // the per-draw winning-class statistics.
  std::vector<double> mean(n * cols), epi(n, 0.0), ale(n, 0.0);
  if (mode == EvalMode::deterministic) {
    const BaLoRANet merged = net.merged();
    check_merge(net, merged, data.x);
    mean = draw_outputs(merged, data.x, Rng(seed));
    for (std::size_t i = 0; i < n; ++i) {
      if (categorical) {
        const double p = *std::max_element(mean.begin() + i * cols, mean.begin() + (i + 1) * cols);
        ale[i] = p * (1.0 - p);
      } else if (net.likelihood == Likelihood::gaussian) {
        ale[i] = static_cast<double>(cols) * net.sigma_obs() * net.sigma_obs();
      }
    }
  } else if (categorical) {
    const auto pred = mc_predict(net, data.x, mc_steps, seed);
    mean = pred.mean;
    const auto dec = decompose_variance(net, data.x, mc_steps, 1, seed);
    epi = dec.epistemic;
    ale = dec.aleatoric;
  } else {
    const auto pred = mc_predict(net, data.x, mc_steps, seed);
    mean = pred.mean;
    const double obs = net.likelihood == Likelihood::gaussian ? net.sigma_obs() * net.sigma_obs() : 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < cols; ++c) epi[i] += pred.var[i * cols + c];
      ale[i] = static_cast<double>(cols) * obs;
    }
  }

  const double var_scale = categorical ? 1.0 : scaling.stddev * scaling.stddev;
  std::vector<double> errors(n), totals(n), flat_pred, flat_target;
  std::vector<std::vector<double>> probs;
  std::size_t correct = 0;
  double abs_err = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    SampleRecord rec;
    rec.id = i;
    rec.pred_mean.assign(mean.begin() + i * cols, mean.begin() + (i + 1) * cols);
    rec.var_epistemic = epi[i] * var_scale;
    rec.var_aleatoric = ale[i] * var_scale;
    rec.var_total = rec.var_epistemic + rec.var_aleatoric;
    if (categorical) {
      const std::size_t label = data.labels[i];
      if (label >= cols) throw ArgumentError("evaluate: label out of range");
      rec.label = label;
      const double miss = 1.0 - rec.pred_mean[label];
      rec.error = miss * miss;
      abs_err += miss;
      correct += argmax(rec.pred_mean.data(), cols) == label;
      probs.push_back(rec.pred_mean);
    } else {
      for (std::size_t c = 0; c < cols; ++c) {
        rec.pred_mean[c] = scaling.denormalize(rec.pred_mean[c]);
        const double target = scaling.denormalize(data.y.at(i, c));
        rec.target.push_back(target);
        const double d = rec.pred_mean[c] - target;
        rec.error += d * d;
        flat_pred.push_back(rec.pred_mean[c]);
        flat_target.push_back(target);
      }
    }
    errors[i] = rec.error;
    totals[i] = rec.var_total;
    report.per_sample.push_back(std::move(rec));
  }

  if (categorical) {
    report.metrics.mae = abs_err / static_cast<double>(n);
    report.metrics.accuracy = static_cast<double>(correct) / static_cast<double>(n);
    report.metrics.ece = ece(probs, data.labels);
  } else {
    report.metrics.mae = mae(flat_pred, flat_target);
  }
  const bool constant = std::all_of(totals.begin(), totals.end(), [&](double v) { return v == totals[0]; }) ||
                        std::all_of(errors.begin(), errors.end(), [&](double v) { return v == errors[0]; });
  if (n >= 2 && !constant) report.metrics.spearman_var_err = spearman(totals, errors);
  return report;
}

namespace {

nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

}  // namespace

nlohmann::json UQReport::to_json() const {
  nlohmann::json j;
  j["mode"] = to_string(mode);
  j["mc_steps"] = mc_steps;
  j["task"] = classification ? "classification" : "regression";
  j["metrics"] = {{"mae", metrics.mae},
                  {"accuracy", optional_json(metrics.accuracy)},
                  {"ece", optional_json(metrics.ece)},
                  {"spearman_var_err", optional_json(metrics.spearman_var_err)}};
  auto& rows = j["per_sample"] = nlohmann::json::array();
  for (const auto& r : per_sample) {
    nlohmann::json row = {{"id", r.id},
                          {"pred_mean", r.pred_mean},
                          {"var_total", r.var_total},
                          {"var_epistemic", r.var_epistemic},
                          {"var_aleatoric", r.var_aleatoric},
                          {"error", r.error}};
    if (r.label) row["label"] = *r.label;
    else row["target"] = r.target;
    rows.push_back(std::move(row));
  }
  return j;
}

namespace {

std::string join(const std::vector<double>& v) {
  std::ostringstream ss;
  ss.precision(17);
  for (std::size_t i = 0; i < v.size(); ++i) ss << (i ? ";" : "") << v[i];
  return ss.str();
}

}  // namespace

void UQReport::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out.precision(17);
  out << "id,pred,target,var_total,var_epi,var_ale,sq_error\n";
  for (const auto& r : per_sample) {
    out << r.id << ',';
    if (r.label) {
      out << argmax(r.pred_mean.data(), r.pred_mean.size()) << ',' << *r.label;
    } else {
      out << join(r.pred_mean) << ',' << join(r.target);
    }
    out << ',' << r.var_total << ',' << r.var_epistemic << ',' << r.var_aleatoric << ',' << r.error << '\n';
  }
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

}  // namespace balora
