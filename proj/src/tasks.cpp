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

#include "balora/tasks.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "balora/errors.hpp"

namespace balora {

const char* to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::linear: return "linear";
    case TaskKind::heteroscedastic: return "heteroscedastic";
    case TaskKind::two_moons: return "two_moons";
    case TaskKind::blobs: return "blobs";
  }
  return "?";
}

TaskKind task_kind_from_string(const std::string& s) {
  if (s == "linear") return TaskKind::linear;
  if (s == "heteroscedastic") return TaskKind::heteroscedastic;
  if (s == "two_moons") return TaskKind::two_moons;
  if (s == "blobs") return TaskKind::blobs;
  throw ArgumentError("unknown task '" + s + "'");
}

void SyntheticTask::validate() const {
  if (d_in == 0) throw ConfigError("d_in", "must be positive");
  if (d_out == 0) throw ConfigError("d_out", "must be positive");
  if (n_pretrain == 0) throw ConfigError("n_pretrain", "must be positive");
  if (n_train == 0) throw ConfigError("n_train", "must be positive");
  if (n_val == 0) throw ConfigError("n_val", "must be positive");
  if (n_test == 0) throw ConfigError("n_test", "must be positive");
  if (!(noise >= 0.0)) throw ConfigError("noise", "must be non-negative");
  if (!(noise_slope >= 0.0)) throw ConfigError("noise_slope", "must be non-negative");
  if (kind == TaskKind::two_moons && (d_in < 2 || d_out != 2)) {
    throw ConfigError("d_in", "two_moons needs d_in >= 2 and d_out = 2");
  }
  if (kind == TaskKind::blobs && d_out < 2) throw ConfigError("d_out", "blobs needs at least two classes");
}

namespace {

double norm(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += v * v;
  return std::sqrt(s);
}

std::vector<double> gaussian(Rng& rng, std::size_t n, double scale) {
  std::vector<double> v(n);
  for (double& e : v) e = scale * rng.normal();
  return v;
}

/// Fixed generator parameters, drawn once per task seed.
struct Generator {
  const SyntheticTask& task;
  std::vector<double> w, b, a, u, v, shift_dir;
  std::vector<std::vector<double>> centres;

  explicit Generator(const SyntheticTask& t) : task(t) {
    Rng rng = Rng(t.seed).split(0);
    const double s = 1.0 / std::sqrt(static_cast<double>(t.d_in));
    w = gaussian(rng, t.d_out * t.d_in, s);
    b = gaussian(rng, t.d_out, 0.1);
    a = gaussian(rng, t.d_in, 2.0 * s);
    u = gaussian(rng, t.d_out, 1.0);
    v = gaussian(rng, t.d_in, 1.0);
    const double nv = norm(v);
    for (double& e : v) e /= nv;
    shift_dir = v;
    for (std::size_t k = 0; k < t.d_out; ++k) centres.push_back(gaussian(rng, t.d_in, 2.0));
  }

  double mean(std::span<const double> x, std::size_t k, bool target) const {
    double y = b[k];
    for (std::size_t j = 0; j < task.d_in; ++j) y += w[k * task.d_in + j] * x[j];
    double vx = 0.0, ax = 0.0;
    for (std::size_t j = 0; j < task.d_in; ++j) {
      vx += v[j] * x[j];
      ax += a[j] * x[j];
    }
    if (task.kind == TaskKind::heteroscedastic) {
      y += 0.5 * std::sin(ax);
      if (target) y += task.shift * u[k] * std::sin(vx);
    } else if (target) {
      y += task.shift * u[k] * vx;
    }
    return y;
  }

  double noise_std(std::span<const double> x) const {
    if (task.kind == TaskKind::heteroscedastic) return task.noise + task.noise_slope * norm(x);
    return task.noise;
  }

  Dataset regression(Rng rng, std::size_t n, bool target) const {
    std::vector<double> xs(n * task.d_in), ys(n * task.d_out);
    for (std::size_t i = 0; i < n; ++i) {
      std::span<double> x(xs.data() + i * task.d_in, task.d_in);
      for (double& e : x) e = rng.normal();
      const double sd = noise_std(x);
      for (std::size_t k = 0; k < task.d_out; ++k) ys[i * task.d_out + k] = mean(x, k, target) + sd * rng.normal();
    }
    return {Tensor::from_values({n, task.d_in}, std::move(xs)), Tensor::from_values({n, task.d_out}, std::move(ys)),
            {}};
  }

  Dataset classification(Rng rng, std::size_t n, bool target) const {
    std::vector<double> xs(n * task.d_in);
    std::vector<std::size_t> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t label = rng.below(task.d_out);
      labels[i] = label;
      double* x = xs.data() + i * task.d_in;
      if (task.kind == TaskKind::two_moons) {
        const double t = std::numbers::pi * rng.uniform();
        double px = label == 0 ? std::cos(t) : 1.0 - std::cos(t);
        double py = label == 0 ? std::sin(t) : 0.5 - std::sin(t);
        px += task.noise * rng.normal();
        py += task.noise * rng.normal();
        const double angle = target ? task.shift : 0.0;
        const double cx = px - 0.5, cy = py - 0.25;
        x[0] = std::cos(angle) * cx - std::sin(angle) * cy;
        x[1] = std::sin(angle) * cx + std::cos(angle) * cy;
        for (std::size_t j = 2; j < task.d_in; ++j) x[j] = task.noise * rng.normal();
      } else {
        for (std::size_t j = 0; j < task.d_in; ++j) {
          x[j] = centres[label][j] + (target ? task.shift * shift_dir[j] : 0.0) + task.noise * rng.normal();
        }
      }
    }
    return {Tensor::from_values({n, task.d_in}, std::move(xs)), Tensor(), std::move(labels)};
  }

  Dataset split(std::uint64_t stream, std::size_t n, bool target) const {
    const Rng rng = Rng(task.seed).split(stream);
    return task.classification() ? classification(rng, n, target) : regression(rng, n, target);
  }
};

Tensor normalise(const Tensor& y, const TargetScaling& s) {
  std::vector<double> v(y.values().begin(), y.values().end());
  for (double& e : v) e = (e - s.mean) / s.stddev;
  return Tensor::from_values(y.shape(), std::move(v));
}

}  // namespace

TaskData generate(const SyntheticTask& task) {
  task.validate();
  const Generator gen(task);
  TaskData data{gen.split(1, task.n_pretrain, false), gen.split(2, task.n_train, true),
                gen.split(3, task.n_val, true), gen.split(4, task.n_test, true), {}};
  if (!task.classification()) {
    const auto y = data.train.y.values();
    double m = 0.0;
    for (double e : y) m += e;
    m /= static_cast<double>(y.size());
    double var = 0.0;
    for (double e : y) var += (e - m) * (e - m);
    var /= static_cast<double>(y.size());
    data.scaling = {m, var > 0.0 ? std::sqrt(var) : 1.0};
    for (Dataset* d : {&data.pretrain, &data.train, &data.val, &data.test}) d->y = normalise(d->y, data.scaling);
  }
  return data;
}

double true_noise_std(const SyntheticTask& task, const TaskData& data, std::span<const double> x) {
  if (task.classification()) throw ArgumentError("true_noise_std: regression tasks only");
  if (x.size() != task.d_in) throw ShapeError("true_noise_std: wrong input width");
  return Generator(task).noise_std(x) / data.scaling.stddev;
}

void write_dataset_csv(const std::filesystem::path& path, const Dataset& data) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out.precision(17);
  const std::size_t d = data.x.cols();
  for (std::size_t j = 0; j < d; ++j) out << (j ? "," : "") << 'x' << j;
  const std::size_t k = data.classification() ? 0 : data.y.cols();
  for (std::size_t j = 0; j < k; ++j) out << ",y" << j;
  if (data.classification()) out << ",label";
  out << '\n';
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (std::size_t j = 0; j < d; ++j) out << (j ? "," : "") << data.x.at(i, j);
    for (std::size_t j = 0; j < k; ++j) out << ',' << data.y.at(i, j);
    if (data.classification()) out << ',' << data.labels[i];
    out << '\n';
  }
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

Dataset read_dataset_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line)) throw IoError("'" + path.string() + "' is empty");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  std::size_t d = 0, k = 0;
  bool label = false;
  for (std::size_t c = 0; c < header.size(); ++c) {
    const auto& h = header[c];
    if (h == "x" + std::to_string(d) && k == 0 && !label) ++d;
    else if (h == "y" + std::to_string(k) && d > 0 && !label) ++k;
    else if (h == "label" && d > 0 && k == 0 && c + 1 == header.size()) label = true;
    else throw IoError("'" + path.string() + "': unexpected column '" + h + "'");
  }
  if (d == 0 || (k == 0 && !label)) throw IoError("'" + path.string() + "': missing feature or target columns");

  std::vector<double> xs, ys;
  std::vector<std::size_t> labels;
  std::size_t rows = 0, lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::size_t c = 0;
    while (std::getline(ss, cell, ',')) {
      if (c >= header.size()) throw IoError(path.string() + ":" + std::to_string(lineno) + ": too many fields");
      try {
        std::size_t used = 0;
        if (label && c == d) {
          if (cell.empty() || cell[0] < '0' || cell[0] > '9') throw std::invalid_argument("not a label");
          const unsigned long long v = std::stoull(cell, &used);
          if (used != cell.size()) throw std::invalid_argument("trailing characters");
          labels.push_back(static_cast<std::size_t>(v));
        } else {
          const double v = std::stod(cell, &used);
          if (used != cell.size() || !std::isfinite(v)) throw std::invalid_argument("not a finite number");
          (c < d ? xs : ys).push_back(v);
        }
      } catch (const std::exception&) {
        throw IoError(path.string() + ":" + std::to_string(lineno) + ": bad value '" + cell + "'");
      }
      ++c;
    }
    if (c != header.size()) throw IoError(path.string() + ":" + std::to_string(lineno) + ": too few fields");
    ++rows;
  }
  if (rows == 0) throw IoError("'" + path.string() + "' has no rows");
  Dataset data;
  data.x = Tensor::from_values({rows, d}, std::move(xs));
  if (label) data.labels = std::move(labels);
  else data.y = Tensor::from_values({rows, k}, std::move(ys));
  return data;
}

TaskData load_or_generate(const SyntheticTask& task, const std::filesystem::path& dir) {
  const nlohmann::json key = to_json(task);
  const auto meta = dir / "task.json";
  const char* names[] = {"pretrain.csv", "train.csv", "val.csv", "test.csv"};
  if (std::filesystem::exists(meta)) {
    std::ifstream in(meta);
    nlohmann::json cached;
    try {
      in >> cached;
    } catch (const nlohmann::json::exception& e) {
      throw IoError("corrupt dataset cache '" + meta.string() + "': " + e.what());
    }
    if (cached.value("task", nlohmann::json()) == key) {
      TaskData data;
      Dataset* splits[] = {&data.pretrain, &data.train, &data.val, &data.test};
      for (int i = 0; i < 4; ++i) *splits[i] = read_dataset_csv(dir / names[i]);
      data.scaling = {cached.at("scaling").at("mean").get<double>(), cached.at("scaling").at("stddev").get<double>()};
      return data;
    }
  }
  TaskData data = generate(task);
  std::filesystem::create_directories(dir);
  const Dataset* splits[] = {&data.pretrain, &data.train, &data.val, &data.test};
  for (int i = 0; i < 4; ++i) write_dataset_csv(dir / names[i], *splits[i]);
  std::ofstream out(meta, std::ios::trunc);
  out << nlohmann::json{{"task", key}, {"scaling", {{"mean", data.scaling.mean}, {"stddev", data.scaling.stddev}}}}
             .dump(2)
      << '\n';
  if (!out) throw IoError("failed writing '" + meta.string() + "'");
  return data;
}

BaLoRANet pretrain_backbone(const TaskData& data, Likelihood likelihood, const BackboneSpec& spec,
                            const TrainConfig& cfg) {
  const std::size_t out = likelihood == Likelihood::categorical
                              ? 1 + *std::max_element(data.pretrain.labels.begin(), data.pretrain.labels.end())
                              : data.pretrain.y.cols();
  Rng rng = Rng(cfg.seed).split(7);
  auto net = BaLoRANet::mlp(rng, data.pretrain.x.cols(), spec.hidden, out, likelihood);
  train(net, data.pretrain, PriorConfig{}, cfg);
  return net;
}

AdaptResult adapt(const BaLoRANet& backbone, const Dataset& train_set, const AdapterOptions& adapter,
                  const PriorConfig& prior, const TrainConfig& cfg, std::ostream* metrics) {
  const auto start = std::chrono::steady_clock::now();
  AdaptResult result{backbone.clone(), {}, 0.0};
  Rng rng = Rng(cfg.seed).split(11);
  result.net.attach_adapters(rng, adapter);
  result.log = train(result.net, train_set, prior, cfg, metrics);
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

AdaptResult pretrain_then_adapt(const TaskData& data, Likelihood likelihood, const BackboneSpec& spec,
                                const TrainConfig& pretrain_cfg, const AdapterOptions& adapter,
                                const PriorConfig& prior, const TrainConfig& cfg, std::ostream* metrics) {
  const BaLoRANet backbone = pretrain_backbone(data, likelihood, spec, pretrain_cfg);
  return adapt(backbone, data.train, adapter, prior, cfg, metrics);
}

EnsembleBaseline train_ensemble(const BaLoRANet& backbone, const Dataset& train_set, std::size_t members,
                                AdapterOptions adapter, const TrainConfig& cfg) {
  if (members < 2) throw ArgumentError("ensemble needs at least two members");
  adapter.kind = AdapterKind::lora;
  EnsembleBaseline out;
  for (std::size_t m = 0; m < members; ++m) {
    TrainConfig c = cfg;
    c.seed = cfg.seed + m;
    auto r = adapt(backbone, train_set, adapter, PriorConfig{}, c);
    out.members.push_back(std::move(r.net));
    out.member_seconds.push_back(r.seconds);
  }
  return out;
}

McPrediction run_ensemble(const EnsembleBaseline& ensemble, const Tensor& x) {
  const std::size_t m = ensemble.members.size();
  if (m < 2) throw ArgumentError("run_ensemble: need at least two members");
  McPrediction out;
  out.rows = x.rows();
  out.cols = ensemble.members.front().out_dim();
  out.samples = m;
  std::vector<std::vector<double>> preds;
  for (const auto& net : ensemble.members) {
    if (net.out_dim() != out.cols) throw ShapeError("ensemble members disagree on output width");
    preds.push_back(mc_predict(net, x, 2, 0, 1).mean);
  }
  const std::size_t n = out.rows * out.cols;
  out.mean.assign(n, 0.0);
  out.var.assign(n, 0.0);
  for (const auto& p : preds)
    for (std::size_t i = 0; i < n; ++i) out.mean[i] += p[i] / static_cast<double>(m);
  for (const auto& p : preds)
    for (std::size_t i = 0; i < n; ++i) out.var[i] += (p[i] - out.mean[i]) * (p[i] - out.mean[i]) / static_cast<double>(m);
  return out;
}

double deterministic_mse(const BaLoRANet& net, const Dataset& data) {
  if (data.classification()) throw ArgumentError("deterministic_mse: regression sets only");
  NoGradGuard guard;
  const Tensor out = net.forward(data.x, nullptr).output;
  double s = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) s += (out[i] - data.y[i]) * (out[i] - data.y[i]);
  return s / static_cast<double>(out.size());
}

namespace {

TrainConfig read_train(KeyValueConfig& kv, const std::string& prefix, TrainConfig d, std::uint64_t seed) {
  TrainConfig c;
  c.lr = kv.get_double(prefix + "lr", d.lr);
  c.epochs = kv.get_size(prefix + "epochs", d.epochs);
  c.batch_size = kv.get_size(prefix + "batch_size", d.batch_size);
  c.warmup_fraction = kv.get_double(prefix + "warmup_fraction", d.warmup_fraction);
  c.weight_decay = kv.get_double(prefix + "weight_decay", d.weight_decay);
  c.grad_clip_norm = kv.get_double(prefix + "grad_clip_norm", d.grad_clip_norm);
  c.kl_weight = prefix.empty() ? kv.get_double("kl_weight", d.kl_weight) : 0.0;
  c.seed = seed;
  return c;
}

}  // namespace

ExperimentConfig ExperimentConfig::from_config(KeyValueConfig& kv) {
  ExperimentConfig c;
  auto& t = c.task;
  t.kind = task_kind_from_string(kv.get_string("task", to_string(t.kind)));
  t.d_in = kv.get_size("d_in", t.classification() ? 2 : t.d_in);
  t.d_out = kv.get_size("d_out", t.classification() ? 2 : t.d_out);
  t.n_pretrain = kv.get_size("n_pretrain", t.n_pretrain);
  t.n_train = kv.get_size("n_train", t.n_train);
  t.n_val = kv.get_size("n_val", t.n_val);
  t.n_test = kv.get_size("n_test", t.n_test);
  t.noise = kv.get_double("noise", t.noise);
  t.noise_slope = kv.get_double("noise_slope", t.noise_slope);
  t.shift = kv.get_double("shift", t.shift);
  const std::uint64_t seed = kv.get_u64("seed", 0);
  t.seed = kv.get_u64("task_seed", seed);

  if (kv.has("likelihood")) c.likelihood = likelihood_from_string(kv.get_string("likelihood", ""));
  c.backbone.hidden = kv.get_sizes("hidden", c.backbone.hidden);

  TrainConfig pre;
  pre.lr = 1e-2;
  pre.epochs = 40;
  pre.batch_size = 64;
  c.pretrain = read_train(kv, "pretrain_", pre, seed);

  auto& a = c.adapter;
  a.kind = adapter_kind_from_string(kv.get_string("adapter", to_string(a.kind)));
  a.rank = kv.get_size("rank", a.rank);
  a.lora_alpha = kv.get_double("lora_alpha", a.lora_alpha);
  a.init_std = kv.get_double("init_std", a.init_std);
  a.alpha_hidden = kv.get_sizes("alpha_hidden", a.alpha_hidden);
  a.alpha_init = kv.get_double("alpha_init", a.alpha_init);
  a.bounds.min = kv.get_double("alpha_min", a.bounds.min);
  a.bounds.max = kv.get_double("alpha_max", a.bounds.max);
  a.train_head = kv.get_bool("train_head", a.train_head);

  c.prior.p = kv.get_double("p", c.prior.p);
  TrainConfig tr;
  tr.lr = 5e-3;
  tr.epochs = 30;
  tr.batch_size = 32;
  c.train = read_train(kv, "", tr, seed);
  c.mc_steps = kv.get_size("mc_steps", c.mc_steps);
  c.ensemble_members = kv.get_size("ensemble_members", c.ensemble_members);
  kv.reject_unused();
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  auto kv = KeyValueConfig::load(path);
  return from_config(kv);
}

void ExperimentConfig::validate() const {
  task.validate();
  pretrain.validate();
  train.validate();
  prior.validate();
  if (adapter.rank == 0) throw ConfigError("rank", "must be positive");
  if (!(adapter.lora_alpha > 0.0)) throw ConfigError("lora_alpha", "must be positive");
  if (!(adapter.init_std > 0.0)) throw ConfigError("init_std", "must be positive");
  if (!(adapter.alpha_init > 0.0)) throw ConfigError("alpha_init", "must be positive");
  if (!(adapter.bounds.min > 0.0 && adapter.bounds.max > adapter.bounds.min)) {
    throw ConfigError("alpha_min", "need 0 < alpha_min < alpha_max");
  }
  for (std::size_t h : backbone.hidden)
    if (h == 0) throw ConfigError("hidden", "widths must be positive");
  for (std::size_t h : adapter.alpha_hidden)
    if (h == 0) throw ConfigError("alpha_hidden", "widths must be positive");
  if (adapter.kind == AdapterKind::none) throw ConfigError("adapter", "must be lora or balora");
  if (backbone.hidden.empty()) throw ConfigError("hidden", "adapters sit on hidden layers; give at least one");
  const std::size_t narrowest = std::min({task.d_in, *std::min_element(backbone.hidden.begin(), backbone.hidden.end())});
  if (adapter.rank > narrowest) throw ConfigError("rank", "exceeds the narrowest adapted layer");
  if (task.classification() != (head() == Likelihood::categorical)) {
    throw ConfigError("likelihood", "does not match the task type");
  }
  if (mc_steps < 2) throw ConfigError("mc_steps", "must be at least 2");
}

nlohmann::json to_json(const SyntheticTask& t) {
  return {{"kind", to_string(t.kind)}, {"d_in", t.d_in},         {"d_out", t.d_out},
          {"n_pretrain", t.n_pretrain}, {"n_train", t.n_train},   {"n_val", t.n_val},
          {"n_test", t.n_test},         {"noise", t.noise},       {"noise_slope", t.noise_slope},
          {"shift", t.shift},           {"seed", t.seed}};
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"kl_weight", c.kl_weight},
          {"warmup_fraction", c.warmup_fraction},
          {"weight_decay", c.weight_decay},
          {"grad_clip_norm", c.grad_clip_norm},
          {"seed", c.seed}};
}

nlohmann::json to_json(const AdapterOptions& a) {
  return {{"kind", to_string(a.kind)},   {"rank", a.rank},
          {"lora_alpha", a.lora_alpha},  {"init_std", a.init_std},
          {"alpha_hidden", a.alpha_hidden}, {"alpha_init", a.alpha_init},
          {"alpha_min", a.bounds.min},   {"alpha_max", a.bounds.max},
          {"train_head", a.train_head}};
}

nlohmann::json ExperimentConfig::to_json() const {
  return {{"task", balora::to_json(task)},
          {"likelihood", balora::to_string(head())},
          {"hidden", backbone.hidden},
          {"pretrain", balora::to_json(pretrain)},
          {"adapter", balora::to_json(adapter)},
          {"p", prior.p},
          {"train", balora::to_json(train)},
          {"mc_steps", mc_steps},
          {"ensemble_members", ensemble_members}};
}

}  // namespace balora
