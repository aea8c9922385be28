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

// balora: train, eval, sample, bench and verify from the command line.
//
// Exit codes: 0 ok, 1 verification or assertion failure, 2 configuration or usage
// error, 3 I/O or corrupt input.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "balora/bench.hpp"
#include "balora/checkpoint.hpp"
#include "balora/errors.hpp"
#include "balora/parallel.hpp"
#include "balora/tasks.hpp"
#include "balora/uncertainty.hpp"
#include "balora/verify.hpp"

#ifndef BALORA_VERSION_STRING
#define BALORA_VERSION_STRING "unknown"
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace balora {
namespace {

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << j.dump(2) << '\n';
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

/// One per run, written before any work and rewritten on exit.
class RunManifest {
 public:
  RunManifest(const fs::path& out, std::string command, std::vector<std::string> argv)
      : path_(out / (command + ".manifest.json")) {
    j_ = {{"command", command},
          {"argv", argv},
          {"version", BALORA_VERSION_STRING},
          {"config_path", nullptr},
          {"seed", nullptr},
          {"started", utc_now()},
          {"finished", nullptr},
          {"status", "running"},
          {"exit_code", nullptr},
          {"outputs", json::array()},
          {"timings_s", json::object()}};
    write_json(path_, j_);
  }

  ~RunManifest() {
    if (!done_) {
      try {
        finish(1, "terminated without a result");
      } catch (...) {
      }
    }
  }

  void config(const fs::path& p) { j_["config_path"] = p.string(); }
  void seed(std::uint64_t s) { j_["seed"] = s; }
  void output(const fs::path& p) { j_["outputs"].push_back(p.string()); }
  void timing(const std::string& key, double seconds) { j_["timings_s"][key] = seconds; }
  void note(const std::string& key, json value) { j_[key] = std::move(value); }

  void finish(int code, const std::string& error = "") {
    done_ = true;
    j_["finished"] = utc_now();
    j_["exit_code"] = code;
    j_["status"] = code == 0 ? "ok" : "failed";
    if (!error.empty()) j_["error"] = error;
    write_json(path_, j_);
  }

 private:
  fs::path path_;
  json j_;
  bool done_ = false;
};

struct Common {
  fs::path out = "balora_out";
  std::string config;
  std::optional<std::uint64_t> seed;
};

ExperimentConfig load_experiment(const Common& c) {
  if (c.config.empty()) throw ConfigError("config", "--config is required");
  auto kv = KeyValueConfig::load(c.config);
  if (c.seed) kv.set("seed", std::to_string(*c.seed));
  return ExperimentConfig::from_config(kv);
}

json task_scaling(const TargetScaling& s) { return {{"mean", s.mean}, {"stddev", s.stddev}}; }

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int cmd_train(const Common& c, RunManifest& m) {
  m.config(c.config);
  const auto cfg = load_experiment(c);
  m.seed(cfg.train.seed);
  write_json(c.out / "config.json", cfg.to_json());
  m.output(c.out / "config.json");

  const auto data = load_or_generate(cfg.task, c.out / "data");
  m.output(c.out / "data");

  auto t0 = std::chrono::steady_clock::now();
  const auto backbone = pretrain_backbone(data, cfg.head(), cfg.backbone, cfg.pretrain);
  m.timing("pretrain", seconds_since(t0));
  save_network(c.out / "backbone.ckpt", backbone, cfg.pretrain.seed);
  m.output(c.out / "backbone.ckpt");

  std::ofstream metrics(c.out / "metrics.jsonl", std::ios::trunc);
  if (!metrics) throw IoError("cannot write '" + (c.out / "metrics.jsonl").string() + "'");
  const auto res = adapt(backbone, data.train, cfg.adapter, cfg.prior, cfg.train, &metrics);
  metrics.close();
  if (!metrics) throw IoError("failed writing metrics log");
  m.output(c.out / "metrics.jsonl");
  m.timing("adapt", res.seconds);

  save_network(c.out / "model.ckpt", res.net, cfg.train.seed,
               {{"config", cfg.to_json()}, {"scaling", task_scaling(data.scaling)}});
  m.output(c.out / "model.ckpt");

  json summary = {{"steps", res.log.steps}, {"final_loss", res.log.final_loss}};
  if (!cfg.task.classification()) summary["val_mse_normalised"] = deterministic_mse(res.net, data.val);
  write_json(c.out / "train_summary.json", summary);
  m.output(c.out / "train_summary.json");
  std::cout << "trained " << res.log.steps << " steps, final loss " << res.log.final_loss << "\n";
  return 0;
}

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string split = "test";
  std::string mode = "mc";
  std::size_t mc_steps = 100;
  std::size_t samples = 10;
};

struct EvalInputs {
  LoadedNetwork model;
  Dataset data;
  TargetScaling scaling;
  std::uint64_t seed = 0;
};

EvalInputs eval_inputs(const Common& c, const EvalArgs& a, RunManifest& m) {
  if (a.checkpoint.empty()) throw ConfigError("checkpoint", "--checkpoint is required");
  EvalInputs in{load_network(a.checkpoint), {}, {}, 0};
  if (in.model.extra.contains("scaling")) {
    const auto& s = in.model.extra.at("scaling");
    in.scaling = {s.at("mean").get<double>(), s.at("stddev").get<double>()};
  }
  in.seed = in.model.seed;
  if (!a.data.empty()) {
    in.data = read_dataset_csv(a.data);
  } else {
    m.config(c.config);
    const auto cfg = load_experiment(c);
    in.seed = cfg.train.seed;
    const auto all = load_or_generate(cfg.task, c.out / "data");
    in.scaling = all.scaling;
    if (a.split == "train") in.data = all.train;
    else if (a.split == "val") in.data = all.val;
    else if (a.split == "test") in.data = all.test;
    else throw ConfigError("split", "must be train, val or test");
  }
  if (c.seed) in.seed = *c.seed;
  m.seed(in.seed);
  if (in.data.x.cols() != in.model.net.in_dim()) {
    throw ConfigError("data", "input width " + std::to_string(in.data.x.cols()) + " does not match the checkpoint (" +
                                  std::to_string(in.model.net.in_dim()) + ")");
  }
  return in;
}

int cmd_eval(const Common& c, const EvalArgs& a, RunManifest& m) {
  EvalMode mode;
  try {
    mode = eval_mode_from_string(a.mode);
  } catch (const ArgumentError& e) {
    throw ConfigError("mode", e.what());
  }
  if (mode == EvalMode::mc && a.mc_steps < 2) throw ConfigError("mc-steps", "must be at least 2 in mc mode");
  const auto in = eval_inputs(c, a, m);
  if (in.data.classification() != (in.model.net.likelihood == Likelihood::categorical)) {
    throw ConfigError("data", "dataset type does not match the checkpoint head");
  }
  const auto t0 = std::chrono::steady_clock::now();
  const auto report = evaluate(in.model.net, in.data, mode, a.mc_steps, in.seed, in.scaling);
  m.timing("evaluate", seconds_since(t0));
  write_json(c.out / "report.json", report.to_json());
  report.write_csv(c.out / "report.csv");
  m.output(c.out / "report.json");
  m.output(c.out / "report.csv");
  std::cout << report.to_json().at("metrics").dump() << "\n";
  return 0;
}

int cmd_sample(const Common& c, const EvalArgs& a, RunManifest& m) {
  if (a.samples == 0) throw ConfigError("samples", "must be positive");
  const auto in = eval_inputs(c, a, m);
  const auto& net = in.model.net;
  const bool classes = net.likelihood == Likelihood::categorical;
  const fs::path path = c.out / "samples.csv";
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out.precision(17);
  out << "id,draw";
  for (std::size_t j = 0; j < net.out_dim(); ++j) out << (classes ? ",p" : ",y") << j;
  out << '\n';
  const std::size_t cols = net.out_dim();
  for (std::size_t s = 0; s < a.samples; ++s) {
    const auto draw = predictive_draw(net, in.data.x, in.seed, s);
    for (std::size_t i = 0; i < in.data.size(); ++i) {
      out << i << ',' << s;
      for (std::size_t j = 0; j < cols; ++j) {
        const double v = draw[i * cols + j];
        out << ',' << (classes ? v : in.scaling.denormalize(v));
      }
      out << '\n';
    }
  }
  if (!out) throw IoError("failed writing '" + path.string() + "'");
  m.output(path);
  std::cout << "wrote " << a.samples << " draws for " << in.data.size() << " inputs\n";
  return 0;
}

int cmd_bench(const Common& c, const bench::Options& o, RunManifest& m) {
  m.seed(o.seed);
  m.note("bench_options", {{"ks", o.ks}, {"r", o.r}, {"d", o.d}, {"samples", o.samples}, {"dense", o.dense}});
  const auto t0 = std::chrono::steady_clock::now();
  const auto res = bench::run(o);
  m.timing("bench", seconds_since(t0));
  res.write_csv(c.out / "bench.csv");
  write_json(c.out / "bench.json", res.to_json());
  m.output(c.out / "bench.csv");
  m.output(c.out / "bench.json");
  for (const auto& row : res.rows) {
    std::printf("k=%-5zu %-8s median %.0f ns\n", row.k, row.method.c_str(), row.median_ns);
  }
  for (const auto& f : res.fits) std::printf("log-log slope %-8s %.3f\n", f.method.c_str(), f.slope);
  return 0;
}

int cmd_verify(const Common& c, verify::Options o, const std::string& fault, RunManifest& m) {
  if (c.seed) o.seed = *c.seed;
  m.seed(o.seed);
  if (!fault.empty()) {
    if (fault != "kl-sign") throw ConfigError("inject-fault", "unknown fault '" + fault + "'");
    o.hooks.kl_per_entry = [](double a, double p) { return -kl_per_entry(a, p); };
    m.note("injected_fault", fault);
  }
  const auto results = verify::run(o);
  if (results.empty()) throw ConfigError("filter", "'" + o.filter + "' selects no check");
  const auto summary = verify::summary_json(results);
  write_json(c.out / "verify.json", summary);
  m.output(c.out / "verify.json");
  for (const auto& r : results) {
    std::printf("%s %-24s measured %.3g tolerance %.3g (%.1f s) %s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(),
                r.measured, r.tolerance, r.seconds, r.detail.c_str());
  }
  if (!summary.at("passed").get<bool>()) {
    std::cerr << "verification failed:";
    for (const auto& n : summary.at("failures")) std::cerr << ' ' << n.get<std::string>();
    std::cerr << '\n';
    return 1;
  }
  return 0;
}

int run(int argc, char** argv) {
  CLI::App app{"Bayesian low-rank adapters: training, evaluation and oracle checks"};
  app.set_version_flag("--version", BALORA_VERSION_STRING);
  app.require_subcommand(1);

  Common common;
  auto add_common = [&](CLI::App* sub, bool config) {
    sub->add_option("--out", common.out, "Output directory")->capture_default_str();
    if (config) sub->add_option("--config", common.config, "key = value experiment config");
    sub->add_option("--seed", common.seed, "Overrides the config seed");
  };

  auto* train = app.add_subcommand("train", "Pretrain a backbone, attach adapters and train them");
  add_common(train, true);

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint and write a UQ report");
  add_common(eval, true);
  eval->add_option("--checkpoint", ev.checkpoint, "Checkpoint from train");
  eval->add_option("--data", ev.data, "Dataset CSV (instead of the config's task)");
  eval->add_option("--split", ev.split, "train, val or test")->capture_default_str();
  eval->add_option("--mode", ev.mode, "deterministic or mc")->capture_default_str();
  eval->add_option("--mc-steps", ev.mc_steps, "Monte Carlo draws in mc mode")->capture_default_str();

  auto* sample = app.add_subcommand("sample", "Write posterior-predictive draws");
  add_common(sample, true);
  sample->add_option("--checkpoint", ev.checkpoint, "Checkpoint from train");
  sample->add_option("--data", ev.data, "Dataset CSV (instead of the config's task)");
  sample->add_option("--split", ev.split, "train, val or test")->capture_default_str();
  sample->add_option("--samples", ev.samples, "Draws per input")->capture_default_str();

  bench::Options bo;
  std::string k_range = "64:2048";
  bool no_dense = false;
  auto* bench_cmd = app.add_subcommand("bench", "Time low-rank against dense-covariance sampling");
  add_common(bench_cmd, false);
  bench_cmd->add_option("--k-range", k_range, "lo:hi (powers of two) or a comma list")->capture_default_str();
  bench_cmd->add_option("--r", bo.r, "Adapter rank")->capture_default_str();
  bench_cmd->add_option("--d", bo.d, "Input width")->capture_default_str();
  bench_cmd->add_option("--samples", bo.samples, "Timed repetitions per point")->capture_default_str();
  bench_cmd->add_flag("--no-dense", no_dense, "Skip the dense arm");

  verify::Options vo;
  std::string fault;
  auto* verify_cmd = app.add_subcommand("verify", "Run the oracle suite");
  add_common(verify_cmd, false);
  verify_cmd->add_option("--filter", vo.filter, "Check group or name substring");
  verify_cmd->add_option("--draws", vo.draws, "Monte Carlo draws per configuration")->capture_default_str();
  verify_cmd->add_option("--configs", vo.configs, "Random configurations")->capture_default_str();
  verify_cmd->add_option("--inject-fault", fault, "Testing aid: kl-sign")->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  CLI::App* chosen = app.get_subcommands().front();
  const std::string command = chosen->get_name();
  std::error_code ec;
  fs::create_directories(common.out, ec);
  if (ec) {
    std::cerr << "error: cannot create output directory '" << common.out.string() << "': " << ec.message() << '\n';
    return 3;
  }

  std::vector<std::string> args(argv, argv + argc);
  std::optional<RunManifest> manifest;
  try {
    manifest.emplace(common.out, command, args);
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }

  int code = 0;
  std::string error;
  try {
    manifest->note("workers", worker_count());
    if (command == "train") code = cmd_train(common, *manifest);
    else if (command == "eval") code = cmd_eval(common, ev, *manifest);
    else if (command == "sample") code = cmd_sample(common, ev, *manifest);
    else if (command == "bench") {
      bo.ks = bench::parse_k_range(k_range);
      bo.dense = !no_dense;
      if (common.seed) bo.seed = *common.seed;
      code = cmd_bench(common, bo, *manifest);
    } else code = cmd_verify(common, vo, fault, *manifest);
    if (code != 0) error = "verification failed";
  } catch (const ConfigError& e) {
    code = 2;
    error = e.what();
    std::cerr << "config error";
    if (!e.key().empty()) std::cerr << " [" << e.key() << "]";
    std::cerr << ": " << e.what() << '\n';
  } catch (const IoError& e) {
    code = 3;
    error = e.what();
    std::cerr << "i/o error: " << e.what() << '\n';
  } catch (const std::exception& e) {
    code = 1;
    error = e.what();
    std::cerr << "error: " << e.what() << '\n';
  }
  try {
    manifest->finish(code, error);
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    if (code == 0) code = 3;
  }
  return code;
}

}  // namespace
}  // namespace balora

int main(int argc, char** argv) { return balora::run(argc, argv); }
