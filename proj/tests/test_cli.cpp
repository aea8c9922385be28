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

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

const fs::path kCli = BALORA_CLI_PATH;
const fs::path kConfigs = BALORA_CONFIG_DIR;

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("balora_test_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Run {
  int code = -1;
  std::string err;
  std::string out;
};

Run run(const std::string& args, const fs::path& dir, const std::string& env = "") {
  const auto err = dir / "stderr.txt", out = dir / "stdout.txt";
  const std::string cmd = env + " '" + kCli.string() + "' " + args + " >'" + out.string() + "' 2>'" + err.string() + "'";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.err = slurp(err);
  r.out = slurp(out);
  return r;
}

// Small enough to train in well under a second.
fs::path tiny_config(const fs::path& dir, const std::string& extra = "") {
  const auto path = dir / "tiny.cfg";
  std::ofstream(path) << "task = heteroscedastic\nn_pretrain = 128\nn_train = 64\nn_val = 32\nn_test = 48\n"
                         "hidden = 8,8\npretrain_epochs = 5\nrank = 2\nalpha_hidden = 8\ninit_std = 0.1\n"
                         "epochs = 3\nbatch_size = 16\nseed = 3\n"
                      << extra;
  return path;
}

nlohmann::json manifest(const fs::path& dir, const std::string& cmd) {
  return nlohmann::json::parse(slurp(dir / (cmd + ".manifest.json")));
}

}  // namespace

TEST_CASE("train twice with the same config and seed gives byte-identical metrics") {
  const auto dir = scratch("determinism");
  const auto cfg = kConfigs / "toy_hetero.cfg";
  const auto a = run("train --config '" + cfg.string() + "' --seed 7 --out '" + (dir / "a").string() + "'", dir);
  REQUIRE_MESSAGE(a.code == 0, a.err);
  const auto b = run("train --config '" + cfg.string() + "' --seed 7 --out '" + (dir / "b").string() + "'", dir);
  REQUIRE(b.code == 0);
  const auto ma = slurp(dir / "a" / "metrics.jsonl");
  CHECK_FALSE(ma.empty());
  CHECK(ma == slurp(dir / "b" / "metrics.jsonl"));
  CHECK(slurp(dir / "a" / "model.ckpt") == slurp(dir / "b" / "model.ckpt"));

  for (const char* sub : {"a", "b"}) {
    const auto r = run("eval --config '" + cfg.string() + "' --seed 7 --checkpoint '" + (dir / sub / "model.ckpt").string() +
                           "' --mc-steps 20 --out '" + (dir / sub).string() + "'",
                       dir);
    REQUIRE_MESSAGE(r.code == 0, r.err);
  }
  CHECK(slurp(dir / "a" / "report.json") == slurp(dir / "b" / "report.json"));
  CHECK(slurp(dir / "a" / "report.csv") == slurp(dir / "b" / "report.csv"));

  const auto c = run("train --config '" + cfg.string() + "' --seed 8 --out '" + (dir / "c").string() + "'", dir);
  REQUIRE(c.code == 0);
  CHECK(ma != slurp(dir / "c" / "metrics.jsonl"));

  // Metrics lines carry the training terms and the alpha summary.
  std::istringstream lines(ma);
  std::string line;
  std::getline(lines, line);
  const auto j = nlohmann::json::parse(line);
  for (const char* key : {"loss", "nll", "kl_normalized", "alpha", "frozen_grad_norm"}) CHECK(j.contains(key));
  CHECK(j.at("alpha").at("per_layer_mean").size() == 2);
}

TEST_CASE("manifests: one per run, finalised on success and failure") {
  const auto dir = scratch("manifest");
  const auto cfg = tiny_config(dir);
  const auto ok = run("train --config '" + cfg.string() + "' --out '" + (dir / "ok").string() + "'", dir);
  REQUIRE_MESSAGE(ok.code == 0, ok.err);
  const auto m = manifest(dir / "ok", "train");
  CHECK(m.at("command") == "train");
  CHECK(m.at("status") == "ok");
  CHECK(m.at("exit_code") == 0);
  CHECK(m.at("seed") == 3);
  CHECK(m.at("config_path") == cfg.string());
  CHECK_FALSE(m.at("version").get<std::string>().empty());
  CHECK(m.at("finished").is_string());
  for (const auto& p : m.at("outputs")) {
    CHECK(fs::exists(p.get<std::string>()));
    CHECK(p.get<std::string>().rfind((dir / "ok").string(), 0) == 0);
  }

  const auto bad = run("train --config '" + (dir / "missing.cfg").string() + "' --out '" + (dir / "bad").string() + "'", dir);
  CHECK(bad.code == 2);
  const auto mb = manifest(dir / "bad", "train");
  CHECK(mb.at("status") == "failed");
  CHECK(mb.at("exit_code") == 2);
  CHECK(mb.contains("error"));
}

TEST_CASE("config errors exit 2 and name the key") {
  const auto dir = scratch("config");
  CHECK(run("train --config '" + (dir / "nope.cfg").string() + "' --out '" + dir.string() + "'", dir).code == 2);

  const auto unknown = tiny_config(dir, "learning_rate = 0.1\n");
  const auto r = run("train --config '" + unknown.string() + "' --out '" + dir.string() + "'", dir);
  CHECK(r.code == 2);
  CHECK(r.err.find("learning_rate") != std::string::npos);

  const auto bad_value = tiny_config(dir, "p = 2\n");
  const auto rp = run("train --config '" + bad_value.string() + "' --out '" + dir.string() + "'", dir);
  CHECK(rp.code == 2);
  CHECK(rp.err.find("[p]") != std::string::npos);

  CHECK(run("frobnicate --out '" + dir.string() + "'", dir).code == 2);
  CHECK(run("train --bogus-flag --out '" + dir.string() + "'", dir).code == 2);
  const auto cfg = tiny_config(dir);
  CHECK(run("train --config '" + cfg.string() + "' --out '" + dir.string() + "'", dir, "BALORA_THREADS=abc").code == 2);
  CHECK(run("train --config '" + cfg.string() + "' --out '" + dir.string() + "'", dir, "BALORA_THREADS=2").code == 0);
}

TEST_CASE("eval: modes, bad arguments and corrupt checkpoints") {
  const auto dir = scratch("eval");
  const auto cfg = tiny_config(dir);
  REQUIRE(run("train --config '" + cfg.string() + "' --out '" + dir.string() + "'", dir).code == 0);
  const std::string base = "eval --config '" + cfg.string() + "' --out '" + dir.string() + "' --checkpoint '";
  const auto ckpt = (dir / "model.ckpt").string();

  const auto det = run(base + ckpt + "' --mode deterministic", dir);
  REQUIRE_MESSAGE(det.code == 0, det.err);
  const auto rd = nlohmann::json::parse(slurp(dir / "report.json"));
  CHECK(rd.at("mode") == "deterministic");
  CHECK(rd.at("per_sample").size() == 48);

  const auto mc = run(base + ckpt + "' --mode mc --mc-steps 10", dir);
  REQUIRE(mc.code == 0);
  const auto rm = nlohmann::json::parse(slurp(dir / "report.json"));
  CHECK(rm.at("mc_steps") == 10);
  CHECK(rm.at("metrics").at("spearman_var_err").is_number());
  std::ifstream csv(dir / "report.csv");
  std::string header;
  std::getline(csv, header);
  CHECK(header == "id,pred,target,var_total,var_epi,var_ale,sq_error");

  CHECK(run(base + ckpt + "' --mode mc --mc-steps 1", dir).code == 2);
  CHECK(run(base + ckpt + "' --mode bayes", dir).code == 2);
  CHECK(run(base + (dir / "absent.ckpt").string() + "'", dir).code == 3);

  // Flip one payload byte: the checksum catches it.
  auto bytes = slurp(dir / "model.ckpt");
  bytes[bytes.size() - 5] ^= 0x10;
  std::ofstream(dir / "corrupt.ckpt", std::ios::binary) << bytes;
  const auto corrupt = run(base + (dir / "corrupt.ckpt").string() + "'", dir);
  CHECK(corrupt.code == 3);
  CHECK(manifest(dir, "eval").at("exit_code") == 3);
  std::ofstream(dir / "truncated.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  CHECK(run(base + (dir / "truncated.ckpt").string() + "'", dir).code == 3);

  // A dataset CSV can replace the config's task.
  const auto data_run = run("eval --out '" + dir.string() + "' --checkpoint '" + ckpt + "' --data '" +
                                (dir / "data" / "val.csv").string() + "' --mc-steps 5",
                            dir);
  CHECK_MESSAGE(data_run.code == 0, data_run.err);
  CHECK(nlohmann::json::parse(slurp(dir / "report.json")).at("per_sample").size() == 32);
  std::ofstream(dir / "bad.csv") << "x0,y0\n1,zz\n";
  CHECK(run("eval --out '" + dir.string() + "' --checkpoint '" + ckpt + "' --data '" + (dir / "bad.csv").string() + "'", dir)
            .code == 3);
}

TEST_CASE("kl_weight = 0 logs the KL term but leaves it out of the loss") {
  const auto dir = scratch("klweight");
  const auto cfg = tiny_config(dir, "kl_weight = 0\n");
  REQUIRE(run("train --config '" + cfg.string() + "' --out '" + dir.string() + "'", dir).code == 0);
  std::istringstream lines(slurp(dir / "metrics.jsonl"));
  std::string line;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.at("kl_weight") == 0.0);
    CHECK(j.at("kl_normalized").get<double>() > 0.0);
    CHECK(j.at("loss").get<double>() == j.at("nll").get<double>());
  }
}

TEST_CASE("sample writes one row per input and draw") {
  const auto dir = scratch("sample");
  const auto cfg = tiny_config(dir);
  REQUIRE(run("train --config '" + cfg.string() + "' --out '" + dir.string() + "'", dir).code == 0);
  const auto r = run("sample --config '" + cfg.string() + "' --out '" + dir.string() + "' --checkpoint '" +
                         (dir / "model.ckpt").string() + "' --samples 4 --split val",
                     dir);
  REQUIRE_MESSAGE(r.code == 0, r.err);
  std::istringstream lines(slurp(dir / "samples.csv"));
  std::string line;
  std::getline(lines, line);
  CHECK(line == "id,draw,y0");
  std::size_t rows = 0;
  while (std::getline(lines, line)) ++rows;
  CHECK(rows == 4 * 32);
  CHECK(run("sample --config '" + cfg.string() + "' --out '" + dir.string() + "' --checkpoint '" +
                (dir / "model.ckpt").string() + "' --samples 0",
            dir)
            .code == 2);
}

TEST_CASE("bench writes the timing schema and slope fits") {
  const auto dir = scratch("bench");
  const auto r = run("bench --k-range 64:256 --r 4 --samples 3 --out '" + dir.string() + "'", dir);
  REQUIRE_MESSAGE(r.code == 0, r.err);
  std::istringstream lines(slurp(dir / "bench.csv"));
  std::string line;
  std::getline(lines, line);
  CHECK(line == "k,r,method,median_ns,p10_ns,p90_ns");
  std::size_t rows = 0;
  while (std::getline(lines, line)) ++rows;
  CHECK(rows == 6);
  const auto j = nlohmann::json::parse(slurp(dir / "bench.json"));
  CHECK(j.at("fits").size() == 2);
  CHECK(run("bench --k-range 64:4096 --out '" + dir.string() + "'", dir).code == 2);
  CHECK(run("bench --k-range x:3 --out '" + dir.string() + "'", dir).code == 2);
}

TEST_CASE("verify: filter, summary and mutation smoke test") {
  const auto dir = scratch("verify");
  const auto cov = run("verify --filter covariance --draws 20000 --configs 10 --out '" + dir.string() + "'", dir);
  CHECK_MESSAGE(cov.code == 0, cov.out);
  const auto j = nlohmann::json::parse(slurp(dir / "verify.json"));
  CHECK(j.at("passed") == true);
  REQUIRE(j.at("checks").size() == 2);
  for (const auto& c : j.at("checks")) {
    CHECK(c.at("group") == "covariance");
    CHECK(c.contains("measured"));
    CHECK(c.contains("tolerance"));
  }

  const auto kl = run("verify --filter kl --out '" + dir.string() + "'", dir);
  CHECK(kl.code == 0);
  const auto flipped = run("verify --filter kl --inject-fault kl-sign --out '" + dir.string() + "'", dir);
  CHECK(flipped.code == 1);
  CHECK(flipped.err.find("kl_quadrature") != std::string::npos);
  const auto jf = nlohmann::json::parse(slurp(dir / "verify.json"));
  CHECK(jf.at("passed") == false);
  CHECK(manifest(dir, "verify").at("exit_code") == 1);

  CHECK(run("verify --filter nothing_matches --out '" + dir.string() + "'", dir).code == 2);
  CHECK(run("verify --inject-fault other --out '" + dir.string() + "'", dir).code == 2);
}
