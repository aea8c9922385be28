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

#include "balora/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include "balora/adapter.hpp"
#include "balora/errors.hpp"

namespace balora::bench {

namespace {

using Clock = std::chrono::steady_clock;

double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

Row summarise(std::size_t k, std::size_t r, const char* method, const std::vector<double>& ns) {
  return {k, r, method, quantile(ns, 0.5), quantile(ns, 0.1), quantile(ns, 0.9)};
}

Fit fit(const std::vector<Row>& rows, const std::string& method) {
  std::vector<double> lx, ly;
  for (const auto& row : rows)
    if (row.method == method) {
      lx.push_back(std::log(static_cast<double>(row.k)));
      ly.push_back(std::log(row.median_ns));
    }
  Fit f{method, 0.0, 0.0};
  if (lx.size() < 2) return f;
  const double n = static_cast<double>(lx.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    mx += lx[i] / n;
    my += ly[i] / n;
  }
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    sxy += (lx[i] - mx) * (ly[i] - my);
    sxx += (lx[i] - mx) * (lx[i] - mx);
  }
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  return f;
}

}  // namespace

std::vector<std::size_t> parse_k_range(const std::string& text) {
  std::vector<std::size_t> ks;
  auto number = [&](const std::string& s) {
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != s.size() || v == 0 || s[0] == '-') throw ConfigError("k-range", "bad value '" + s + "'");
    return static_cast<std::size_t>(v);
  };
  if (const auto colon = text.find(':'); colon != std::string::npos) {
    const std::size_t lo = number(text.substr(0, colon)), hi = number(text.substr(colon + 1));
    if (lo > hi) throw ConfigError("k-range", "lower bound exceeds upper bound");
    for (std::size_t k = lo; k <= hi; k *= 2) ks.push_back(k);
  } else {
    std::size_t start = 0;
    while (start <= text.size()) {
      const auto comma = text.find(',', start);
      ks.push_back(number(text.substr(start, comma == std::string::npos ? std::string::npos : comma - start)));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
  }
  if (ks.empty()) throw ConfigError("k-range", "empty");
  return ks;
}

Result run(const Options& o) {
  if (o.samples < 3) throw ConfigError("samples", "need at least 3 timed repetitions");
  if (o.r == 0 || o.r > o.d) throw ConfigError("r", "must be in [1, d]");
  Result result;
  for (std::size_t k : o.ks) {
    if (o.r > k) throw ConfigError("r", "exceeds k = " + std::to_string(k));
    if (o.dense && k > kFullCovMaxDim) {
      throw ConfigError("k-range", "dense arm supports k <= " + std::to_string(kFullCovMaxDim));
    }
    Rng rng = Rng(o.seed).split(k);
    auto layer = init_layer(rng, o.d, k, o.r, 0.2, 1.0);
    layer.reconstruction.set_values(randn(rng, {k, o.r}).values());
    const auto x = randn(rng, {o.d});
    Rng draw = rng.split(1);

    // Low-rank draws are microseconds; time batches long enough for the clock.
    std::size_t batch = 1;
    for (;;) {
      const auto t0 = Clock::now();
      for (std::size_t i = 0; i < batch; ++i) (void)sample_lowrank(layer, x, 0.5, draw);
      if (Clock::now() - t0 >= std::chrono::microseconds(200) || batch >= (1u << 20)) break;
      batch *= 2;
    }
    std::vector<double> ns;
    for (std::size_t s = 0; s < o.samples; ++s) {
      const auto t0 = Clock::now();
      for (std::size_t i = 0; i < batch; ++i) (void)sample_lowrank(layer, x, 0.5, draw);
      ns.push_back(std::chrono::duration<double, std::nano>(Clock::now() - t0).count() / static_cast<double>(batch));
    }
    result.rows.push_back(summarise(k, o.r, "lowrank", ns));

    if (o.dense) {
      ns.clear();
      const auto start = Clock::now();
      for (std::size_t s = 0; s < o.samples; ++s) {
        const auto t0 = Clock::now();
        (void)sample_full_cov_oracle(layer, x, 0.5, draw);
        ns.push_back(std::chrono::duration<double, std::nano>(Clock::now() - t0).count());
        if (ns.size() >= 3 && std::chrono::duration<double>(Clock::now() - start).count() > o.dense_budget_s) break;
      }
      result.rows.push_back(summarise(k, o.r, "dense", ns));
    }
  }
  result.fits.push_back(fit(result.rows, "lowrank"));
  if (o.dense) result.fits.push_back(fit(result.rows, "dense"));
  return result;
}

void Result::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << "k,r,method,median_ns,p10_ns,p90_ns\n";
  out.precision(10);
  for (const auto& row : rows) {
    out << row.k << ',' << row.r << ',' << row.method << ',' << row.median_ns << ',' << row.p10_ns << ',' << row.p90_ns
        << '\n';
  }
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

nlohmann::json Result::to_json() const {
  nlohmann::json j = {{"rows", nlohmann::json::array()}, {"fits", nlohmann::json::array()}};
  for (const auto& row : rows) {
    j["rows"].push_back({{"k", row.k},
                         {"r", row.r},
                         {"method", row.method},
                         {"median_ns", row.median_ns},
                         {"p10_ns", row.p10_ns},
                         {"p90_ns", row.p90_ns}});
  }
  for (const auto& f : fits) j["fits"].push_back({{"method", f.method}, {"slope", f.slope}, {"intercept", f.intercept}});
  return j;
}

}  // namespace balora::bench
