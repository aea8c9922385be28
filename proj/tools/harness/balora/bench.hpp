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

// Wall-clock comparison of the low-rank sampler with the dense-covariance oracle.
// Single threaded on purpose: timings are only comparable without contention.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace balora::bench {

struct Options {
  std::vector<std::size_t> ks = {64, 128, 256, 512, 1024, 2048};
  std::size_t r = 8;
  std::size_t d = 64;
  /// Timed repetitions per (k, method); the dense arm stops early once it has spent
  /// `dense_budget_s` seconds on one k (at least three repetitions are kept).
  std::size_t samples = 31;
  double dense_budget_s = 5.0;
  bool dense = true;
  std::uint64_t seed = 0;
};

struct Row {
  std::size_t k = 0;
  std::size_t r = 0;
  std::string method;  ///< lowrank or dense
  double median_ns = 0.0;
  double p10_ns = 0.0;
  double p90_ns = 0.0;
};

struct Fit {
  std::string method;
  double slope = 0.0;      ///< least-squares slope of log(median) on log(k)
  double intercept = 0.0;
};

struct Result {
  std::vector<Row> rows;
  std::vector<Fit> fits;

  /// Columns: k, r, method, median_ns, p10_ns, p90_ns.
  void write_csv(const std::filesystem::path& path) const;
  nlohmann::json to_json() const;
};

/// Parses "64:2048" (powers of two between the bounds) or a comma list.
std::vector<std::size_t> parse_k_range(const std::string& text);

Result run(const Options& options);

}  // namespace balora::bench
