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

// Oracle suite behind `balora verify` and the acceptance binary. Every check compares
// the library against an independent reference and reports the measured error next to
// the tolerance it is held to.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

namespace balora::verify {

struct CheckResult {
  std::string group;  ///< kl, covariance, gradient, merge, subspace, metrics
  std::string name;
  bool passed = false;
  double measured = 0.0;
  double tolerance = 0.0;
  std::string detail;
  double seconds = 0.0;
  nlohmann::json extra = nlohmann::json::object();  ///< check-specific statistics
};

/// Replacement implementations used by mutation smoke tests.
struct Hooks {
  std::function<double(double alpha, double p)> kl_per_entry;
};

struct Options {
  /// Runs checks whose group equals the filter or whose name contains it; empty runs all.
  std::string filter;
  std::size_t configs = 50;
  std::size_t draws = 100000;
  std::size_t merge_layers = 100;
  /// Family-wise false-alarm rate for the Monte Carlo moment checks; the per-entry
  /// threshold is Bonferroni-corrected over every entry compared.
  double family_alpha = 0.01;
  std::uint64_t seed = 1;
  Hooks hooks;
};

const std::vector<std::string>& groups();
std::vector<CheckResult> run(const Options& options);
/// Returns the single check `name`; throws ArgumentError when unknown.
CheckResult run_one(const std::string& name, const Options& options);
std::vector<std::string> check_names();

nlohmann::json to_json(const CheckResult& r);
nlohmann::json summary_json(const std::vector<CheckResult>& results);

}  // namespace balora::verify
