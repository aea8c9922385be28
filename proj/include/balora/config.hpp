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

// Flat `key = value` configuration files.
//
//   # comment
//   lr = 0.001
//   hidden = 32, 32
//
// Keys are [A-Za-z0-9_.]+, each may appear once, values run to end of line (trailing
// comments start with '#'). Typed getters mark keys as used; reject_unused() then
// names the first key nobody asked for.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace balora {

class KeyValueConfig {
 public:
  static KeyValueConfig parse(const std::string& text, const std::string& source = "<string>");
  static KeyValueConfig load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& entries() const { return values_; }
  const std::string& source() const { return source_; }

  /// Overrides or adds a value (e.g. from a command-line flag).
  void set(const std::string& key, const std::string& value);

  std::string get_string(const std::string& key, const std::string& fallback);
  double get_double(const std::string& key, double fallback);
  std::size_t get_size(const std::string& key, std::size_t fallback);
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback);
  bool get_bool(const std::string& key, bool fallback);
  std::vector<std::size_t> get_sizes(const std::string& key, const std::vector<std::size_t>& fallback);

  /// Throws ConfigError naming the first key that no getter consumed.
  void reject_unused() const;

 private:
  std::optional<std::string> take(const std::string& key);

  std::string source_;
  std::map<std::string, std::string> values_;
  std::set<std::string> used_;
};

}  // namespace balora
