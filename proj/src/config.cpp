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

#include "balora/config.hpp"

#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "balora/errors.hpp"

namespace balora {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

bool valid_key(const std::string& k) {
  if (k.empty()) return false;
  for (char c : k)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.')) return false;
  return true;
}

template <typename T>
T parse_integer(const std::string& key, const std::string& text) {
  T out{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError(key, "expected a non-negative integer, got '" + text + "'");
  return out;
}

}  // namespace

KeyValueConfig KeyValueConfig::parse(const std::string& text, const std::string& source) {
  KeyValueConfig cfg;
  cfg.source_ = source;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = source + ":" + std::to_string(lineno);
    if (eq == std::string::npos) throw ConfigError("", where + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!valid_key(key)) throw ConfigError(key, where + ": invalid key");
    if (value.empty()) throw ConfigError(key, where + ": empty value");
    if (!cfg.values_.emplace(key, value).second) throw ConfigError(key, where + ": duplicate key");
  }
  return cfg;
}

KeyValueConfig KeyValueConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", "cannot read config file '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

void KeyValueConfig::set(const std::string& key, const std::string& value) {
  if (!valid_key(key)) throw ConfigError(key, "invalid key");
  values_[key] = value;
}

std::optional<std::string> KeyValueConfig::take(const std::string& key) {
  used_.insert(key);
  const auto it = values_.find(key);
  if (it == values_.end()) return std::nullopt;
  return it->second;
}

std::string KeyValueConfig::get_string(const std::string& key, const std::string& fallback) {
  return take(key).value_or(fallback);
}

double KeyValueConfig::get_double(const std::string& key, double fallback) {
  const auto v = take(key);
  if (!v) return fallback;
  double out = 0.0;
  const char* end = v->data() + v->size();
  auto [ptr, ec] = std::from_chars(v->data(), end, out);
  if (ec != std::errc() || ptr != end || !std::isfinite(out)) {
    throw ConfigError(key, "expected a finite number, got '" + *v + "'");
  }
  return out;
}

std::size_t KeyValueConfig::get_size(const std::string& key, std::size_t fallback) {
  const auto v = take(key);
  return v ? parse_integer<std::size_t>(key, *v) : fallback;
}

std::uint64_t KeyValueConfig::get_u64(const std::string& key, std::uint64_t fallback) {
  const auto v = take(key);
  return v ? parse_integer<std::uint64_t>(key, *v) : fallback;
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) {
  const auto v = take(key);
  if (!v) return fallback;
  if (*v == "true" || *v == "1") return true;
  if (*v == "false" || *v == "0") return false;
  throw ConfigError(key, "expected true or false, got '" + *v + "'");
}

std::vector<std::size_t> KeyValueConfig::get_sizes(const std::string& key, const std::vector<std::size_t>& fallback) {
  const auto v = take(key);
  if (!v) return fallback;
  std::vector<std::size_t> out;
  std::stringstream ss(*v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_integer<std::size_t>(key, trim(item)));
  if (out.empty()) throw ConfigError(key, "expected a comma-separated list");
  return out;
}

void KeyValueConfig::reject_unused() const {
  for (const auto& [k, v] : values_) {
    if (!used_.count(k)) throw ConfigError(k, source_ + ": unknown key '" + k + "'");
  }
}

}  // namespace balora
