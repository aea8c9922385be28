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

#include <stdexcept>
#include <string>

namespace balora {

/// Operand shapes do not satisfy an operation's contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A value left the finite/admissible domain (NaN, Inf, sqrt of a negative, ...).
class NumericError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Misuse of the gradient tape (non-scalar loss, double backward, ...).
class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A precondition on a scalar argument was violated (rank too large, alpha <= 0, ...).
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed or unknown configuration key/value. Carries the offending key.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& what)
      : std::runtime_error(what), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

/// Unreadable, truncated or corrupt on-disk artifact.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A runtime self-check failed (e.g. merged weights disagree with the adapter forward).
class VerificationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace balora
