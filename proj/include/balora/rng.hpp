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

#include <array>
#include <cstdint>

namespace balora {

/// Philox4x32-10 block function. Exposed for known-answer testing.
std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> counter,
                                        std::array<std::uint32_t, 2> key);

/// Counter-based random stream.
///
/// A stream is identified by (seed, stream id); the n-th 128-bit block is
/// philox(counter = {n, stream id}, key = seed). Streams for workers or MC draws
/// are derived with split() and never share mutable state, so results do not
/// depend on how draws are scheduled across threads.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0) : seed_(seed), stream_(stream) {}

  /// Independent child stream; split(i) is a pure function of (seed, stream, i).
  Rng split(std::uint64_t id) const;

  std::uint32_t next_u32();
  std::uint64_t next_u64();
  /// Uniform on the open interval (0, 1) with 53 random bits.
  double uniform();
  /// Standard normal via Box-Muller (both halves of the pair are used).
  double normal();
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }

 private:
  void refill();

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t block_ = 0;
  std::array<std::uint32_t, 4> buffer_{};
  int buffered_ = 0;
  double spare_normal_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace balora
