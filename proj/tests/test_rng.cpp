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

#include <cmath>
#include <set>

#include "balora/rng.hpp"
#include "balora/tensor.hpp"

using namespace balora;

TEST_CASE("philox4x32-10 known-answer vectors") {
  // Published Random123 known-answer vectors.
  CHECK(philox4x32({0, 0, 0, 0}, {0, 0}) ==
        std::array<std::uint32_t, 4>{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u});
  CHECK(philox4x32({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu}, {0xffffffffu, 0xffffffffu}) ==
        std::array<std::uint32_t, 4>{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu});
  CHECK(philox4x32({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u}, {0xa4093822u, 0x299f31d0u}) ==
        std::array<std::uint32_t, 4>{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u});
}

TEST_CASE("same seed gives identical streams") {
  Rng a(1234), b(1234);
  for (int i = 0; i < 1000; ++i) REQUIRE(a.next_u64() == b.next_u64());
  Rng c(1234);
  Rng d(1235);
  int equal = 0;
  for (int i = 0; i < 1000; ++i) equal += c.next_u32() == d.next_u32();
  CHECK(equal < 5);
}

TEST_CASE("split streams are pure functions of the parent identity") {
  Rng parent(99);
  parent.next_u64();  // consuming the parent does not change its children
  Rng child_a = parent.split(7);
  Rng child_b = Rng(99).split(7);
  for (int i = 0; i < 100; ++i) REQUIRE(child_a.normal() == child_b.normal());

  std::set<std::uint64_t> firsts;
  for (std::uint64_t id = 0; id < 256; ++id) firsts.insert(Rng(99).split(id).next_u64());
  CHECK(firsts.size() == 256);
}

TEST_CASE("randn moments over 1e6 draws") {
  Rng rng(2024);
  const auto t = randn(rng, {1000000});
  double m = 0.0;
  for (double x : t.values()) m += x;
  m /= static_cast<double>(t.size());
  double v = 0.0;
  for (double x : t.values()) v += (x - m) * (x - m);
  v /= static_cast<double>(t.size());
  // 3 sigma of the sample mean is 0.003 and of the sample variance ~0.0042.
  CHECK(std::abs(m) < 0.005);
  CHECK(std::abs(v - 1.0) < 0.01);
}

TEST_CASE("randn determinism and degenerate shape") {
  Rng a(5), b(5);
  const auto x = randn(a, {3, 4});
  const auto y = randn(b, {3, 4});
  CHECK(std::equal(x.values().begin(), x.values().end(), y.values().begin()));
  Rng c(5);
  const auto empty = randn(c, {0});
  CHECK(empty.size() == 0);
  CHECK(empty.shape() == Shape{0});
}

TEST_CASE("uniform stays in the open unit interval and below() is in range") {
  Rng rng(3);
  for (int i = 0; i < 100000; ++i) {
    const double u = rng.uniform();
    REQUIRE(u > 0.0);
    REQUIRE(u < 1.0);
  }
  std::array<int, 7> counts{};
  for (int i = 0; i < 70000; ++i) ++counts[rng.below(7)];
  for (int c : counts) CHECK(std::abs(c - 10000) < 500);
}
