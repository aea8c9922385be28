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

#include <cstddef>
#include <span>
#include <vector>

#include "balora/tensor.hpp"

namespace balora {

/// Supervised examples. Regression sets fill `y` [N x out]; classification sets fill
/// `labels` and leave `y` empty.
struct Dataset {
  Tensor x;  ///< [N x d]
  Tensor y;
  std::vector<std::size_t> labels;

  std::size_t size() const { return x.size() == 0 ? 0 : x.rows(); }
  bool classification() const { return !labels.empty(); }
  Dataset subset(std::span<const std::size_t> rows) const;
};

}  // namespace balora
