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

#include "balora/data.hpp"

#include "balora/errors.hpp"

namespace balora {

Dataset Dataset::subset(std::span<const std::size_t> rows) const {
  Dataset out;
  out.x = gather_rows(x, rows);
  if (y.size() > 0) out.y = gather_rows(y, rows);
  if (!labels.empty()) {
    out.labels.reserve(rows.size());
    for (std::size_t r : rows) {
      if (r >= labels.size()) throw ArgumentError("Dataset::subset: row out of range");
      out.labels.push_back(labels[r]);
    }
  }
  return out;
}

}  // namespace balora
