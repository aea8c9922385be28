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
#include <functional>

namespace balora {

/// Worker count: hardware concurrency, capped by BALORA_THREADS when set.
/// Throws ConfigError if BALORA_THREADS is not a positive integer.
std::size_t worker_count();

/// Runs fn(i) for i in [0, n) on up to `workers` threads. Work items are claimed
/// dynamically; callers write results into per-item slots so the outcome does not
/// depend on scheduling. The first exception thrown by any item is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn, std::size_t workers = worker_count());

}  // namespace balora
