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

// On-disk layout (all integers and floats little-endian):
//
//   bytes 0..7     magic "BALORACK"
//   bytes 8..15    u64 length H of the JSON header
//   next H bytes   UTF-8 JSON header
//   payload        float64 arrays, concatenated in the order of header["arrays"]
//
// The header always carries "arrays" ([{name, shape}]), "payload_bytes" and
// "payload_fnv1a64" (hex). Readers reject bad magic, truncation, trailing bytes,
// shape/size disagreement, checksum mismatch and non-finite values with IoError.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "balora/alpha_net.hpp"
#include "balora/adapter.hpp"
#include "balora/network.hpp"

namespace balora {

struct ArrayRecord {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct CheckpointFile {
  nlohmann::json header = nlohmann::json::object();
  std::vector<ArrayRecord> arrays;

  const ArrayRecord& array(const std::string& name) const;
};

std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t size);

void write_checkpoint(const std::filesystem::path& path, const CheckpointFile& file);
CheckpointFile read_checkpoint(const std::filesystem::path& path);

/// Single adapted layer (+ optional AlphaNet). Header keys: d, k, r, lora_scale,
/// alpha_min, alpha_max, seed. Arrays: W0, WA, WB, then AlphaNet weight/bias pairs.
void save_layer(const std::filesystem::path& path, const BaLoRALayer& layer, const AlphaNet* alpha_net,
                const AlphaBounds& bounds, std::uint64_t seed);

struct LoadedLayer {
  BaLoRALayer layer;
  std::optional<AlphaNet> alpha_net;
  AlphaBounds bounds;
  std::uint64_t seed = 0;
};
LoadedLayer load_layer(const std::filesystem::path& path);

/// Whole network. `extra` is stored verbatim under header["extra"].
void save_network(const std::filesystem::path& path, const BaLoRANet& net, std::uint64_t seed,
                  const nlohmann::json& extra = nlohmann::json::object());

struct LoadedNetwork {
  BaLoRANet net;
  std::uint64_t seed = 0;
  nlohmann::json extra;
};
LoadedNetwork load_network(const std::filesystem::path& path);

}  // namespace balora
