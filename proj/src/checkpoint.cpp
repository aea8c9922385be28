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

#include "balora/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "balora/errors.hpp"

namespace balora {

namespace {

constexpr char kMagic[8] = {'B', 'A', 'L', 'O', 'R', 'A', 'C', 'K'};

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

ArrayRecord record(std::string name, const Tensor& t) {
  return {std::move(name), t.shape(), std::vector<double>(t.values().begin(), t.values().end())};
}

Tensor tensor_of(const ArrayRecord& r, bool requires_grad) {
  return Tensor::from_values(r.shape, r.values, requires_grad);
}

void require_shape(const ArrayRecord& r, const Shape& shape) {
  if (r.shape != shape) {
    throw IoError("checkpoint array '" + r.name + "' has shape " + shape_str(r.shape) + ", expected " +
                  shape_str(shape));
  }
}

template <class T>
T header_value(const nlohmann::json& h, const char* key) {
  if (!h.contains(key)) throw IoError(std::string("checkpoint header is missing '") + key + "'");
  try {
    return h.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint header field '") + key + "': " + e.what());
  }
}

}  // namespace

const ArrayRecord& CheckpointFile::array(const std::string& name) const {
  for (const auto& a : arrays)
    if (a.name == name) return a;
  throw IoError("checkpoint has no array '" + name + "'");
}

std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t size) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

void write_checkpoint(const std::filesystem::path& path, const CheckpointFile& file) {
  std::vector<std::uint8_t> payload;
  nlohmann::json header = file.header;
  header["arrays"] = nlohmann::json::array();
  for (const auto& a : file.arrays) {
    if (shape_size(a.shape) != a.values.size()) throw ShapeError("checkpoint array '" + a.name + "' shape mismatch");
    header["arrays"].push_back({{"name", a.name}, {"shape", a.shape}});
    for (double v : a.values) {
      if (!std::isfinite(v)) throw IoError("refusing to write non-finite value in array '" + a.name + "'");
      put_u64(payload, std::bit_cast<std::uint64_t>(v));
    }
  }
  header["payload_bytes"] = payload.size();
  header["payload_fnv1a64"] = hex64(fnv1a64(payload.data(), payload.size()));
  const std::string text = header.dump();

  std::vector<std::uint8_t> bytes(kMagic, kMagic + 8);
  put_u64(bytes, text.size());
  bytes.insert(bytes.end(), text.begin(), text.end());
  bytes.insert(bytes.end(), payload.begin(), payload.end());

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

CheckpointFile read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0) {
    throw IoError("'" + path.string() + "' is not a checkpoint (bad magic)");
  }
  const std::uint64_t header_len = get_u64(bytes.data() + 8);
  if (header_len > bytes.size() - 16) throw IoError("checkpoint header is truncated");

  CheckpointFile file;
  try {
    file.header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  const std::uint8_t* payload = bytes.data() + 16 + header_len;
  const std::size_t payload_size = bytes.size() - 16 - header_len;
  if (header_value<std::uint64_t>(file.header, "payload_bytes") != payload_size) {
    throw IoError("checkpoint payload size does not match its header (truncated or padded file)");
  }
  if (header_value<std::string>(file.header, "payload_fnv1a64") != hex64(fnv1a64(payload, payload_size))) {
    throw IoError("checkpoint payload checksum mismatch");
  }

  std::size_t offset = 0;
  for (const auto& entry : header_value<nlohmann::json>(file.header, "arrays")) {
    ArrayRecord r;
    r.name = header_value<std::string>(entry, "name");
    r.shape = header_value<Shape>(entry, "shape");
    const std::size_t n = shape_size(r.shape);
    if (offset + n * 8 > payload_size) throw IoError("checkpoint array '" + r.name + "' runs past the payload");
    r.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      r.values[i] = std::bit_cast<double>(get_u64(payload + offset + 8 * i));
      if (!std::isfinite(r.values[i])) throw IoError("checkpoint array '" + r.name + "' holds a non-finite value");
    }
    offset += n * 8;
    file.arrays.push_back(std::move(r));
  }
  if (offset != payload_size) throw IoError("checkpoint payload has trailing bytes");
  file.header.erase("arrays");
  file.header.erase("payload_bytes");
  file.header.erase("payload_fnv1a64");
  return file;
}

// ---------------------------------------------------------------------------
// Layer checkpoints

namespace {

void append_alpha_net(CheckpointFile& file, nlohmann::json& meta, const AlphaNet& net) {
  meta = {{"feature_dim", net.feature_dim()}, {"hidden", net.hidden_dims()}, {"num_layers", net.num_layers()}};
  const auto params = net.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    file.arrays.push_back(record("alpha." + std::to_string(i / 2) + (i % 2 ? ".bias" : ".weight"), params[i]));
  }
}

AlphaNet read_alpha_net(const CheckpointFile& file, const nlohmann::json& meta, const AlphaBounds& bounds) {
  auto net = AlphaNet::zeros(header_value<std::size_t>(meta, "feature_dim"),
                             header_value<std::vector<std::size_t>>(meta, "hidden"),
                             header_value<std::size_t>(meta, "num_layers"), bounds);
  auto params = net.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& r = file.array("alpha." + std::to_string(i / 2) + (i % 2 ? ".bias" : ".weight"));
    require_shape(r, params[i].shape());
    params[i].set_values(r.values);
  }
  return net;
}

nlohmann::json layer_meta(const BaLoRALayer& layer, const AlphaBounds& bounds, std::uint64_t seed) {
  return {{"d", layer.in_dim()},           {"k", layer.out_dim()},        {"r", layer.rank},
          {"lora_scale", layer.lora_scale}, {"alpha_min", bounds.min},     {"alpha_max", bounds.max},
          {"seed", seed}};
}

}  // namespace

void save_layer(const std::filesystem::path& path, const BaLoRALayer& layer, const AlphaNet* alpha_net,
                const AlphaBounds& bounds, std::uint64_t seed) {
  CheckpointFile file;
  file.header = layer_meta(layer, bounds, seed);
  file.header["format"] = "balora-layer";
  file.arrays.push_back(record("W0", layer.base));
  file.arrays.push_back(record("WA", layer.reduction));
  file.arrays.push_back(record("WB", layer.reconstruction));
  nlohmann::json meta = nullptr;
  if (alpha_net != nullptr) append_alpha_net(file, meta, *alpha_net);
  file.header["alpha_net"] = meta;
  write_checkpoint(path, file);
}

LoadedLayer load_layer(const std::filesystem::path& path) {
  const auto file = read_checkpoint(path);
  const auto& h = file.header;
  if (header_value<std::string>(h, "format") != "balora-layer") throw IoError("not a layer checkpoint");
  const auto d = header_value<std::size_t>(h, "d");
  const auto k = header_value<std::size_t>(h, "k");
  const auto r = header_value<std::size_t>(h, "r");
  LoadedLayer out;
  out.bounds = {header_value<double>(h, "alpha_min"), header_value<double>(h, "alpha_max")};
  out.seed = header_value<std::uint64_t>(h, "seed");
  require_shape(file.array("W0"), {k, d});
  require_shape(file.array("WA"), {r, d});
  require_shape(file.array("WB"), {k, r});
  out.layer.base = tensor_of(file.array("W0"), false);
  out.layer.reduction = tensor_of(file.array("WA"), true);
  out.layer.reconstruction = tensor_of(file.array("WB"), true);
  out.layer.rank = r;
  out.layer.lora_scale = header_value<double>(h, "lora_scale");
  if (!h.at("alpha_net").is_null()) out.alpha_net = read_alpha_net(file, h.at("alpha_net"), out.bounds);
  return out;
}

// ---------------------------------------------------------------------------
// Network checkpoints

void save_network(const std::filesystem::path& path, const BaLoRANet& net, std::uint64_t seed,
                  const nlohmann::json& extra) {
  CheckpointFile file;
  auto& h = file.header;
  h["format"] = "balora-net";
  h["seed"] = seed;
  h["kind"] = to_string(net.kind);
  h["likelihood"] = to_string(net.likelihood);
  h["alpha_min"] = net.bounds.min;
  h["alpha_max"] = net.bounds.max;
  h["fixed_alpha"] = net.fixed_alpha;
  h["log_sigma_obs_trainable"] = net.log_sigma_obs.requires_grad();
  h["layers"] = nlohmann::json::array();
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const auto& layer = net.layers[l];
    const std::string prefix = "layer" + std::to_string(l);
    nlohmann::json meta = {{"d", layer.weight.cols()},
                           {"k", layer.weight.rows()},
                           {"adapted", layer.adapter.has_value()},
                           {"weight_trainable", layer.weight.requires_grad()},
                           {"bias_trainable", layer.bias.requires_grad()}};
    file.arrays.push_back(record(prefix + ".W0", layer.weight));
    file.arrays.push_back(record(prefix + ".bias", layer.bias));
    if (layer.adapter) {
      meta.update(layer_meta(*layer.adapter, net.bounds, seed));
      file.arrays.push_back(record(prefix + ".WA", layer.adapter->reduction));
      file.arrays.push_back(record(prefix + ".WB", layer.adapter->reconstruction));
    }
    h["layers"].push_back(meta);
  }
  file.arrays.push_back(record("log_sigma_obs", net.log_sigma_obs));
  nlohmann::json meta = nullptr;
  if (net.alpha_net) append_alpha_net(file, meta, *net.alpha_net);
  h["alpha_net"] = meta;
  h["extra"] = extra;
  write_checkpoint(path, file);
}

LoadedNetwork load_network(const std::filesystem::path& path) {
  const auto file = read_checkpoint(path);
  const auto& h = file.header;
  if (header_value<std::string>(h, "format") != "balora-net") throw IoError("not a network checkpoint");
  LoadedNetwork out;
  auto& net = out.net;
  try {
    net.kind = adapter_kind_from_string(header_value<std::string>(h, "kind"));
    net.likelihood = likelihood_from_string(header_value<std::string>(h, "likelihood"));
  } catch (const ArgumentError& e) {
    throw IoError(e.what());
  }
  net.bounds = {header_value<double>(h, "alpha_min"), header_value<double>(h, "alpha_max")};
  net.fixed_alpha = header_value<std::vector<double>>(h, "fixed_alpha");
  out.seed = header_value<std::uint64_t>(h, "seed");
  const auto layers = header_value<nlohmann::json>(h, "layers");
  if (!layers.is_array() || layers.empty()) throw IoError("checkpoint has no layers");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& meta = layers[l];
    const std::string prefix = "layer" + std::to_string(l);
    const auto d = header_value<std::size_t>(meta, "d");
    const auto k = header_value<std::size_t>(meta, "k");
    require_shape(file.array(prefix + ".W0"), {k, d});
    require_shape(file.array(prefix + ".bias"), {k});
    DenseLayer layer{tensor_of(file.array(prefix + ".W0"), header_value<bool>(meta, "weight_trainable")),
                     tensor_of(file.array(prefix + ".bias"), header_value<bool>(meta, "bias_trainable")),
                     std::nullopt};
    if (header_value<bool>(meta, "adapted")) {
      const auto r = header_value<std::size_t>(meta, "r");
      require_shape(file.array(prefix + ".WA"), {r, d});
      require_shape(file.array(prefix + ".WB"), {k, r});
      BaLoRALayer a;
      a.base = layer.weight;
      a.reduction = tensor_of(file.array(prefix + ".WA"), true);
      a.reconstruction = tensor_of(file.array(prefix + ".WB"), true);
      a.rank = r;
      a.lora_scale = header_value<double>(meta, "lora_scale");
      layer.adapter = a;
    }
    net.layers.push_back(std::move(layer));
  }
  for (std::size_t l = 1; l < net.layers.size(); ++l) {
    if (net.layers[l].weight.cols() != net.layers[l - 1].weight.rows()) throw IoError("checkpoint layer widths disagree");
  }
  require_shape(file.array("log_sigma_obs"), {});
  net.log_sigma_obs = tensor_of(file.array("log_sigma_obs"), header_value<bool>(h, "log_sigma_obs_trainable"));
  if (!h.at("alpha_net").is_null()) net.alpha_net = read_alpha_net(file, h.at("alpha_net"), net.bounds);
  out.extra = h.contains("extra") ? h.at("extra") : nlohmann::json::object();
  return out;
}

}  // namespace balora
