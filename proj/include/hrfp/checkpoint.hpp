/* Copyright 2026 The hrfp Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

// Model container ("HRFC").
//
// Layout, all integers little-endian:
//
//   0   magic "HRFC"
//   4   u8 format version (kCheckpointVersion)
//   5   3 zero bytes
//   8   u64 header length H
//   16  H bytes of compact JSON: {arch, metadata, rng, tensors:[{name, shape,
//       offset, count}]}, tensors sorted by name, object keys sorted
//   ..  zero padding to a 64-byte boundary (start of the blob section)
//   ..  one blob per tensor at blob-section offset `offset`: `count` f32
//       values, row-major, packed back to back in index order
//
// The file is therefore exactly (blob-section start) + 4 * (value count)
// bytes. Readers accept any in-bounds, non-overlapping, 4-byte aligned
// offsets, so writers that pad each blob remain readable.
//
// Identical checkpoints serialize to identical bytes.

#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "hrfp/bytes.hpp"
#include "hrfp/error.hpp"
#include "hrfp/numerics.hpp"

namespace hrfp {

inline constexpr char kCheckpointMagic[4] = {'H', 'R', 'F', 'C'};
inline constexpr uint8_t kCheckpointVersion = 1;
inline constexpr size_t kBlobAlignment = 64;

enum class NormKind { kRmsNorm, kLayerNorm };
enum class Activation { kGelu, kRelu, kSilu };
enum class PositionalKind { kNone, kLearnedAbsolute };

NLOHMANN_JSON_SERIALIZE_ENUM(NormKind, {{NormKind::kRmsNorm, "rmsnorm"}, {NormKind::kLayerNorm, "layernorm"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Activation,
                             {{Activation::kGelu, "gelu"}, {Activation::kRelu, "relu"}, {Activation::kSilu, "silu"}})
NLOHMANN_JSON_SERIALIZE_ENUM(PositionalKind,
                             {{PositionalKind::kNone, "none"}, {PositionalKind::kLearnedAbsolute, "learned_absolute"}})

struct ArchitectureDescriptor {
  size_t num_layers = 1;
  size_t model_dim = 8;
  size_t ffn_dim = 32;
  size_t vocab_size = 32;
  size_t num_heads = 1;
  NormKind norm = NormKind::kRmsNorm;
  Activation activation = Activation::kGelu;
  bool tied_embeddings = false;
  PositionalKind positional = PositionalKind::kNone;
  // Rows of `embed.pos`; only meaningful with learned absolute positions.
  size_t max_positions = 0;

  size_t head_dim() const { return model_dim / num_heads; }
  bool operator==(const ArchitectureDescriptor&) const = default;

  void validate() const {
    if (num_layers == 0 || model_dim == 0 || ffn_dim == 0 || vocab_size == 0 || num_heads == 0) {
      throw ValidationError("architecture counts must all be >= 1");
    }
    if (model_dim % num_heads != 0) {
      throw ValidationError("model_dim " + std::to_string(model_dim) + " not divisible by num_heads " +
                            std::to_string(num_heads));
    }
    if (positional == PositionalKind::kLearnedAbsolute && max_positions == 0) {
      throw ValidationError("learned_absolute positions need max_positions >= 1");
    }
  }
};

inline void to_json(nlohmann::json& j, const ArchitectureDescriptor& a) {
  j = nlohmann::json{{"num_layers", a.num_layers},           {"model_dim", a.model_dim},
                     {"ffn_dim", a.ffn_dim},                 {"vocab_size", a.vocab_size},
                     {"num_heads", a.num_heads},             {"norm_kind", a.norm},
                     {"activation", a.activation},           {"tied_embeddings", a.tied_embeddings},
                     {"positional_kind", a.positional},      {"max_positions", a.max_positions}};
}

inline void from_json(const nlohmann::json& j, ArchitectureDescriptor& a) {
  j.at("num_layers").get_to(a.num_layers);
  j.at("model_dim").get_to(a.model_dim);
  j.at("ffn_dim").get_to(a.ffn_dim);
  j.at("vocab_size").get_to(a.vocab_size);
  j.at("num_heads").get_to(a.num_heads);
  j.at("norm_kind").get_to(a.norm);
  j.at("activation").get_to(a.activation);
  j.at("tied_embeddings").get_to(a.tied_embeddings);
  j.at("positional_kind").get_to(a.positional);
  a.max_positions = j.value("max_positions", size_t{0});
}

inline Digest arch_hash(const ArchitectureDescriptor& a) {
  const std::string s = nlohmann::json(a).dump();
  return sha256({reinterpret_cast<const uint8_t*>(s.data()), s.size()});
}

struct TensorRecord {
  std::vector<size_t> shape;
  std::vector<float> data;

  size_t count() const {
    return std::accumulate(shape.begin(), shape.end(), size_t{1}, std::multiplies<>());
  }
  bool operator==(const TensorRecord&) const = default;
};

namespace names {
inline std::string layer(size_t i, std::string_view leaf) { return "layer." + std::to_string(i) + "." + std::string(leaf); }
inline constexpr const char* kEmbed = "embed.x";
inline constexpr const char* kSoftmax = "softmax.e";
inline constexpr const char* kPositions = "embed.pos";
}  // namespace names

// Every tensor an architecture implies, with its shape.
inline std::map<std::string, std::vector<size_t>> expected_tensors(const ArchitectureDescriptor& a) {
  const size_t d = a.model_dim, f = a.ffn_dim;
  std::map<std::string, std::vector<size_t>> out;
  for (size_t i = 0; i < a.num_layers; ++i) {
    for (const char* w : {"wq", "wk", "wv", "wo"}) out[names::layer(i, w)] = {d, d};
    out[names::layer(i, "w1")] = {d, f};
    out[names::layer(i, "b1")] = {f};
    out[names::layer(i, "w2")] = {f, d};
    out[names::layer(i, "b2")] = {d};
    for (const char* n : {"norm1.g", "norm1.b", "norm2.g", "norm2.b"}) out[names::layer(i, n)] = {d};
  }
  out[names::kEmbed] = {a.vocab_size, d};
  if (!a.tied_embeddings) out[names::kSoftmax] = {d, a.vocab_size};
  if (a.positional == PositionalKind::kLearnedAbsolute) out[names::kPositions] = {a.max_positions, d};
  return out;
}

struct ModelCheckpoint {
  ArchitectureDescriptor arch;
  // Ordered by name, which is the canonical order everywhere.
  std::map<std::string, TensorRecord> tensors;
  std::map<std::string, std::string> metadata;

  const TensorRecord& tensor(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ValidationError("missing tensor " + name);
    return it->second;
  }

  // 1-D tensors come back as a single row.
  Matrix matrix(const std::string& name) const {
    const TensorRecord& t = tensor(name);
    if (t.shape.size() == 1) return Matrix(1, t.shape[0], t.data);
    if (t.shape.size() == 2) return Matrix(t.shape[0], t.shape[1], t.data);
    throw DimensionError(name + " is not 1-D or 2-D");
  }

  void set_matrix(const std::string& name, const Matrix& m) {
    TensorRecord& t = tensors.at(name);
    if (m.size() != t.count()) throw DimensionError("replacement for " + name + " has wrong size");
    t.data = m.storage();
  }

  // Embedding-side softmax matrix E (d x v), honouring tied embeddings.
  Matrix softmax_matrix() const { return arch.tied_embeddings ? transpose(matrix(names::kEmbed)) : matrix(names::kSoftmax); }

  bool operator==(const ModelCheckpoint&) const = default;
};

inline void validate(const ModelCheckpoint& ckpt) {
  ckpt.arch.validate();
  if (ckpt.tensors.empty()) throw ValidationError("checkpoint has no tensors");
  const auto expected = expected_tensors(ckpt.arch);
  for (const auto& [name, shape] : expected) {
    auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end()) throw ValidationError("missing tensor " + name);
    if (it->second.shape != shape) throw ValidationError("tensor " + name + " has shape inconsistent with arch");
    if (it->second.data.size() != it->second.count()) throw ValidationError("tensor " + name + " data length != shape product");
    if (!all_finite(it->second.data)) throw ValidationError("tensor " + name + " has non-finite values");
  }
  for (const auto& [name, t] : ckpt.tensors) {
    if (!expected.contains(name)) throw ValidationError("unexpected tensor " + name);
  }
}

inline size_t aligned(size_t n) { return (n + kBlobAlignment - 1) / kBlobAlignment * kBlobAlignment; }

inline std::vector<uint8_t> serialize_checkpoint(const ModelCheckpoint& ckpt) {
  validate(ckpt);
  nlohmann::json index = nlohmann::json::array();
  size_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    index.push_back({{"name", name}, {"shape", t.shape}, {"offset", offset}, {"count", t.count()}});
    offset += t.count() * 4;
  }
  nlohmann::json header = {{"arch", ckpt.arch},
                           {"metadata", ckpt.metadata},
                           {"rng", std::string(Rng::kAlgorithm)},
                           {"tensors", std::move(index)}};
  const std::string text = header.dump();

  ByteWriter w;
  w.bytes({reinterpret_cast<const uint8_t*>(kCheckpointMagic), 4});
  w.u8(kCheckpointVersion);
  w.u8(0);
  w.u8(0);
  w.u8(0);
  w.u64(text.size());
  w.text(text);
  w.pad_to(kBlobAlignment);
  for (const auto& [name, t] : ckpt.tensors) w.f32s(t.data);
  return std::move(w.buffer());
}

inline ModelCheckpoint parse_checkpoint(std::span<const uint8_t> bytes) {
  ByteReader r(bytes);
  const auto magic = r.bytes(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), kCheckpointMagic)) throw FormatError("bad magic: not an HRFC checkpoint");
  const uint8_t version = r.u8("version");
  if (version != kCheckpointVersion) throw FormatError("unsupported HRFC version " + std::to_string(version));
  r.bytes(3, "reserved");
  const uint64_t header_len = r.u64("header length");
  const auto header_bytes = r.bytes(header_len, "header");
  const size_t blob_start = aligned(r.position());
  if (blob_start > bytes.size()) throw TruncatedError("header padding runs past end of file");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_bytes.begin(), header_bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed header: ") + e.what());
  }

  ModelCheckpoint ckpt;
  std::vector<std::pair<uint64_t, uint64_t>> extents;
  try {
    ckpt.arch = header.at("arch").get<ArchitectureDescriptor>();
    if (header.contains("metadata")) ckpt.metadata = header.at("metadata").get<std::map<std::string, std::string>>();
    const auto rng = header.value("rng", std::string(Rng::kAlgorithm));
    if (rng != Rng::kAlgorithm) throw FormatError("unknown rng identity " + rng);
    for (const auto& entry : header.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      TensorRecord t;
      t.shape = entry.at("shape").get<std::vector<size_t>>();
      const auto offset = entry.at("offset").get<uint64_t>();
      const auto count = entry.at("count").get<uint64_t>();
      if (count != t.count()) throw ValidationError("tensor " + name + " count disagrees with shape");
      if (offset % 4 != 0) throw FormatError("tensor " + name + " blob is not 4-byte aligned");
      if (offset > bytes.size() - blob_start) throw TruncatedError("tensor " + name + " offset past end of file");
      r.seek(blob_start + offset);
      t.data = r.f32s(count, name);
      if (!ckpt.tensors.emplace(name, std::move(t)).second) throw ValidationError("duplicate tensor name " + name);
      extents.emplace_back(offset, offset + 4 * count);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed header: ") + e.what());
  }
  std::sort(extents.begin(), extents.end());
  for (size_t i = 1; i < extents.size(); ++i) {
    if (extents[i].first < extents[i - 1].second) throw FormatError("tensor blobs overlap");
  }
  validate(ckpt);
  return ckpt;
}

inline ModelCheckpoint read_checkpoint(const std::filesystem::path& path) {
  return parse_checkpoint(read_file(path));
}

inline void write_checkpoint(const ModelCheckpoint& ckpt, const std::filesystem::path& path) {
  write_file(path, serialize_checkpoint(ckpt));
}

// All tensors concatenated in name order, each row-major.
inline std::vector<float> flatten_parameters(const ModelCheckpoint& ckpt) {
  size_t total = 0;
  for (const auto& [name, t] : ckpt.tensors) total += t.data.size();
  std::vector<float> flat;
  flat.reserve(total);
  for (const auto& [name, t] : ckpt.tensors) flat.insert(flat.end(), t.data.begin(), t.data.end());
  return flat;
}

}  // namespace hrfp
