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

// Attack-invariant terms and the two similarity scores.
//
// For layer n with anchor embeddings X_hat (K x d):
//   M_a = X_hat W_Q W_K^T X_hat^T
//   M_b = X_hat W_V W_O   X_hat^T
//   M_f = X_hat W_1 W_2   X_hat^T
// Every camouflage (invertible C_1/C_2 mixing, FFN and embedding-dimension
// permutations) cancels inside these products.
//
// Invariant tensor file ("HRIT"), little-endian:
//   0   magic "HRIT", u8 version, 3 zero bytes
//   8   u64 K
//   16  u64 C
//   24  u64 r, then r x u64 layer indices (ascending)
//   ..  32-byte anchor hash, 32-byte corpus hash
//   ..  C*K*K f32 values: channel-major, row-major within a channel;
//       channel 3*i + {0,1,2} = {M_a, M_b, M_f} of layer_span[i]

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hrfp/bytes.hpp"
#include "hrfp/checkpoint.hpp"
#include "hrfp/error.hpp"
#include "hrfp/numerics.hpp"
#include "hrfp/vocab_select.hpp"

namespace hrfp {

inline constexpr char kInvariantMagic[4] = {'H', 'R', 'I', 'T'};
inline constexpr uint8_t kInvariantVersion = 1;
inline constexpr size_t kDefaultInvariantLayers = 2;
inline constexpr size_t kTermsPerLayer = 3;

struct InvariantTerms {
  Matrix attention_qk;  // M_a
  Matrix attention_vo;  // M_b
  Matrix ffn;           // M_f
};

struct InvariantTensor {
  size_t k = 0;
  size_t channels = 0;
  std::vector<size_t> layer_span;
  Digest anchor_hash{};
  Digest corpus_hash{};
  std::vector<float> data;  // channels x k x k

  std::span<const float> channel(size_t c) const { return {data.data() + c * k * k, k * k}; }
  bool operator==(const InvariantTensor&) const = default;
};

inline InvariantTerms invariant_terms_for_layer(const ModelCheckpoint& ckpt, size_t layer, const Matrix& x_hat) {
  if (layer >= ckpt.arch.num_layers) {
    throw RangeError("layer " + std::to_string(layer) + " >= num_layers " + std::to_string(ckpt.arch.num_layers));
  }
  if (x_hat.cols() != ckpt.arch.model_dim) {
    throw DimensionError("X_hat has " + std::to_string(x_hat.cols()) + " columns, model_dim is " +
                         std::to_string(ckpt.arch.model_dim));
  }
  auto product = [&](const char* left, const char* right) {
    // (X W_l)(X W_r^T)^T keeps every intermediate at K x d or K x ffn.
    const Matrix xl = matmul(x_hat, ckpt.matrix(names::layer(layer, left)));
    const Matrix xr = matmul_bt(x_hat, ckpt.matrix(names::layer(layer, right)));
    return matmul_bt(xl, xr);
  };
  auto qk = [&] {
    const Matrix xq = matmul(x_hat, ckpt.matrix(names::layer(layer, "wq")));
    const Matrix xk = matmul(x_hat, ckpt.matrix(names::layer(layer, "wk")));
    return matmul_bt(xq, xk);
  };
  return {qk(), product("wv", "wo"), product("w1", "w2")};
}

// Terms of the last r layers, stacked into C = 3r channels.
inline InvariantTensor stack_invariants(const ModelCheckpoint& ckpt, const AnchorSet& anchors, size_t r,
                                        const Digest& corpus_hash = {}) {
  const size_t n = ckpt.arch.num_layers;
  if (r == 0 || r > n) throw RangeError("r = " + std::to_string(r) + " must lie in [1, " + std::to_string(n) + "]");
  const Matrix x_hat = build_x_hat(ckpt, anchors);
  InvariantTensor t;
  t.k = anchors.size();
  t.channels = kTermsPerLayer * r;
  t.anchor_hash = anchor_hash(anchors);
  t.corpus_hash = corpus_hash;
  t.data.reserve(t.channels * t.k * t.k);
  for (size_t layer = n - r; layer < n; ++layer) {
    t.layer_span.push_back(layer);
    const InvariantTerms terms = invariant_terms_for_layer(ckpt, layer, x_hat);
    for (const Matrix* m : {&terms.attention_qk, &terms.attention_vo, &terms.ffn}) {
      t.data.insert(t.data.end(), m->values().begin(), m->values().end());
    }
  }
  return t;
}

// The weight matrices and biases, flattened in name order. Norm gains are
// left out: they initialise to exactly 1 in every model, and in small models
// that shared constant dominates the cosine.
inline std::vector<float> pcs_parameters(const ModelCheckpoint& ckpt) {
  std::vector<float> flat;
  for (const auto& [name, t] : ckpt.tensors) {
    if (!name.ends_with(".g")) flat.insert(flat.end(), t.data.begin(), t.data.end());
  }
  return flat;
}

// 100 x cosine of the flattened weights and biases.
inline double pcs(const ModelCheckpoint& a, const ModelCheckpoint& b) {
  if (a.tensors.size() != b.tensors.size()) throw IncomparableError("checkpoints hold different tensor sets");
  for (auto ia = a.tensors.begin(), ib = b.tensors.begin(); ia != a.tensors.end(); ++ia, ++ib) {
    if (ia->first != ib->first || ia->second.shape != ib->second.shape) {
      throw IncomparableError("checkpoints differ at tensor " + ia->first);
    }
  }
  return 100.0 * cosine_similarity(pcs_parameters(a), pcs_parameters(b));
}

struct IcsResult {
  double percent = 0.0;
  std::vector<std::string> warnings;
};

// Different anchor sets or corpora are still comparable (different
// tokenizers are the common case), but worth flagging.
inline IcsResult ics_report(const InvariantTensor& a, const InvariantTensor& b) {
  if (a.k != b.k) throw IncomparableError("K differs: " + std::to_string(a.k) + " vs " + std::to_string(b.k));
  if (a.channels != b.channels || a.layer_span.size() != b.layer_span.size()) {
    throw IncomparableError("channel layout differs");
  }
  if (a.data.size() != b.data.size()) throw IncomparableError("tensor payloads differ in length");
  IcsResult out;
  out.percent = 100.0 * cosine_similarity(a.data, b.data);
  if (a.anchor_hash != b.anchor_hash) out.warnings.push_back("anchor sets differ");
  if (a.corpus_hash != b.corpus_hash) out.warnings.push_back("corpus hashes differ");
  return out;
}

inline double ics(const InvariantTensor& a, const InvariantTensor& b) { return ics_report(a, b).percent; }

inline std::vector<uint8_t> serialize_invariants(const InvariantTensor& t) {
  if (t.data.size() != t.channels * t.k * t.k || t.channels != kTermsPerLayer * t.layer_span.size()) {
    throw ValidationError("invariant tensor layout is inconsistent");
  }
  ByteWriter w;
  w.bytes({reinterpret_cast<const uint8_t*>(kInvariantMagic), 4});
  w.u8(kInvariantVersion);
  w.u8(0);
  w.u8(0);
  w.u8(0);
  w.u64(t.k);
  w.u64(t.channels);
  w.u64(t.layer_span.size());
  for (size_t layer : t.layer_span) w.u64(layer);
  w.bytes(t.anchor_hash);
  w.bytes(t.corpus_hash);
  w.f32s(t.data);
  return std::move(w.buffer());
}

inline InvariantTensor parse_invariants(std::span<const uint8_t> bytes) {
  ByteReader r(bytes);
  const auto magic = r.bytes(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), kInvariantMagic)) throw FormatError("bad magic: not an HRIT file");
  const uint8_t version = r.u8("version");
  if (version != kInvariantVersion) throw FormatError("unsupported HRIT version " + std::to_string(version));
  r.bytes(3, "reserved");
  InvariantTensor t;
  t.k = r.u64("K");
  t.channels = r.u64("C");
  const uint64_t layers = r.u64("r");
  if (layers > r.remaining() / 8) throw TruncatedError("layer span runs past end of data");
  for (uint64_t i = 0; i < layers; ++i) t.layer_span.push_back(r.u64("layer index"));
  if (t.channels != kTermsPerLayer * layers) throw ValidationError("C != 3r");
  const auto ah = r.bytes(32, "anchor hash");
  std::copy(ah.begin(), ah.end(), t.anchor_hash.begin());
  const auto ch = r.bytes(32, "corpus hash");
  std::copy(ch.begin(), ch.end(), t.corpus_hash.begin());
  if (t.k != 0 && t.channels > r.remaining() / 4 / t.k / t.k) throw TruncatedError("tensor blob shorter than C*K*K");
  t.data = r.f32s(t.channels * t.k * t.k, "tensor blob");
  if (r.remaining() != 0) throw FormatError("trailing bytes after tensor blob");
  if (!all_finite(t.data)) throw ValidationError("invariant tensor has non-finite values");
  return t;
}

inline InvariantTensor read_invariants(const std::filesystem::path& path) { return parse_invariants(read_file(path)); }

inline void write_invariants(const InvariantTensor& t, const std::filesystem::path& path) {
  write_file(path, serialize_invariants(t));
}

}  // namespace hrfp
