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

// Anchor-token selection: count token frequencies over a reference corpus,
// drop every token that never occurs, keep the K rarest of the rest.
//
// Corpus file ("HRTC"), little-endian:
//   0  magic "HRTC"
//   4  u8 version, 3 zero bytes
//   8  u64 vocab_size
//   16 u64 token count n
//   24 n x u32 token ids

#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <span>
#include <vector>

#include "hrfp/bytes.hpp"
#include "hrfp/checkpoint.hpp"
#include "hrfp/error.hpp"
#include "hrfp/numerics.hpp"

namespace hrfp {

inline constexpr char kCorpusMagic[4] = {'H', 'R', 'T', 'C'};
inline constexpr uint8_t kCorpusVersion = 1;
inline constexpr size_t kDefaultAnchorCount = 4096;

struct TokenCorpus {
  size_t vocab_size = 0;
  std::vector<uint32_t> tokens;
};

struct CorpusStats {
  std::vector<uint64_t> counts;
  size_t vocab_size = 0;
  Digest corpus_id{};

  // Counts from another shard of the same corpus; order does not matter.
  void merge(const CorpusStats& other) {
    if (other.vocab_size != vocab_size) throw DimensionError("cannot merge stats over different vocabularies");
    for (size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
  }
};

struct AnchorSet {
  std::vector<uint32_t> token_ids;  // strictly ascending

  size_t size() const { return token_ids.size(); }
  bool operator==(const AnchorSet&) const = default;
};

inline Digest hash_tokens(std::span<const uint32_t> ids) {
  return sha256({reinterpret_cast<const uint8_t*>(ids.data()), ids.size() * 4});
}

inline Digest anchor_hash(const AnchorSet& anchors) { return hash_tokens(anchors.token_ids); }

inline CorpusStats count_frequencies(std::span<const uint32_t> stream, size_t vocab_size) {
  CorpusStats stats;
  stats.vocab_size = vocab_size;
  stats.counts.assign(vocab_size, 0);
  for (uint32_t id : stream) {
    if (id >= vocab_size) {
      throw RangeError("token id " + std::to_string(id) + " >= vocab_size " + std::to_string(vocab_size));
    }
    ++stats.counts[id];
  }
  stats.corpus_id = hash_tokens(stream);
  return stats;
}

inline CorpusStats count_frequencies(const TokenCorpus& corpus) {
  return count_frequencies(corpus.tokens, corpus.vocab_size);
}

// The k ids with the smallest positive counts, ties to the lower id, returned
// in ascending id order.
inline AnchorSet select_anchor_tokens(const CorpusStats& stats, size_t k) {
  std::vector<uint32_t> seen;
  for (size_t id = 0; id < stats.counts.size(); ++id) {
    if (stats.counts[id] > 0) seen.push_back(static_cast<uint32_t>(id));
  }
  if (seen.size() < k) {
    throw RangeError("only " + std::to_string(seen.size()) + " tokens occur in the corpus, need " + std::to_string(k));
  }
  auto rarer = [&](uint32_t a, uint32_t b) {
    return stats.counts[a] != stats.counts[b] ? stats.counts[a] < stats.counts[b] : a < b;
  };
  std::partial_sort(seen.begin(), seen.begin() + static_cast<std::ptrdiff_t>(k), seen.end(), rarer);
  AnchorSet out;
  out.token_ids.assign(seen.begin(), seen.begin() + static_cast<std::ptrdiff_t>(k));
  std::sort(out.token_ids.begin(), out.token_ids.end());
  return out;
}

// Embedding rows at the anchor ids: X_hat, K x d.
inline Matrix build_x_hat(const ModelCheckpoint& ckpt, const AnchorSet& anchors) {
  const TensorRecord& embed = ckpt.tensor(names::kEmbed);
  const size_t vocab = embed.shape.at(0), d = embed.shape.at(1);
  Matrix x(anchors.size(), d);
  for (size_t i = 0; i < anchors.size(); ++i) {
    const uint32_t id = anchors.token_ids[i];
    if (id >= vocab) throw RangeError("anchor id " + std::to_string(id) + " >= vocab_size " + std::to_string(vocab));
    std::copy_n(embed.data.begin() + static_cast<std::ptrdiff_t>(id * d), d, x.row(i).begin());
  }
  return x;
}

// Appends `extra` token ids: new rows of `embed.x` and, unless tied, new
// columns of `softmax.e`, drawn N(0, std^2). Existing values are untouched.
inline ModelCheckpoint augment_vocabulary(const ModelCheckpoint& ckpt, size_t extra, Rng& rng, double std = 0.02) {
  const size_t d = ckpt.arch.model_dim, v = ckpt.arch.vocab_size, w = v + extra;
  ModelCheckpoint out = ckpt;
  out.arch.vocab_size = w;
  TensorRecord& embed = out.tensors.at(names::kEmbed);
  embed.shape = {w, d};
  for (size_t i = 0; i < extra * d; ++i) embed.data.push_back(static_cast<float>(std * rng.normal()));
  if (!ckpt.arch.tied_embeddings) {
    const TensorRecord& old = ckpt.tensors.at(names::kSoftmax);
    TensorRecord& e = out.tensors.at(names::kSoftmax);
    e.shape = {d, w};
    e.data.assign(d * w, 0.0f);
    for (size_t i = 0; i < d; ++i) {
      std::copy_n(old.data.begin() + static_cast<std::ptrdiff_t>(i * v), v, e.data.begin() + static_cast<std::ptrdiff_t>(i * w));
      for (size_t j = v; j < w; ++j) e.data[i * w + j] = static_cast<float>(std * rng.normal());
    }
  }
  validate(out);
  return out;
}

inline std::vector<uint8_t> serialize_corpus(const TokenCorpus& corpus) {
  for (uint32_t id : corpus.tokens) {
    if (id >= corpus.vocab_size) throw RangeError("corpus token " + std::to_string(id) + " >= vocab_size");
  }
  ByteWriter w;
  w.bytes({reinterpret_cast<const uint8_t*>(kCorpusMagic), 4});
  w.u8(kCorpusVersion);
  w.u8(0);
  w.u8(0);
  w.u8(0);
  w.u64(corpus.vocab_size);
  w.u64(corpus.tokens.size());
  for (uint32_t id : corpus.tokens) w.u32(id);
  return std::move(w.buffer());
}

inline TokenCorpus parse_corpus(std::span<const uint8_t> bytes) {
  ByteReader r(bytes);
  const auto magic = r.bytes(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), kCorpusMagic)) throw FormatError("bad magic: not an HRTC corpus");
  const uint8_t version = r.u8("version");
  if (version != kCorpusVersion) throw FormatError("unsupported HRTC version " + std::to_string(version));
  r.bytes(3, "reserved");
  TokenCorpus corpus;
  corpus.vocab_size = r.u64("vocab_size");
  const uint64_t n = r.u64("token count");
  if (n > r.remaining() / 4) throw TruncatedError("token stream shorter than declared count");
  corpus.tokens.resize(n);
  for (auto& id : corpus.tokens) {
    id = r.u32("token");
    if (id >= corpus.vocab_size) throw RangeError("corpus token " + std::to_string(id) + " >= vocab_size");
  }
  return corpus;
}

inline TokenCorpus read_corpus(const std::filesystem::path& path) { return parse_corpus(read_file(path)); }

inline void write_corpus(const TokenCorpus& corpus, const std::filesystem::path& path) {
  write_file(path, serialize_corpus(corpus));
}

}  // namespace hrfp
