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

// Minimal transformer forward pass: pre-norm residual blocks of multi-head
// causal self-attention and a two-layer feed-forward network, followed by
// P = softmax(H_N E). Used as the functional oracle for attack equivalence
// and as the toy-model factory.

#pragma once

#include <cmath>
#include <vector>

#include "hrfp/checkpoint.hpp"
#include "hrfp/error.hpp"
#include "hrfp/numerics.hpp"

namespace hrfp {

struct ProbeBatch {
  std::vector<std::vector<uint32_t>> sequences;
};

struct ForwardResult {
  Matrix logits;        // l x v
  Matrix distribution;  // l x v, rows sum to 1
};

namespace detail {

inline double activate(Activation kind, double x) {
  switch (kind) {
    case Activation::kGelu:
      return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
    case Activation::kRelu:
      return x > 0.0 ? x : 0.0;
    case Activation::kSilu:
      return x / (1.0 + std::exp(-x));
  }
  return x;
}

inline Matrix normalize_rows(const Matrix& h, NormKind kind, std::span<const float> gain, std::span<const float> bias) {
  constexpr double kEps = 1e-5;
  Matrix out(h.rows(), h.cols());
  const double n = static_cast<double>(h.cols());
  for (size_t i = 0; i < h.rows(); ++i) {
    const auto row = h.row(i);
    double mean = 0.0;
    if (kind == NormKind::kLayerNorm) {
      for (float x : row) mean += x;
      mean /= n;
    }
    double sq = 0.0;
    for (float x : row) sq += (x - mean) * (x - mean);
    const double inv = 1.0 / std::sqrt(sq / n + kEps);
    auto orow = out.row(i);
    for (size_t j = 0; j < row.size(); ++j) orow[j] = static_cast<float>((row[j] - mean) * inv * gain[j] + bias[j]);
  }
  return out;
}

// Row-wise softmax in 64-bit, in place.
inline void softmax_rows(Matrix& m) {
  for (size_t i = 0; i < m.rows(); ++i) {
    auto row = m.row(i);
    double hi = -INFINITY;
    for (float x : row) hi = std::max<double>(hi, x);
    double total = 0.0;
    std::vector<double> e(row.size());
    for (size_t j = 0; j < row.size(); ++j) total += e[j] = std::exp(row[j] - hi);
    for (size_t j = 0; j < row.size(); ++j) row[j] = static_cast<float>(e[j] / total);
  }
}

inline void add_in_place(Matrix& a, const Matrix& b) {
  auto av = a.values();
  const auto bv = b.values();
  for (size_t i = 0; i < av.size(); ++i) av[i] = static_cast<float>(static_cast<double>(av[i]) + bv[i]);
}

inline void add_row_bias(Matrix& a, std::span<const float> bias) {
  for (size_t i = 0; i < a.rows(); ++i) {
    auto row = a.row(i);
    for (size_t j = 0; j < row.size(); ++j) row[j] += bias[j];
  }
}

inline void require_finite(const Matrix& m, const char* stage) {
  if (!all_finite(m.values())) throw NumericError(std::string("non-finite values after ") + stage);
}

inline Matrix attention(const ModelCheckpoint& ckpt, size_t layer, const Matrix& h) {
  const auto& arch = ckpt.arch;
  const size_t l = h.rows(), dh = arch.head_dim();
  const Matrix q = matmul(h, ckpt.matrix(names::layer(layer, "wq")));
  const Matrix k = matmul(h, ckpt.matrix(names::layer(layer, "wk")));
  const Matrix v = matmul(h, ckpt.matrix(names::layer(layer, "wv")));
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Matrix heads(l, arch.model_dim);
  Matrix scores(l, l);
  for (size_t head = 0; head < arch.num_heads; ++head) {
    const size_t off = head * dh;
    for (size_t i = 0; i < l; ++i) {
      for (size_t j = 0; j < l; ++j) {
        if (j > i) {
          scores(i, j) = -INFINITY;
          continue;
        }
        double s = 0.0;
        for (size_t c = 0; c < dh; ++c) s += static_cast<double>(q(i, off + c)) * k(j, off + c);
        scores(i, j) = static_cast<float>(s * scale);
      }
    }
    softmax_rows(scores);
    for (size_t i = 0; i < l; ++i) {
      for (size_t c = 0; c < dh; ++c) {
        double s = 0.0;
        for (size_t j = 0; j <= i; ++j) s += static_cast<double>(scores(i, j)) * v(j, off + c);
        heads(i, off + c) = static_cast<float>(s);
      }
    }
  }
  return matmul(heads, ckpt.matrix(names::layer(layer, "wo")));
}

inline Matrix feed_forward(const ModelCheckpoint& ckpt, size_t layer, const Matrix& h) {
  Matrix inner = matmul(h, ckpt.matrix(names::layer(layer, "w1")));
  add_row_bias(inner, ckpt.tensor(names::layer(layer, "b1")).data);
  for (float& x : inner.values()) x = static_cast<float>(activate(ckpt.arch.activation, x));
  Matrix out = matmul(inner, ckpt.matrix(names::layer(layer, "w2")));
  add_row_bias(out, ckpt.tensor(names::layer(layer, "b2")).data);
  return out;
}

}  // namespace detail

// Logits and output distribution for one token sequence.
inline ForwardResult forward(const ModelCheckpoint& ckpt, std::span<const uint32_t> tokens) {
  const auto& arch = ckpt.arch;
  if (tokens.empty()) throw RangeError("probe sequence must have length >= 1");
  const auto& embed = ckpt.tensor(names::kEmbed).data;
  const size_t d = arch.model_dim;
  Matrix h(tokens.size(), d);
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] >= arch.vocab_size) {
      throw RangeError("token id " + std::to_string(tokens[i]) + " >= vocab_size " + std::to_string(arch.vocab_size));
    }
    std::copy_n(embed.begin() + tokens[i] * d, d, h.row(i).begin());
  }
  if (arch.positional == PositionalKind::kLearnedAbsolute) {
    if (tokens.size() > arch.max_positions) throw RangeError("probe longer than max_positions");
    const auto& pos = ckpt.tensor(names::kPositions).data;
    for (size_t i = 0; i < tokens.size(); ++i) {
      auto row = h.row(i);
      for (size_t j = 0; j < d; ++j) row[j] += pos[i * d + j];
    }
  }

  for (size_t n = 0; n < arch.num_layers; ++n) {
    const Matrix a_in = detail::normalize_rows(h, arch.norm, ckpt.tensor(names::layer(n, "norm1.g")).data,
                                               ckpt.tensor(names::layer(n, "norm1.b")).data);
    detail::add_in_place(h, detail::attention(ckpt, n, a_in));
    const Matrix f_in = detail::normalize_rows(h, arch.norm, ckpt.tensor(names::layer(n, "norm2.g")).data,
                                               ckpt.tensor(names::layer(n, "norm2.b")).data);
    detail::add_in_place(h, detail::feed_forward(ckpt, n, f_in));
    detail::require_finite(h, "transformer layer");
  }

  ForwardResult out;
  out.logits = matmul(h, ckpt.softmax_matrix());
  detail::require_finite(out.logits, "output projection");
  out.distribution = out.logits;
  detail::softmax_rows(out.distribution);
  return out;
}

// Weights ~ N(0, 0.02^2), norm gains 1, every bias 0.
inline ModelCheckpoint generate_random_model(const ArchitectureDescriptor& arch, Rng& rng) {
  arch.validate();
  constexpr double kInitStd = 0.02;
  ModelCheckpoint ckpt;
  ckpt.arch = arch;
  for (const auto& [name, shape] : expected_tensors(arch)) {
    TensorRecord t;
    t.shape = shape;
    t.data.assign(t.count(), 0.0f);
    const bool is_gain = name.ends_with(".g");
    const bool is_bias = name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2");
    if (is_gain) {
      std::fill(t.data.begin(), t.data.end(), 1.0f);
    } else if (!is_bias) {
      for (float& x : t.data) x = static_cast<float>(kInitStd * rng.normal());
    }
    ckpt.tensors.emplace(name, std::move(t));
  }
  ckpt.metadata["seed"] = std::to_string(rng.seed());
  ckpt.metadata["step"] = "0";
  return ckpt;
}

// Uniform random token sequences.
inline ProbeBatch random_probes(Rng& rng, size_t vocab_size, size_t count, size_t length) {
  ProbeBatch batch;
  for (size_t s = 0; s < count; ++s) {
    std::vector<uint32_t> seq(length);
    for (auto& id : seq) id = static_cast<uint32_t>(rng.below(vocab_size));
    batch.sequences.push_back(std::move(seq));
  }
  return batch;
}

}  // namespace hrfp
