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

// Function-preserving weight camouflage.
//
// Combined substitution, per layer:
//   W_Q <- P_E^T W_Q C_1        W_K <- P_E^T W_K C_1^{-T}
//   W_V <- P_E^T W_V C_2        W_O <- C_2^{-1} W_O P_E
//   W_1 <- P_E^T W_1 P_FFN      b_1 <- b_1 P_FFN
//   W_2 <- P_FFN^T W_2 P_E      b_2 <- b_2 P_E
// and globally X <- X P_E, E <- P_E^T E. Norm gains/biases and learned
// position embeddings also pick up P_E, which exact equivalence requires
// once normalization layers are present.
//
// With more than one head, C_1 and C_2 are block diagonal with one block
// per head; a dense mix across heads would change the per-head softmax.

#pragma once

#include <algorithm>
#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hrfp/checkpoint.hpp"
#include "hrfp/error.hpp"
#include "hrfp/numerics.hpp"
#include "hrfp/reference_model.hpp"

namespace hrfp {

enum class AttackKind { kLinearQK, kLinearVO, kPermuteFfn, kPermuteEmbed };

NLOHMANN_JSON_SERIALIZE_ENUM(AttackKind, {{AttackKind::kLinearQK, "linear_qk"},
                                          {AttackKind::kLinearVO, "linear_vo"},
                                          {AttackKind::kPermuteFfn, "permute_ffn"},
                                          {AttackKind::kPermuteEmbed, "permute_embed"}})

inline const std::set<AttackKind> kAllAttackKinds = {AttackKind::kLinearQK, AttackKind::kLinearVO,
                                                     AttackKind::kPermuteFfn, AttackKind::kPermuteEmbed};

// Condition bound for sampled C_1 / C_2 blocks.
inline constexpr double kAttackConditionMax = 1e3;

struct AttackSpec {
  std::vector<Matrix> c1;  // per layer, d x d
  std::vector<Matrix> c2;  // per layer, d x d
  std::vector<Matrix> p_ffn;  // per layer, ffn x ffn permutation
  Matrix p_e;  // d x d permutation
  uint64_t seed = 0;
  std::set<AttackKind> kinds;
  Digest arch_hash{};

  bool operator==(const AttackSpec&) const = default;
};

namespace detail {

inline Matrix block_diagonal_invertible(Rng& rng, size_t d, size_t heads) {
  const size_t dh = d / heads;
  Matrix out(d, d);
  for (size_t h = 0; h < heads; ++h) {
    const Matrix block = sample_invertible(rng, dh, kAttackConditionMax);
    for (size_t i = 0; i < dh; ++i)
      for (size_t j = 0; j < dh; ++j) out(h * dh + i, h * dh + j) = block(i, j);
  }
  return out;
}

// Each (kind, layer) pair draws from its own substream, so a spec's
// components do not depend on which other kinds were requested.
inline uint64_t attack_stream(AttackKind kind, size_t layer) { return 1 + 4 * static_cast<uint64_t>(layer) + static_cast<uint64_t>(kind); }

}  // namespace detail

inline AttackSpec sample_attack(const ArchitectureDescriptor& arch, const std::set<AttackKind>& kinds, uint64_t seed) {
  arch.validate();
  AttackSpec spec;
  spec.seed = seed;
  spec.kinds = kinds;
  spec.arch_hash = arch_hash(arch);
  const Rng root(seed);
  const size_t d = arch.model_dim;
  for (size_t n = 0; n < arch.num_layers; ++n) {
    Rng r1 = root.split(detail::attack_stream(AttackKind::kLinearQK, n));
    Rng r2 = root.split(detail::attack_stream(AttackKind::kLinearVO, n));
    Rng rf = root.split(detail::attack_stream(AttackKind::kPermuteFfn, n));
    spec.c1.push_back(kinds.contains(AttackKind::kLinearQK) ? detail::block_diagonal_invertible(r1, d, arch.num_heads)
                                                            : Matrix::identity(d));
    spec.c2.push_back(kinds.contains(AttackKind::kLinearVO) ? detail::block_diagonal_invertible(r2, d, arch.num_heads)
                                                            : Matrix::identity(d));
    spec.p_ffn.push_back(kinds.contains(AttackKind::kPermuteFfn) ? sample_permutation(rf, arch.ffn_dim)
                                                                 : Matrix::identity(arch.ffn_dim));
  }
  Rng re = root.split(detail::attack_stream(AttackKind::kPermuteEmbed, 0) + 0x10000);
  spec.p_e = kinds.contains(AttackKind::kPermuteEmbed) ? sample_permutation(re, d) : Matrix::identity(d);
  return spec;
}

inline void check_spec(const ModelCheckpoint& ckpt, const AttackSpec& spec) {
  const auto& a = ckpt.arch;
  const size_t d = a.model_dim;
  bool ok = spec.c1.size() == a.num_layers && spec.c2.size() == a.num_layers && spec.p_ffn.size() == a.num_layers &&
            spec.p_e.rows() == d && spec.p_e.cols() == d;
  for (size_t n = 0; ok && n < a.num_layers; ++n) {
    ok = spec.c1[n].rows() == d && spec.c1[n].cols() == d && spec.c2[n].rows() == d && spec.c2[n].cols() == d &&
         spec.p_ffn[n].rows() == a.ffn_dim && spec.p_ffn[n].cols() == a.ffn_dim;
  }
  if (!ok) throw DimensionError("attack spec does not match checkpoint architecture");
}

inline ModelCheckpoint apply_attack(const ModelCheckpoint& ckpt, const AttackSpec& spec) {
  check_spec(ckpt, spec);
  const auto& arch = ckpt.arch;
  const bool qk = spec.kinds.contains(AttackKind::kLinearQK);
  const bool vo = spec.kinds.contains(AttackKind::kLinearVO);
  const bool ffn = spec.kinds.contains(AttackKind::kPermuteFfn);
  const bool emb = spec.kinds.contains(AttackKind::kPermuteEmbed);
  const Matrix pe_t = transpose(spec.p_e);

  ModelCheckpoint out = ckpt;
  auto update = [&](const std::string& name, auto&& fn) { out.set_matrix(name, fn(ckpt.matrix(name))); };
  auto left_pe = [&](const Matrix& m) { return emb ? matmul(pe_t, m) : m; };
  auto right_pe = [&](const Matrix& m) { return emb ? matmul(m, spec.p_e) : m; };

  for (size_t n = 0; n < arch.num_layers; ++n) {
    const Matrix& c1 = spec.c1[n];
    const Matrix& c2 = spec.c2[n];
    const Matrix& pf = spec.p_ffn[n];
    update(names::layer(n, "wq"), [&](const Matrix& w) { return qk ? matmul(left_pe(w), c1) : left_pe(w); });
    update(names::layer(n, "wk"),
           [&](const Matrix& w) { return qk ? matmul(left_pe(w), transpose(inverse(c1))) : left_pe(w); });
    update(names::layer(n, "wv"), [&](const Matrix& w) { return vo ? matmul(left_pe(w), c2) : left_pe(w); });
    update(names::layer(n, "wo"), [&](const Matrix& w) { return right_pe(vo ? matmul(inverse(c2), w) : w); });
    update(names::layer(n, "w1"), [&](const Matrix& w) { return ffn ? matmul(left_pe(w), pf) : left_pe(w); });
    update(names::layer(n, "b1"), [&](const Matrix& b) { return ffn ? matmul(b, pf) : b; });
    update(names::layer(n, "w2"), [&](const Matrix& w) { return right_pe(ffn ? matmul(transpose(pf), w) : w); });
    update(names::layer(n, "b2"), right_pe);
    for (const char* leaf : {"norm1.g", "norm1.b", "norm2.g", "norm2.b"}) update(names::layer(n, leaf), right_pe);
  }
  update(names::kEmbed, right_pe);
  if (!arch.tied_embeddings) update(names::kSoftmax, left_pe);
  if (arch.positional == PositionalKind::kLearnedAbsolute) update(names::kPositions, right_pe);
  return out;
}

// The spec that undoes `spec`: permutations transposed, C blocks inverted.
inline AttackSpec inverse_attack(const AttackSpec& spec) {
  AttackSpec inv = spec;
  for (auto& c : inv.c1) c = inverse(c);
  for (auto& c : inv.c2) c = inverse(c);
  for (auto& p : inv.p_ffn) p = transpose(p);
  inv.p_e = transpose(spec.p_e);
  return inv;
}

// Replayable description: the spec is regenerated from (arch, kinds, seed).
inline nlohmann::json attack_to_json(const AttackSpec& spec) {
  return {{"seed", spec.seed}, {"kinds", spec.kinds}, {"arch_hash", to_hex(spec.arch_hash)}};
}

inline AttackSpec attack_from_json(const nlohmann::json& j, const ArchitectureDescriptor& arch) {
  const auto kinds = j.at("kinds").get<std::set<AttackKind>>();
  AttackSpec spec = sample_attack(arch, kinds, j.at("seed").get<uint64_t>());
  if (to_hex(spec.arch_hash) != j.at("arch_hash").get<std::string>()) {
    throw ValidationError("attack spec was recorded for a different architecture");
  }
  return spec;
}

struct EquivalenceReport {
  double max_abs_diff = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

inline EquivalenceReport verify_output_equivalence(const ModelCheckpoint& a, const ModelCheckpoint& b,
                                                   const ProbeBatch& probes, double tol) {
  if (!(a.arch == b.arch)) throw IncomparableError("checkpoints have different architectures");
  EquivalenceReport report;
  report.tolerance = tol;
  for (const auto& seq : probes.sequences) {
    const auto fa = forward(a, seq);
    const auto fb = forward(b, seq);
    report.max_abs_diff = std::max(report.max_abs_diff, max_abs_diff(fa.logits.values(), fb.logits.values()));
  }
  report.pass = report.max_abs_diff <= tol;
  return report;
}

}  // namespace hrfp
