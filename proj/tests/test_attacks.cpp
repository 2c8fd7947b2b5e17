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

#include <cmath>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "hrfp/attacks.hpp"
#include "hrfp/invariants.hpp"
#include "hrfp/vocab_select.hpp"
#include "test_util.hpp"

namespace hrfp {
namespace {

using testing::toy_arch;
using testing::toy_model;

AnchorSet spread_anchors(size_t k, size_t vocab) {
  AnchorSet a;
  for (size_t i = 0; i < k; ++i) a.token_ids.push_back(static_cast<uint32_t>(i * vocab / k));
  return a;
}

bool is_identity(const Matrix& m) { return m == Matrix::identity(m.rows()); }

ProbeBatch probes_for(const ModelCheckpoint& m, uint64_t seed) {
  Rng rng(seed);
  return random_probes(rng, m.arch.vocab_size, 4, 10);
}

TEST(SampleAttack, EmptyKindsIsIdentity) {
  const auto arch = toy_arch();
  const auto spec = sample_attack(arch, {}, 1);
  for (size_t n = 0; n < arch.num_layers; ++n) {
    EXPECT_TRUE(is_identity(spec.c1[n]));
    EXPECT_TRUE(is_identity(spec.c2[n]));
    EXPECT_TRUE(is_identity(spec.p_ffn[n]));
  }
  EXPECT_TRUE(is_identity(spec.p_e));
  const auto m = toy_model(1);
  EXPECT_EQ(apply_attack(m, spec), m);
}

TEST(SampleAttack, OnlyRequestedKindsArePopulated) {
  const auto arch = toy_arch();
  const auto spec = sample_attack(arch, {AttackKind::kPermuteEmbed}, 2);
  EXPECT_FALSE(is_identity(spec.p_e));
  EXPECT_FALSE(permutation_indices(spec.p_e).empty());
  for (size_t n = 0; n < arch.num_layers; ++n) {
    EXPECT_TRUE(is_identity(spec.c1[n]));
    EXPECT_TRUE(is_identity(spec.c2[n]));
    EXPECT_TRUE(is_identity(spec.p_ffn[n]));
  }
  EXPECT_EQ(sample_attack(arch, kAllAttackKinds, 3), sample_attack(arch, kAllAttackKinds, 3));
  EXPECT_NE(sample_attack(arch, kAllAttackKinds, 3), sample_attack(arch, kAllAttackKinds, 4));
}

TEST(SampleAttack, BlocksAreHeadDiagonalAndConditioned) {
  const auto arch = toy_arch(2, 16, 4, 32);
  const auto spec = sample_attack(arch, kAllAttackKinds, 5);
  for (const auto* cs : {&spec.c1, &spec.c2}) {
    for (const Matrix& c : *cs) {
      EXPECT_LE(condition_number(c), kAttackConditionMax * (1 + 1e-9));
      for (size_t i = 0; i < 16; ++i)
        for (size_t j = 0; j < 16; ++j)
          if (i / 4 != j / 4) ASSERT_EQ(c(i, j), 0.0f) << i << "," << j;
    }
  }
}

TEST(ApplyAttack, EachKindAloneIsFunctionPreserving) {
  for (NormKind norm : {NormKind::kRmsNorm, NormKind::kLayerNorm}) {
    auto arch = toy_arch(2, 16, 2, 64);
    arch.norm = norm;
    auto m = toy_model(6, arch);
    // Non-trivial norm parameters so a missed permutation would show.
    Rng rng(60);
    for (auto& [name, t] : m.tensors)
      if (name.find("norm") != std::string::npos)
        for (float& x : t.data) x += static_cast<float>(0.3 * rng.normal());
    for (AttackKind kind : kAllAttackKinds) {
      const auto attacked = apply_attack(m, sample_attack(arch, {kind}, 7));
      EXPECT_NE(attacked, m);
      const auto rep = verify_output_equivalence(m, attacked, probes_for(m, 8), 1e-4);
      EXPECT_TRUE(rep.pass) << nlohmann::json(kind) << " diff " << rep.max_abs_diff;
    }
  }
}

TEST(ApplyAttack, LearnedPositionsAndTiedEmbeddings) {
  auto arch = toy_arch(2, 16, 2, 64);
  arch.positional = PositionalKind::kLearnedAbsolute;
  arch.max_positions = 12;
  arch.tied_embeddings = true;
  const auto m = toy_model(9, arch);
  // Tied embeddings leave no separate E to absorb C_1/C_2, but those act
  // inside a layer; only P_E touches the embedding.
  const auto attacked = apply_attack(m, sample_attack(arch, kAllAttackKinds, 10));
  EXPECT_TRUE(verify_output_equivalence(m, attacked, probes_for(m, 11), 1e-4).pass);
}

TEST(ApplyAttack, FullCompositionBreaksPcsButNotIcs) {
  const auto arch = toy_arch(2, 32, 4, 128);
  const auto m = toy_model(12, arch);
  const auto attacked = apply_attack(m, sample_attack(arch, kAllAttackKinds, 13));
  EXPECT_LT(pcs(m, attacked), 50.0);
  const auto anchors = spread_anchors(32, 128);
  EXPECT_NEAR(ics(stack_invariants(m, anchors, 2), stack_invariants(attacked, anchors, 2)), 100.0, 0.01);
  EXPECT_TRUE(verify_output_equivalence(m, attacked, probes_for(m, 14), 1e-4).pass);
}

TEST(ApplyAttack, OriginalUntouchedAndDimensionChecked) {
  const auto m = toy_model(15);
  const auto copy = m;
  (void)apply_attack(m, sample_attack(m.arch, kAllAttackKinds, 16));
  EXPECT_EQ(m, copy);
  EXPECT_THROW(apply_attack(m, sample_attack(toy_arch(2, 8, 2, 64), kAllAttackKinds, 16)), DimensionError);
}

TEST(ApplyAttack, PermutationInverseIsBitExact) {
  const auto m = toy_model(17);
  const std::set<AttackKind> perms = {AttackKind::kPermuteFfn, AttackKind::kPermuteEmbed};
  const auto spec = sample_attack(m.arch, perms, 18);
  EXPECT_EQ(apply_attack(apply_attack(m, spec), inverse_attack(spec)), m);
}

TEST(ApplyAttack, FullInverseRestoresWithinRounding) {
  const auto m = toy_model(19);
  const auto spec = sample_attack(m.arch, kAllAttackKinds, 20);
  const auto back = apply_attack(apply_attack(m, spec), inverse_attack(spec));
  EXPECT_LT(max_abs_diff(flatten_parameters(back), flatten_parameters(m)), 1e-4);
}

TEST(ApplyAttack, CompositionClosure) {
  const auto arch = toy_arch(2, 16, 2, 64);
  const auto m = toy_model(21, arch);
  const auto twice =
      apply_attack(apply_attack(m, sample_attack(arch, kAllAttackKinds, 22)), sample_attack(arch, kAllAttackKinds, 23));
  EXPECT_TRUE(verify_output_equivalence(m, twice, probes_for(m, 24), 1e-4).pass);
  const auto anchors = spread_anchors(16, 64);
  EXPECT_NEAR(ics(stack_invariants(m, anchors, 2), stack_invariants(twice, anchors, 2)), 100.0, 0.01);
}

TEST(ApplyAttack, EmbeddingPermutationDrivesPcsDown) {
  const auto arch = toy_arch(2, 32, 2, 128);
  const auto m = toy_model(25, arch);
  int below = 0;
  for (uint64_t seed = 0; seed < 100; ++seed) {
    below += pcs(m, apply_attack(m, sample_attack(arch, {AttackKind::kPermuteEmbed}, seed))) < 50.0;
  }
  EXPECT_GE(below, 99);
}

TEST(VerifyOutputEquivalence, Examples) {
  const auto m = toy_model(26);
  const auto probes = probes_for(m, 27);
  const auto self = verify_output_equivalence(m, m, probes, 1e-4);
  EXPECT_TRUE(self.pass);
  EXPECT_EQ(self.max_abs_diff, 0.0);
  // Independent model: measure the gap with a separate forward pass.
  const auto other = toy_model(28);
  double gap = 0.0;
  for (const auto& seq : probes.sequences) {
    gap = std::max(gap, max_abs_diff(forward(m, seq).logits.values(), forward(other, seq).logits.values()));
  }
  const auto rep = verify_output_equivalence(m, other, probes, 1e-4);
  EXPECT_FALSE(rep.pass);
  EXPECT_EQ(rep.max_abs_diff, gap);
  EXPECT_GT(rep.max_abs_diff, 1e-3);
  EXPECT_THROW(verify_output_equivalence(m, toy_model(1, toy_arch(1)), probes, 1e-4), IncomparableError);
}

TEST(AttackJson, ReplaysSpec) {
  const auto arch = toy_arch();
  const auto spec = sample_attack(arch, {AttackKind::kLinearQK, AttackKind::kPermuteFfn}, 29);
  const auto j = attack_to_json(spec);
  EXPECT_EQ(attack_from_json(nlohmann::json::parse(j.dump()), arch), spec);
  EXPECT_THROW(attack_from_json(j, toy_arch(3)), ValidationError);
}

}  // namespace
}  // namespace hrfp
