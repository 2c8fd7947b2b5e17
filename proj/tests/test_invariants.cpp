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
#include <vector>

#include <gtest/gtest.h>

#include "hrfp/attacks.hpp"
#include "hrfp/invariants.hpp"
#include "hrfp/vocab_select.hpp"
#include "test_util.hpp"

namespace hrfp {
namespace {

using testing::as_double;
using testing::naive_matmul;
using testing::TempDir;
using testing::toy_arch;
using testing::toy_model;

AnchorSet first_ids(size_t k, uint32_t stride = 1) {
  AnchorSet a;
  for (uint32_t i = 0; i < k; ++i) a.token_ids.push_back(i * stride);
  return a;
}

double relative_frobenius(const Matrix& a, const Matrix& b) {
  double num = 0.0, den = 0.0;
  for (size_t i = 0; i < a.values().size(); ++i) {
    num += std::pow(static_cast<double>(a.values()[i]) - b.values()[i], 2);
    den += std::pow(static_cast<double>(a.values()[i]), 2);
  }
  return std::sqrt(num / den);
}

TEST(InvariantTerms, HandTwoByTwo) {
  auto ckpt = toy_model(1, toy_arch(1, 2, 1, 4));
  ckpt.set_matrix(names::layer(0, "wq"), Matrix(2, 2, {1, 2, 0, 1}));
  ckpt.set_matrix(names::layer(0, "wk"), Matrix::identity(2));
  const auto t = invariant_terms_for_layer(ckpt, 0, Matrix::identity(2));
  // I [[1,2],[0,1]] I^T I^T = [[1,2],[0,1]], row-major.
  EXPECT_EQ(std::vector<float>(t.attention_qk.values().begin(), t.attention_qk.values().end()),
            (std::vector<float>{1, 2, 0, 1}));
  // The transposed orientation X W_K W_Q^T X^T is exactly M_a^T.
  EXPECT_EQ(transpose(t.attention_qk).values()[1], 0.0f);
  EXPECT_EQ(transpose(t.attention_qk).values()[2], 2.0f);
}

TEST(InvariantTerms, IdentityAnchorsGiveWeightProducts) {
  const auto ckpt = toy_model(2, toy_arch(2, 8, 2, 16));
  const auto t = invariant_terms_for_layer(ckpt, 1, Matrix::identity(8));
  const auto wq = as_double(ckpt.matrix(names::layer(1, "wq")));
  const auto wk_t = as_double(transpose(ckpt.matrix(names::layer(1, "wk"))));
  const auto want = naive_matmul(wq, wk_t, 8, 8, 8);
  for (size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(t.attention_qk.values()[i], want[i], 1e-7);
  const auto wv = as_double(ckpt.matrix(names::layer(1, "wv")));
  const auto wo = as_double(ckpt.matrix(names::layer(1, "wo")));
  const auto want_b = naive_matmul(wv, wo, 8, 8, 8);
  for (size_t i = 0; i < want_b.size(); ++i) EXPECT_NEAR(t.attention_vo.values()[i], want_b[i], 1e-7);
  const auto w1 = as_double(ckpt.matrix(names::layer(1, "w1")));
  const auto w2 = as_double(ckpt.matrix(names::layer(1, "w2")));
  const auto want_f = naive_matmul(w1, w2, 8, 16, 8);
  for (size_t i = 0; i < want_f.size(); ++i) EXPECT_NEAR(t.ffn.values()[i], want_f[i], 1e-7);
}

TEST(InvariantTerms, GeneralAnchorsMatchNaiveProduct) {
  const auto ckpt = toy_model(3);
  const Matrix x = build_x_hat(ckpt, first_ids(10, 3));
  const auto t = invariant_terms_for_layer(ckpt, 0, x);
  const auto xd = as_double(x);
  const auto xt = as_double(transpose(x));
  const auto xw = naive_matmul(xd, as_double(ckpt.matrix(names::layer(0, "w1"))), 10, 16, 32);
  const auto xww = naive_matmul(xw, as_double(ckpt.matrix(names::layer(0, "w2"))), 10, 32, 16);
  const auto want = naive_matmul(xww, xt, 10, 16, 10);
  for (size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(t.ffn.values()[i], want[i], 1e-9);
}

TEST(InvariantTerms, Errors) {
  const auto ckpt = toy_model(4);
  EXPECT_THROW(invariant_terms_for_layer(ckpt, 2, Matrix::identity(16)), RangeError);
  EXPECT_THROW(invariant_terms_for_layer(ckpt, 0, Matrix::identity(8)), DimensionError);
}

TEST(InvariantTerms, SurviveEveryAttack) {
  const auto ckpt = toy_model(5, toy_arch(2, 16, 4, 64));
  const Matrix x = build_x_hat(ckpt, first_ids(12, 5));
  const auto spec = sample_attack(ckpt.arch, kAllAttackKinds, 77);
  const auto attacked = apply_attack(ckpt, spec);
  const Matrix xa = build_x_hat(attacked, first_ids(12, 5));
  for (size_t layer = 0; layer < 2; ++layer) {
    const auto a = invariant_terms_for_layer(ckpt, layer, x);
    const auto b = invariant_terms_for_layer(attacked, layer, xa);
    EXPECT_LT(relative_frobenius(a.attention_qk, b.attention_qk), 1e-4);
    EXPECT_LT(relative_frobenius(a.attention_vo, b.attention_vo), 1e-4);
    EXPECT_LT(relative_frobenius(a.ffn, b.ffn), 1e-4);
  }
}

TEST(StackInvariants, LayoutAndDeterminism) {
  const auto ckpt = toy_model(6, toy_arch(3, 16, 2, 64));
  const auto anchors = first_ids(8, 7);
  const auto t = stack_invariants(ckpt, anchors, 2);
  EXPECT_EQ(t.channels, 6u);  // r = 2 gives 6 channels
  EXPECT_EQ(t.layer_span, (std::vector<size_t>{1, 2}));
  EXPECT_EQ(t.data.size(), 6u * 64);
  const auto terms = invariant_terms_for_layer(ckpt, 2, build_x_hat(ckpt, anchors));
  EXPECT_TRUE(std::ranges::equal(t.channel(4), terms.attention_vo.values()));
  EXPECT_EQ(stack_invariants(ckpt, anchors, 2), t);
  EXPECT_EQ(stack_invariants(toy_model(6, toy_arch(1, 16, 2, 64)), anchors, 1).channels, 3u);
  EXPECT_THROW(stack_invariants(ckpt, anchors, 4), RangeError);
  EXPECT_THROW(stack_invariants(ckpt, anchors, 0), RangeError);
}

TEST(Ics, SelfSymmetryAndAttack) {
  const auto a = toy_model(7), b = toy_model(8);
  const auto anchors = first_ids(16, 4);
  const auto ta = stack_invariants(a, anchors, 2), tb = stack_invariants(b, anchors, 2);
  EXPECT_DOUBLE_EQ(ics(ta, ta), 100.0);
  EXPECT_DOUBLE_EQ(ics(ta, tb), ics(tb, ta));
  EXPECT_DOUBLE_EQ(pcs(a, b), pcs(b, a));
  const auto attacked = apply_attack(a, sample_attack(a.arch, kAllAttackKinds, 3));
  EXPECT_NEAR(ics(ta, stack_invariants(attacked, anchors, 2)), 100.0, 0.01);
}

TEST(Ics, IndependentModelsAreDissimilar) {
  const auto arch = toy_arch(2, 32, 2, 256);
  const auto anchors = first_ids(32, 8);
  for (uint64_t s = 0; s < 5; ++s) {
    const auto ta = stack_invariants(toy_model(100 + s, arch), anchors, 2);
    const auto tb = stack_invariants(toy_model(200 + s, arch), anchors, 2);
    EXPECT_LT(std::abs(ics(ta, tb)), 10.0) << s;
  }
}

TEST(Ics, Incomparable) {
  const auto a = toy_model(9);
  const auto t8 = stack_invariants(a, first_ids(8), 2);
  const auto t9 = stack_invariants(a, first_ids(9), 2);
  EXPECT_THROW(ics(t8, t9), IncomparableError);
  EXPECT_THROW(ics(t8, stack_invariants(a, first_ids(8), 1)), IncomparableError);
  const auto shifted = stack_invariants(a, first_ids(8, 2), 2);
  EXPECT_EQ(ics_report(t8, shifted).warnings, (std::vector<std::string>{"anchor sets differ"}));
}

TEST(Ics, ScaleSensitivityIsReal) {
  auto a = toy_model(10);
  const auto anchors = first_ids(8, 3);
  const auto before = stack_invariants(a, anchors, 2);
  auto& wq = a.tensors.at(names::layer(1, "wq")).data;
  for (float& x : wq) x *= 2.0f;
  const auto after = stack_invariants(a, anchors, 2);
  EXPECT_NE(before.data, after.data);
  // Only M_a of layer 1 (channel 3) changes.
  for (size_t c = 0; c < 6; ++c) EXPECT_EQ(std::ranges::equal(before.channel(c), after.channel(c)), c != 3) << c;
}

TEST(Pcs, Examples) {
  const auto arch = toy_arch(2, 32, 2, 256);
  const auto m = toy_model(11, arch);
  EXPECT_NEAR(pcs(m, m), 100.0, 1e-9);
  EXPECT_LT(std::abs(pcs(m, toy_model(12, arch))), 5.0);
  auto noisy = m;
  Rng rng(13);
  for (auto& [name, t] : noisy.tensors)
    for (float& x : t.data) x += static_cast<float>(0.01 * 0.02 * rng.normal());
  EXPECT_GT(pcs(m, noisy), 99.0);
  EXPECT_THROW(pcs(m, toy_model(11)), IncomparableError);
}

TEST(Pcs, LeavesOutOnlyNormGains) {
  const auto m = toy_model(14);
  size_t gains = 0;
  for (const auto& [name, t] : m.tensors)
    if (name.ends_with(".g")) gains += t.count();
  EXPECT_EQ(pcs_parameters(m).size() + gains, flatten_parameters(m).size());
  EXPECT_EQ(gains, 2u * 2 * 16);
}

TEST(InvariantFile, RoundTripAndErrors) {
  TempDir dir;
  const auto t = stack_invariants(toy_model(15), first_ids(8, 5), 2, sha256(std::vector<uint8_t>{1, 2, 3}));
  write_invariants(t, dir / "t.hrit");
  EXPECT_EQ(read_invariants(dir / "t.hrit"), t);
  auto bytes = serialize_invariants(t);
  EXPECT_EQ(bytes.size(), 8u + 8 + 8 + 8 + 2 * 8 + 64 + 4 * 6 * 64);
  auto cut = bytes;
  cut.resize(cut.size() - 4);
  EXPECT_THROW(parse_invariants(cut), TruncatedError);
  auto extra = bytes;
  extra.push_back(0);
  EXPECT_THROW(parse_invariants(extra), FormatError);
  auto bad = bytes;
  bad[3] = 'X';
  EXPECT_THROW(parse_invariants(bad), FormatError);
}

TEST(VocabularyAugmentation, InvariantsAndIcsUnchanged) {
  const auto arch = toy_arch(2, 16, 2, 64);
  const auto base = toy_model(16, arch);
  Rng data(17);
  std::vector<uint32_t> stream(4000);
  for (auto& id : stream) id = static_cast<uint32_t>(data.below(64));
  const auto anchors = select_anchor_tokens(count_frequencies(stream, 64), 16);
  Rng rng(18);
  const auto big = augment_vocabulary(base, 16, rng);
  const auto anchors_big = select_anchor_tokens(count_frequencies(stream, 80), 16);
  EXPECT_EQ(anchors, anchors_big);
  const auto ta = stack_invariants(base, anchors, 2), tb = stack_invariants(big, anchors_big, 2);
  EXPECT_EQ(ta, tb);
  EXPECT_EQ(ics(ta, tb), 100.0);
}

}  // namespace
}  // namespace hrfp
