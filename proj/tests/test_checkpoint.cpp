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

#include <cstring>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "hrfp/checkpoint.hpp"
#include "hrfp/reference_model.hpp"
#include "test_util.hpp"

namespace hrfp {
namespace {

using testing::TempDir;
using testing::toy_arch;
using testing::toy_model;

TEST(Checkpoint, RoundTripIsBitExact) {
  TempDir dir;
  const auto ckpt = toy_model(1);
  write_checkpoint(ckpt, dir / "a.hrfc");
  const auto back = read_checkpoint(dir / "a.hrfc");
  EXPECT_EQ(back, ckpt);
}

TEST(Checkpoint, CanonicalBytes) {
  const auto ckpt = toy_model(2);
  const auto a = serialize_checkpoint(ckpt);
  // Rebuild the tensor map in reverse insertion order: bytes must not change.
  ModelCheckpoint shuffled;
  shuffled.arch = ckpt.arch;
  shuffled.metadata = ckpt.metadata;
  for (auto it = ckpt.tensors.rbegin(); it != ckpt.tensors.rend(); ++it) shuffled.tensors.emplace(it->first, it->second);
  EXPECT_EQ(sha256(a), sha256(serialize_checkpoint(shuffled)));
  EXPECT_EQ(a, serialize_checkpoint(ckpt));
}

// Header length field and padded header end of a serialized checkpoint.
size_t blob_section_start(const std::vector<uint8_t>& bytes) {
  uint64_t header_len = 0;
  std::memcpy(&header_len, bytes.data() + 8, 8);
  return (16 + header_len + 63) / 64 * 64;
}

nlohmann::json header_json(const std::vector<uint8_t>& bytes) {
  uint64_t header_len = 0;
  std::memcpy(&header_len, bytes.data() + 8, 8);
  return nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
}

// Rebuilds a file around `header` with blobs placed at its offsets.
std::vector<uint8_t> assemble(const nlohmann::json& header, const ModelCheckpoint& ckpt) {
  const std::string text = header.dump();
  std::vector<uint8_t> out = {'H', 'R', 'F', 'C', kCheckpointVersion, 0, 0, 0};
  const uint64_t len = text.size();
  out.insert(out.end(), reinterpret_cast<const uint8_t*>(&len), reinterpret_cast<const uint8_t*>(&len) + 8);
  out.insert(out.end(), text.begin(), text.end());
  out.resize((out.size() + 63) / 64 * 64, 0);
  const size_t base = out.size();
  for (const auto& entry : header.at("tensors")) {
    const auto& t = ckpt.tensors.at(entry.at("name").get<std::string>());
    const size_t at = base + entry.at("offset").get<size_t>();
    if (out.size() < at + 4 * t.data.size()) out.resize(at + 4 * t.data.size(), 0);
    std::memcpy(out.data() + at, t.data.data(), 4 * t.data.size());
  }
  return out;
}

TEST(Checkpoint, FileSizeForToyModel) {
  const ArchitectureDescriptor arch = toy_arch(2, 8, 1, 32);
  const auto ckpt = toy_model(3, arch);
  const auto bytes = serialize_checkpoint(ckpt);
  // Independent count from the declared shapes, not from the checkpoint.
  const size_t d = 8, f = 16, v = 32;
  const size_t per_layer = 4 * d * d + d * f + f + f * d + d + 4 * d;
  const size_t values = 2 * per_layer + v * d + d * v;
  size_t from_shapes = 0;
  for (const auto& [name, shape] : expected_tensors(arch)) {
    size_t n = 1;
    for (size_t s : shape) n *= s;
    from_shapes += n;
  }
  EXPECT_EQ(from_shapes, values);
  EXPECT_EQ(bytes.size(), blob_section_start(bytes) + 4 * values);
  EXPECT_EQ(blob_section_start(bytes) % 64, 0u);
}

TEST(Checkpoint, PerBlobPaddedFileIsReadable) {
  const auto ckpt = toy_model(10, toy_arch(2, 8, 1, 32));
  auto header = header_json(serialize_checkpoint(ckpt));
  size_t offset = 0;
  for (auto& entry : header.at("tensors")) {
    entry["offset"] = offset;
    offset += (4 * entry.at("count").get<size_t>() + 63) / 64 * 64;
  }
  EXPECT_EQ(parse_checkpoint(assemble(header, ckpt)), ckpt);
}

TEST(Checkpoint, OverlappingBlobsRejected) {
  const auto ckpt = toy_model(11, toy_arch(2, 8, 1, 32));
  auto header = header_json(serialize_checkpoint(ckpt));
  header.at("tensors").at(1)["offset"] = 0;
  EXPECT_THROW(parse_checkpoint(assemble(header, ckpt)), FormatError);
}

TEST(Checkpoint, CorruptedLengthIsTruncation) {
  auto bytes = serialize_checkpoint(toy_model(4));
  const uint64_t huge = bytes.size() * 4;
  std::memcpy(bytes.data() + 8, &huge, 8);
  EXPECT_THROW(parse_checkpoint(bytes), TruncatedError);
  auto cut = serialize_checkpoint(toy_model(4));
  cut.resize(cut.size() - 100);
  EXPECT_THROW(parse_checkpoint(cut), TruncatedError);
}

TEST(Checkpoint, BadMagicAndVersion) {
  auto bytes = serialize_checkpoint(toy_model(5));
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(parse_checkpoint(bad), FormatError);
  bad = bytes;
  bad[4] = 99;
  EXPECT_THROW(parse_checkpoint(bad), FormatError);
}

TEST(Checkpoint, MissingTensorNamedInError) {
  auto ckpt = toy_model(6);
  ckpt.tensors.erase(names::layer(1, "wk"));
  try {
    validate(ckpt);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("layer.1.wk"), std::string::npos);
  }
  EXPECT_THROW(serialize_checkpoint(ckpt), ValidationError);
}

TEST(Checkpoint, ShapeMismatchAndExtraTensor) {
  auto ckpt = toy_model(7);
  ckpt.tensors[names::layer(0, "b1")].shape = {3};
  ckpt.tensors[names::layer(0, "b1")].data.resize(3);
  EXPECT_THROW(validate(ckpt), ValidationError);
  auto extra = toy_model(7);
  extra.tensors["layer.9.wq"] = TensorRecord{{1}, {0.0f}};
  EXPECT_THROW(validate(extra), ValidationError);
}

TEST(Checkpoint, ZeroTensorCheckpointRejected) {
  ModelCheckpoint empty;
  empty.arch = toy_arch();
  EXPECT_THROW(serialize_checkpoint(empty), ValidationError);
}

TEST(Checkpoint, ArchitectureValidation) {
  auto arch = toy_arch(2, 10, 3);
  EXPECT_THROW(arch.validate(), ValidationError);
  arch = toy_arch();
  arch.positional = PositionalKind::kLearnedAbsolute;
  EXPECT_THROW(arch.validate(), ValidationError);
  arch.max_positions = 16;
  EXPECT_NO_THROW(arch.validate());
  EXPECT_TRUE(expected_tensors(arch).contains(names::kPositions));
}

TEST(Checkpoint, TiedEmbeddingsStoredOnce) {
  auto arch = toy_arch();
  arch.tied_embeddings = true;
  const auto ckpt = toy_model(8, arch);
  EXPECT_FALSE(ckpt.tensors.contains(names::kSoftmax));
  EXPECT_EQ(ckpt.softmax_matrix(), transpose(ckpt.matrix(names::kEmbed)));
}

TEST(FlattenParameters, LengthOrderAndLocality) {
  const auto ckpt = toy_model(9);
  const auto flat = flatten_parameters(ckpt);
  size_t total = 0;
  for (const auto& [name, t] : ckpt.tensors) total += t.count();
  EXPECT_EQ(flat.size(), total);

  auto changed = ckpt;
  auto& wq = changed.tensors[names::layer(1, "wq")];
  wq.data[5] += 1.0f;
  const auto flat2 = flatten_parameters(changed);
  size_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    if (name == names::layer(1, "wq")) break;
    offset += t.count();
  }
  for (size_t i = 0; i < flat.size(); ++i) {
    if (i == offset + 5) {
      EXPECT_NE(flat[i], flat2[i]);
    } else {
      ASSERT_EQ(flat[i], flat2[i]) << i;
    }
  }
  EXPECT_DOUBLE_EQ(cosine_similarity(flat, flat), 1.0);
}

}  // namespace
}  // namespace hrfp
