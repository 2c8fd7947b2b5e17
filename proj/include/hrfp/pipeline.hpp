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

// End-to-end fingerprinting: corpus -> anchor tokens -> invariant tensor ->
// encoder -> image. Each stage re-raises failures as StageError so callers
// can tell which step broke.

#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "hrfp/bytes.hpp"
#include "hrfp/checkpoint.hpp"
#include "hrfp/encoder.hpp"
#include "hrfp/error.hpp"
#include "hrfp/fpm.hpp"
#include "hrfp/invariants.hpp"
#include "hrfp/renderer.hpp"
#include "hrfp/vocab_select.hpp"

namespace hrfp {

// Default ICS percentage at or above which two models share a base.
inline constexpr double kSameBaseThreshold = 80.0;

class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& message)
      : Error(stage + ": " + message), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

template <typename Fn>
auto run_stage(const std::string& stage, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const Error& e) {
    throw StageError(stage, e.what());
  }
}

struct Verdict {
  double ics = 0.0;
  double threshold = kSameBaseThreshold;
  bool same_base = false;
  std::vector<std::string> warnings;
};

inline Verdict compare_invariants(const InvariantTensor& a, const InvariantTensor& b,
                                  double threshold = kSameBaseThreshold) {
  const auto r = ics_report(a, b);
  return {r.percent, threshold, r.percent >= threshold, r.warnings};
}

inline void to_json(nlohmann::json& j, const Verdict& v) {
  j = {{"ics", v.ics}, {"threshold", v.threshold}, {"same_base", v.same_base}, {"warnings", v.warnings}};
}

// Anchor selection and invariant stacking for one checkpoint.
inline InvariantTensor extract_invariants(const ModelCheckpoint& ckpt, const TokenCorpus& corpus, size_t k, size_t r) {
  const auto stats = run_stage("count", [&] { return count_frequencies(corpus); });
  const auto anchors = run_stage("select", [&] { return select_anchor_tokens(stats, k); });
  return run_stage("invariants", [&] { return stack_invariants(ckpt, anchors, r, stats.corpus_id); });
}

struct Fingerprint {
  InvariantTensor invariants;
  std::vector<float> v;  // encoder output at unit RMS
  FingerprintImage image;
  nlohmann::json metadata;
};

inline Fingerprint fingerprint_from_invariants(InvariantTensor invariants, const EncoderFile& encoder,
                                               const Renderer& renderer = Renderer()) {
  Fingerprint fp;
  fp.v = run_stage("encode", [&] {
    if (encoder.encoder.input_channels != invariants.channels) {
      throw DimensionError("encoder expects " + std::to_string(encoder.encoder.input_channels) +
                           " channels, invariants have " + std::to_string(invariants.channels));
    }
    if (encoder.config.k != invariants.k) {
      throw DimensionError("encoder was trained at K=" + std::to_string(encoder.config.k) + ", invariants have K=" +
                           std::to_string(invariants.k));
    }
    return encoder_forward(encoder.encoder, invariants.data, invariants.k);
  });
  double raw_sq = 0.0;
  for (float x : fp.v) raw_sq += static_cast<double>(x) * x;
  fp.v = run_stage("encode", [&] { return normalize_latent(fp.v); });
  fp.image = run_stage("render", [&] { return renderer.render(fp.v); });
  fp.image.provenance["encoder_hash"] = to_hex(encoder.hash);
  fp.image.provenance["anchor_hash"] = to_hex(invariants.anchor_hash);
  fp.image.provenance["corpus_hash"] = to_hex(invariants.corpus_hash);
  fp.metadata = {{"k", invariants.k},
                 {"channels", invariants.channels},
                 {"layers", invariants.layer_span},
                 {"anchor_hash", to_hex(invariants.anchor_hash)},
                 {"corpus_hash", to_hex(invariants.corpus_hash)},
                 {"invariant_hash", to_hex(sha256(serialize_invariants(invariants)))},
                 {"encoder_hash", to_hex(encoder.hash)},
                 {"renderer_version", kRendererVersion},
                 {"image_width", fp.image.width},
                 {"image_height", fp.image.height},
                 {"lipschitz_constant", renderer.lipschitz_constant()},
                 {"encoder_output_rms", std::sqrt(raw_sq / static_cast<double>(fp.v.size()))},
                 {"v", fp.v}};
  fp.invariants = std::move(invariants);
  return fp;
}

inline Fingerprint fingerprint(const ModelCheckpoint& ckpt, const TokenCorpus& corpus, const EncoderFile& encoder,
                               size_t r, const Renderer& renderer = Renderer()) {
  auto fp = fingerprint_from_invariants(extract_invariants(ckpt, corpus, encoder.config.k, r), encoder, renderer);
  fp.metadata["arch_hash"] = to_hex(arch_hash(ckpt.arch));
  fp.image.provenance["arch_hash"] = fp.metadata["arch_hash"];
  return fp;
}

// Writes fingerprint.png (+ .json sidecar), invariants.hrit and
// fingerprint.json into `dir`; returns the paths written.
inline std::vector<std::filesystem::path> write_fingerprint(const Fingerprint& fp, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto png = dir / "fingerprint.png";
  const auto hrit = dir / "invariants.hrit";
  const auto meta = dir / "fingerprint.json";
  write_png(fp.image, png);
  write_invariants(fp.invariants, hrit);
  write_text_file(meta, fp.metadata.dump(2) + "\n");
  auto sidecar = png;
  sidecar += ".json";
  return {png, sidecar, hrit, meta};
}

}  // namespace hrfp
