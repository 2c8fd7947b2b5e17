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

// Fingerprints a small family of toy models.
//
//   hrfp_sample_fingerprint [ENCODER.hrfe] [OUT_DIR]
//
// Builds two independent base models, a camouflaged copy of the first (all
// four attack kinds) and a noisy offspring of the first, then prints ICS and
// PCS against the first base and writes one fingerprint directory per model.
// Without an encoder file an untrained K=64 encoder is used, which still
// exercises the pipeline but gives uninformative images.

#include <cstdio>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "hrfp/attacks.hpp"
#include "hrfp/fpm.hpp"
#include "hrfp/pipeline.hpp"
#include "hrfp/reference_model.hpp"

int main(int argc, char** argv) {
  using namespace hrfp;
  try {
    EncoderFile encoder;
    if (argc > 1) {
      encoder = read_encoder(argv[1]);
    } else {
      TrainConfig config;
      encoder.encoder = initial_model(config).encoder;
      encoder.config = config;
      encoder.hash = sha256(serialize_encoder(encoder.encoder, config));
    }
    const std::filesystem::path out = argc > 2 ? argv[2] : "fingerprints";

    ArchitectureDescriptor arch;
    arch.num_layers = 2;
    arch.model_dim = 64;
    arch.ffn_dim = 256;
    arch.vocab_size = 512;
    arch.num_heads = 4;

    Rng rng(7);
    TokenCorpus corpus{arch.vocab_size, {}};
    for (int i = 0; i < 20000; ++i) {
      const double u = rng.uniform();
      corpus.tokens.push_back(static_cast<uint32_t>(static_cast<double>(arch.vocab_size) * u * u));
    }

    const auto base = generate_random_model(arch, rng);
    auto offspring = base;
    for (auto& [name, t] : offspring.tensors)
      for (float& x : t.data) x += static_cast<float>(0.01 * kInitStd * rng.normal());
    const std::vector<std::pair<std::string, ModelCheckpoint>> models = {
        {"base", base},
        {"camouflaged", apply_attack(base, sample_attack(arch, kAllAttackKinds, 11))},
        {"offspring", offspring},
        {"independent", generate_random_model(arch, rng)},
    };

    const size_t r = encoder.encoder.input_channels / kTermsPerLayer;
    std::vector<Fingerprint> fps;
    for (const auto& [name, model] : models) {
      fps.push_back(fingerprint(model, corpus, encoder, r));
      write_fingerprint(fps.back(), out / name);
    }
    std::printf("%-12s %10s %10s %12s %s\n", "model", "ICS", "PCS", "image dist", "verdict");
    for (size_t i = 0; i < models.size(); ++i) {
      const auto verdict = compare_invariants(fps[0].invariants, fps[i].invariants);
      std::printf("%-12s %10.3f %10.3f %12.4f %s\n", models[i].first.c_str(), verdict.ics,
                  pcs(models[0].second, models[i].second), image_distance(fps[0].image, fps[i].image),
                  verdict.same_base ? "same base" : "different base");
    }
    std::printf("fingerprints written under %s\n", out.c_str());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
