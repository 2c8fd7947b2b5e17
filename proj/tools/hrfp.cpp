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

// hrfp: command-line front end for the fingerprinting toolkit.
//
// Every command prints one JSON record per line on stdout. Exit status is 0
// when the command succeeds (or its check passes), 1 when a check fails or a
// stage raises an error, and 2 on a usage error.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "hrfp/attacks.hpp"
#include "hrfp/checkpoint.hpp"
#include "hrfp/fpm.hpp"
#include "hrfp/invariants.hpp"
#include "hrfp/pipeline.hpp"
#include "hrfp/reference_model.hpp"
#include "hrfp/vocab_select.hpp"

namespace {

constexpr int kExitPass = 0;
constexpr int kExitFail = 1;
constexpr int kExitUsage = 2;

void emit(const nlohmann::json& record) {
  std::cout << record.dump() << '\n';
  std::cout.flush();
}

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require_file(const std::string& path, const char* flag) {
  if (path.empty()) throw UsageError(std::string(flag) + " is required");
  if (!std::filesystem::is_regular_file(path)) throw UsageError(std::string(flag) + " " + path + ": no such file");
}

std::set<hrfp::AttackKind> parse_kinds(const std::vector<std::string>& names) {
  if (names.empty()) return hrfp::kAllAttackKinds;
  std::set<hrfp::AttackKind> kinds;
  for (const auto& n : names) {
    const auto kind = nlohmann::json(n).get<hrfp::AttackKind>();
    if (nlohmann::json(kind).get<std::string>() != n) throw UsageError("unknown attack kind " + n);
    kinds.insert(kind);
  }
  return kinds;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fingerprint language-model checkpoints by their invariant terms"};
  app.require_subcommand(1);

  std::vector<std::string> ckpts;
  std::string corpus, encoder, out;
  size_t k = 0;
  size_t layers = 0;  // 0: default (from the encoder for fingerprint)
  uint64_t seed = 0;
  double threshold = hrfp::kSameBaseThreshold;
  double tolerance = 1e-4;

  auto* fp = app.add_subcommand("fingerprint", "checkpoint + corpus + encoder -> image, invariants, metadata");
  fp->add_option("--ckpt", ckpts, "checkpoint (HRFC)")->required();
  fp->add_option("--corpus", corpus, "token corpus (HRTC)")->required();
  fp->add_option("--encoder", encoder, "encoder parameters (HRFE)")->required();
  fp->add_option("--layers", layers, "number of final layers r (default: encoder channels / 3)")->check(CLI::PositiveNumber);
  fp->add_option("--out", out, "output directory")->required();

  auto* inv = app.add_subcommand("invariants", "checkpoint + corpus -> invariant tensor (HRIT)");
  inv->add_option("--ckpt", ckpts, "checkpoint (HRFC)")->required();
  inv->add_option("--corpus", corpus, "token corpus (HRTC)")->required();
  inv->add_option("--k", k, "anchor count K")->check(CLI::PositiveNumber);
  inv->add_option("--layers", layers, "number of final layers r (default 2)")->check(CLI::PositiveNumber);
  inv->add_option("--out", out, "output HRIT file")->required();

  std::vector<std::string> tensors;
  auto* cmp = app.add_subcommand("compare", "ICS verdict for two invariant tensors; exit 0 when same base");
  cmp->add_option("tensors", tensors, "two HRIT files")->required()->expected(2);
  cmp->add_option("--threshold", threshold, "same-base threshold in percent");

  std::vector<std::string> kind_names;
  auto* atk = app.add_subcommand("attack", "apply a seeded camouflage attack");
  atk->add_option("--ckpt", ckpts, "checkpoint (HRFC)")->required();
  atk->add_option("--seed", seed, "attack seed");
  atk->add_option("--kinds", kind_names, "subset of linear_qk linear_vo permute_ffn permute_embed (default all)");
  atk->add_option("--out", out, "attacked checkpoint; the spec goes to <out>.attack.json")->required();

  size_t probes = 8, probe_len = 16;
  auto* ver = app.add_subcommand("verify", "forward-output equivalence of two checkpoints; exit 0 when equal");
  ver->add_option("--ckpt", ckpts, "two checkpoints (give --ckpt twice)")->required();
  ver->add_option("--tolerance", tolerance, "max absolute logit difference");
  ver->add_option("--seed", seed, "probe seed");
  ver->add_option("--probes", probes, "probe sequence count")->check(CLI::PositiveNumber);
  ver->add_option("--probe-length", probe_len, "probe sequence length")->check(CLI::PositiveNumber);

  hrfp::TrainConfig cfg;
  std::string optimizer = "adam";
  auto* trn = app.add_subcommand("train-fpm", "train the fingerprinting encoder on synthetic data");
  trn->add_option("--k", cfg.k, "tensor side K")->check(CLI::PositiveNumber);
  trn->add_option("--channels", cfg.channels, "input channels C (3 per layer)")->check(CLI::PositiveNumber);
  trn->add_option("--alpha", cfg.alpha, "positive-pair noise std");
  trn->add_option("--batch", cfg.batch_size, "batch size")->check(CLI::PositiveNumber);
  trn->add_option("--lr", cfg.lr, "learning rate");
  trn->add_option("--period", cfg.alternation_period, "steps per discriminator/encoder phase")
      ->check(CLI::PositiveNumber);
  trn->add_option("--epochs", cfg.epochs, "epochs");
  trn->add_option("--steps-per-epoch", cfg.steps_per_epoch, "steps per epoch")->check(CLI::PositiveNumber);
  trn->add_option("--optimizer", optimizer, "adam or sgd")->check(CLI::IsMember({"adam", "sgd"}));
  trn->add_option("--seed", cfg.seed, "training seed");
  trn->add_option("--out", out, "encoder file (HRFE)")->required();

  auto* sel = app.add_subcommand("select-tokens", "least-frequent K tokens of a corpus");
  sel->add_option("--corpus", corpus, "token corpus (HRTC)")->required();
  sel->add_option("--k", k, "anchor count K")->check(CLI::PositiveNumber);
  sel->add_option("--out", out, "optional JSON file for the anchor ids");

  auto* pcs = app.add_subcommand("pcs", "parameter cosine similarity of two checkpoints");
  pcs->add_option("--ckpt", ckpts, "two checkpoints (give --ckpt twice)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitPass : kExitUsage;
  }

  try {
    const size_t want_ckpts = (ver->parsed() || pcs->parsed()) ? 2 : 1;
    if ((fp->parsed() || inv->parsed() || atk->parsed() || ver->parsed() || pcs->parsed()) &&
        ckpts.size() != want_ckpts) {
      throw UsageError("expected --ckpt exactly " + std::to_string(want_ckpts) + " time(s)");
    }
    if (fp->parsed()) {
      require_file(ckpts[0], "--ckpt");
      require_file(corpus, "--corpus");
      require_file(encoder, "--encoder");
      const auto ckpt = hrfp::run_stage("load checkpoint", [&] { return hrfp::read_checkpoint(ckpts[0]); });
      const auto tokens = hrfp::run_stage("load corpus", [&] { return hrfp::read_corpus(corpus); });
      const auto enc = hrfp::run_stage("load encoder", [&] { return hrfp::read_encoder(encoder); });
      const size_t r = layers == 0 ? enc.encoder.input_channels / hrfp::kTermsPerLayer : layers;
      const auto result = hrfp::fingerprint(ckpt, tokens, enc, r);
      const auto written = hrfp::run_stage("write", [&] { return hrfp::write_fingerprint(result, out); });
      nlohmann::json record = result.metadata;
      record.erase("v");
      record["command"] = "fingerprint";
      std::vector<std::string> files;
      for (const auto& p : written) files.push_back(p.string());
      record["files"] = files;
      emit(record);
      return kExitPass;
    }
    if (inv->parsed()) {
      require_file(ckpts[0], "--ckpt");
      require_file(corpus, "--corpus");
      const auto ckpt = hrfp::run_stage("load checkpoint", [&] { return hrfp::read_checkpoint(ckpts[0]); });
      const auto tokens = hrfp::run_stage("load corpus", [&] { return hrfp::read_corpus(corpus); });
      const auto t = hrfp::extract_invariants(ckpt, tokens, k == 0 ? hrfp::kDefaultAnchorCount : k,
                                                 layers == 0 ? hrfp::kDefaultInvariantLayers : layers);
      hrfp::run_stage("write", [&] { hrfp::write_invariants(t, out); });
      emit({{"command", "invariants"},
            {"k", t.k},
            {"channels", t.channels},
            {"layers", t.layer_span},
            {"anchor_hash", hrfp::to_hex(t.anchor_hash)},
            {"corpus_hash", hrfp::to_hex(t.corpus_hash)},
            {"out", out}});
      return kExitPass;
    }
    if (cmp->parsed()) {
      require_file(tensors[0], "tensor");
      require_file(tensors[1], "tensor");
      const auto a = hrfp::run_stage("load", [&] { return hrfp::read_invariants(tensors[0]); });
      const auto b = hrfp::run_stage("load", [&] { return hrfp::read_invariants(tensors[1]); });
      const auto verdict = hrfp::run_stage("compare", [&] { return hrfp::compare_invariants(a, b, threshold); });
      nlohmann::json record = verdict;
      record["command"] = "compare";
      emit(record);
      return verdict.same_base ? kExitPass : kExitFail;
    }
    if (atk->parsed()) {
      require_file(ckpts[0], "--ckpt");
      const auto kinds = parse_kinds(kind_names);
      const auto ckpt = hrfp::run_stage("load checkpoint", [&] { return hrfp::read_checkpoint(ckpts[0]); });
      const auto spec = hrfp::run_stage("sample", [&] { return hrfp::sample_attack(ckpt.arch, kinds, seed); });
      const auto attacked = hrfp::run_stage("attack", [&] { return hrfp::apply_attack(ckpt, spec); });
      const auto spec_path = out + ".attack.json";
      hrfp::run_stage("write", [&] {
        hrfp::write_checkpoint(attacked, out);
        hrfp::write_text_file(spec_path, hrfp::attack_to_json(spec).dump(2) + "\n");
      });
      emit({{"command", "attack"}, {"spec", hrfp::attack_to_json(spec)}, {"out", out}, {"spec_file", spec_path}});
      return kExitPass;
    }
    if (ver->parsed()) {
      require_file(ckpts[0], "--ckpt");
      require_file(ckpts[1], "--ckpt");
      const auto a = hrfp::run_stage("load checkpoint", [&] { return hrfp::read_checkpoint(ckpts[0]); });
      const auto b = hrfp::run_stage("load checkpoint", [&] { return hrfp::read_checkpoint(ckpts[1]); });
      hrfp::Rng rng(seed);
      const auto batch = hrfp::random_probes(rng, a.arch.vocab_size, probes, probe_len);
      const auto report = hrfp::run_stage("verify", [&] {
        if (!(a.arch == b.arch)) return hrfp::EquivalenceReport{std::numeric_limits<double>::infinity(), tolerance, false};
        return hrfp::verify_output_equivalence(a, b, batch, tolerance);
      });
      emit({{"command", "verify"},
            {"max_abs_diff", report.max_abs_diff},
            {"tolerance", report.tolerance},
            {"same_architecture", a.arch == b.arch},
            {"pass", report.pass}});
      return report.pass ? kExitPass : kExitFail;
    }
    if (trn->parsed()) {
      cfg.optimizer = optimizer == "sgd" ? hrfp::OptimizerKind::kSgd : hrfp::OptimizerKind::kAdam;
      try {
        cfg.validate();
      } catch (const hrfp::Error& e) {
        throw UsageError(e.what());
      }
      emit({{"command", "train-fpm"}, {"config", cfg}});
      const auto model = hrfp::run_stage("train", [&] {
        return hrfp::train_fpm(cfg, [](const hrfp::EpochMetrics& m) { emit(m); });
      });
      hrfp::run_stage("write", [&] { hrfp::write_encoder(model.encoder, cfg, out); });
      const auto file = hrfp::read_encoder(out);
      emit({{"command", "train-fpm"}, {"out", out}, {"encoder_hash", hrfp::to_hex(file.hash)}});
      return kExitPass;
    }
    if (sel->parsed()) {
      require_file(corpus, "--corpus");
      const auto tokens = hrfp::run_stage("load corpus", [&] { return hrfp::read_corpus(corpus); });
      const auto stats = hrfp::run_stage("count", [&] { return hrfp::count_frequencies(tokens); });
      const auto anchors =
          hrfp::run_stage("select", [&] { return hrfp::select_anchor_tokens(stats, k == 0 ? hrfp::kDefaultAnchorCount : k); });
      nlohmann::json record = {{"command", "select-tokens"},
                               {"k", anchors.size()},
                               {"anchor_hash", hrfp::to_hex(hrfp::anchor_hash(anchors))},
                               {"corpus_hash", hrfp::to_hex(stats.corpus_id)}};
      if (!out.empty()) {
        hrfp::run_stage("write", [&] {
          hrfp::write_text_file(out, nlohmann::json({{"token_ids", anchors.token_ids}}).dump() + "\n");
        });
        record["out"] = out;
      } else {
        record["token_ids"] = anchors.token_ids;
      }
      emit(record);
      return kExitPass;
    }
    if (pcs->parsed()) {
      require_file(ckpts[0], "--ckpt");
      require_file(ckpts[1], "--ckpt");
      const auto a = hrfp::run_stage("load checkpoint", [&] { return hrfp::read_checkpoint(ckpts[0]); });
      const auto b = hrfp::run_stage("load checkpoint", [&] { return hrfp::read_checkpoint(ckpts[1]); });
      const double value = hrfp::run_stage("pcs", [&] { return hrfp::pcs(a, b); });
      emit({{"command", "pcs"}, {"pcs", value}});
      return kExitPass;
    }
  } catch (const UsageError& e) {
    emit({{"error", e.what()}, {"kind", "usage"}});
    return kExitUsage;
  } catch (const hrfp::StageError& e) {
    emit({{"error", e.what()}, {"stage", e.stage()}});
    return kExitFail;
  } catch (const std::exception& e) {
    emit({{"error", e.what()}});
    return kExitFail;
  }
  return kExitUsage;
}
