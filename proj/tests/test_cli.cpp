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

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "hrfp/pipeline.hpp"
#include "test_util.hpp"

namespace hrfp {
namespace {

using testing::TempDir;
using testing::toy_arch;
using testing::toy_model;

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto arch = toy_arch(2, 16, 2, 64);
    write_checkpoint(toy_model(1, arch), dir_ / "a.hrfc");
    write_checkpoint(toy_model(2, arch), dir_ / "b.hrfc");
    Rng rng(3);
    TokenCorpus corpus{64, {}};
    for (int i = 0; i < 3000; ++i) corpus.tokens.push_back(static_cast<uint32_t>(64 * std::pow(rng.uniform(), 2)));
    write_corpus(corpus, dir_ / "c.hrtc");
    TrainConfig c;
    c.k = 16;
    c.channels = 6;
    write_encoder(initial_model(c).encoder, c, dir_ / "e.hrfe");
  }

  // Runs the CLI with stdout captured; returns the exit status.
  int run(const std::string& args) {
    const auto out = dir_ / "stdout.txt";
    const std::string cmd = std::string(HRFP_CLI_PATH) + " " + args + " > " + out.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    std::ifstream in(out);
    std::stringstream ss;
    ss << in.rdbuf();
    output_ = ss.str();
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  nlohmann::json last_record() const {
    const auto end = output_.find_last_not_of('\n');
    const auto start = output_.rfind('\n', end);
    return nlohmann::json::parse(output_.substr(start == std::string::npos ? 0 : start + 1, end + 1));
  }

  std::string p(const std::string& name) const { return (dir_ / name).string(); }

  TempDir dir_;
  std::string output_;
};

TEST_F(CliTest, UsageErrorsExitTwo) {
  EXPECT_EQ(run(""), 2);
  EXPECT_EQ(run("no-such-command"), 2);
  EXPECT_EQ(run("compare " + p("x.hrit")), 2);
  EXPECT_EQ(run("fingerprint --ckpt " + p("missing.hrfc") + " --corpus " + p("c.hrtc") + " --encoder " + p("e.hrfe") +
                " --out " + p("o")),
            2);
  EXPECT_EQ(run("attack --ckpt " + p("a.hrfc") + " --kinds bogus --out " + p("x.hrfc")), 2);
  EXPECT_EQ(run("--help"), 0);
}

TEST_F(CliTest, AttackThenVerify) {
  ASSERT_EQ(run("attack --ckpt " + p("a.hrfc") + " --seed 5 --out " + p("at.hrfc")), 0) << output_;
  EXPECT_TRUE(std::filesystem::exists(p("at.hrfc.attack.json")));
  EXPECT_EQ(run("verify --ckpt " + p("a.hrfc") + " --ckpt " + p("at.hrfc")), 0) << output_;
  EXPECT_TRUE(last_record()["pass"].get<bool>());
  EXPECT_EQ(run("verify --ckpt " + p("a.hrfc") + " --ckpt " + p("b.hrfc")), 1) << output_;
}

TEST_F(CliTest, InvariantsAndCompare) {
  ASSERT_EQ(run("attack --ckpt " + p("a.hrfc") + " --seed 6 --out " + p("at.hrfc")), 0) << output_;
  for (const char* name : {"a", "at", "b"}) {
    ASSERT_EQ(run("invariants --ckpt " + p(std::string(name) + ".hrfc") + " --corpus " + p("c.hrtc") +
                  " --k 16 --layers 2 --out " + p(std::string(name) + ".hrit")),
              0)
        << output_;
  }
  EXPECT_EQ(run("compare " + p("a.hrit") + " " + p("at.hrit")), 0) << output_;
  EXPECT_GT(last_record()["ics"].get<double>(), 99.9);
  EXPECT_EQ(run("compare " + p("a.hrit") + " " + p("b.hrit")), 1) << output_;
  EXPECT_FALSE(last_record()["same_base"].get<bool>());
  EXPECT_EQ(run("compare " + p("a.hrit") + " " + p("a.hrit") + " --threshold 100"), 0) << output_;
}

TEST_F(CliTest, FingerprintWritesArtifacts) {
  ASSERT_EQ(run("fingerprint --ckpt " + p("a.hrfc") + " --corpus " + p("c.hrtc") + " --encoder " + p("e.hrfe") +
                " --out " + p("fp")),
            0)
      << output_;
  for (const char* f : {"fingerprint.png", "fingerprint.png.json", "invariants.hrit", "fingerprint.json"})
    EXPECT_TRUE(std::filesystem::exists(dir_ / "fp" / f)) << f;
  EXPECT_EQ(read_invariants(dir_ / "fp" / "invariants.hrit").channels, 6u);
}

TEST_F(CliTest, StageFailureExitsOne) {
  auto bytes = read_file(dir_ / "a.hrfc");
  bytes.resize(bytes.size() - 7);
  write_file(dir_ / "cut.hrfc", bytes);
  EXPECT_EQ(run("pcs --ckpt " + p("a.hrfc") + " --ckpt " + p("cut.hrfc")), 1) << output_;
  EXPECT_EQ(last_record()["stage"], "load checkpoint");
  // Encoder needs 3 layers of terms at r=3 but the model has 2.
  EXPECT_EQ(run("fingerprint --ckpt " + p("a.hrfc") + " --corpus " + p("c.hrtc") + " --encoder " + p("e.hrfe") +
                " --layers 3 --out " + p("fp")),
            1);
}

TEST_F(CliTest, PcsSelectAndTrain) {
  EXPECT_EQ(run("pcs --ckpt " + p("a.hrfc") + " --ckpt " + p("a.hrfc")), 0);
  EXPECT_NEAR(last_record()["pcs"].get<double>(), 100.0, 1e-9);
  EXPECT_EQ(run("select-tokens --corpus " + p("c.hrtc") + " --k 4 --out " + p("sel.json")), 0) << output_;
  EXPECT_TRUE(std::filesystem::exists(p("sel.json")));
  EXPECT_EQ(run("train-fpm --k 16 --channels 3 --batch 2 --epochs 1 --steps-per-epoch 4 --period 2 --seed 1 --out " +
                p("t.hrfe")),
            0)
      << output_;
  EXPECT_EQ(read_encoder(dir_ / "t.hrfe").config.k, 16u);
}

}  // namespace
}  // namespace hrfp
