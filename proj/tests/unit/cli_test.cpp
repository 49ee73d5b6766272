// Copyright (C) 2026 The hpfl Authors
// SPDX-License-Identifier: Apache-2.0

// End-to-end tests of the `hpfl` binary: exit codes, messages, artifacts,
// and byte-for-byte reproducibility.

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#ifndef HPFL_CLI_PATH
#error "HPFL_CLI_PATH must point at the hpfl binary"
#endif

namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = -1;
  std::string output;  // stdout + stderr
};

Outcome hpfl(const std::string& args) {
  const std::string cmd = std::string("\"") + HPFL_CLI_PATH + "\" " + args + " 2>&1";
  Outcome o;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (pipe == nullptr) return o;
  std::array<char, 4096> buf{};
  std::size_t n = 0;
  while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) o.output.append(buf.data(), n);
  const int status = ::pclose(pipe);
  o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return o;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

constexpr const char* kTinyConfig = R"({
  "seed": 3,
  "population": {
    "n_clients": 4,
    "model_types": [{"id": "small", "width": 8, "depth": 4}, {"id": "large", "width": 12, "depth": 6}]
  },
  "pretrain": {"steps": 20, "samples": 64},
  "tasks": {"train_per_task": 12, "test_per_task": 20, "public_samples": 64,
            "unseen_train": 12, "unseen_test": 20},
  "federation": {"rounds": 4, "local_steps": 10, "eval_every": 2, "rank": 4, "n_blocks": 2,
                 "fast_steps": 20, "fast_eval_every": 5},
  "alignment": {"epochs": 3}
})";

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / (std::string("hpfl_cli_") + info->name() + "_" +
                                        std::to_string(::getpid()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    std::ofstream(dir_ / "tiny.json") << kTinyConfig;
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string q(const fs::path& p) const { return "\"" + p.string() + "\""; }
  std::string config() const { return q(dir_ / "tiny.json"); }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(hpfl("").code, 2);
  EXPECT_EQ(hpfl("frobnicate").code, 2);
  const Outcome bad = hpfl("check --suite nonsense");
  EXPECT_EQ(bad.code, 2);
  EXPECT_NE(bad.output.find("nonsense"), std::string::npos) << bad.output;
  EXPECT_EQ(hpfl("generate --config " + config()).code, 2);  // --out missing
  EXPECT_EQ(hpfl("--help").code, 0);
}

TEST_F(Cli, CheckSuitePasses) {
  const Outcome o = hpfl("check --suite theorem2 --out " + q(dir_ / "t2.txt"));
  EXPECT_EQ(o.code, 0) << o.output;
  EXPECT_NE(o.output.find("summary theorem2"), std::string::npos) << o.output;
  EXPECT_EQ(slurp(dir_ / "t2.txt"), o.output);
}

TEST_F(Cli, ConfigErrorsNameTheField) {
  std::ofstream(dir_ / "bad.json") << "{\n  \"population\": {\n    \"model_types\": []\n  }\n}\n";
  const Outcome o = hpfl("generate --config " + q(dir_ / "bad.json") + " --out " + q(dir_ / "x"));
  EXPECT_EQ(o.code, 2);
  EXPECT_NE(o.output.find("population.n_clients"), std::string::npos) << o.output;
  EXPECT_NE(o.output.find("bad.json:2"), std::string::npos) << o.output;

  const Outcome ov = hpfl("generate --config " + config() + " --out " + q(dir_ / "x") + " --set federation.nope=1");
  EXPECT_EQ(ov.code, 2);
  EXPECT_NE(ov.output.find("federation.nope"), std::string::npos) << ov.output;
}

TEST_F(Cli, GenerateIsDeterministicAndGuardsOverwrite) {
  const Outcome a = hpfl("generate --config " + config() + " --out " + q(dir_ / "a"));
  ASSERT_EQ(a.code, 0) << a.output;
  const Outcome b = hpfl("generate --config " + config() + " --out " + q(dir_ / "b"));
  ASSERT_EQ(b.code, 0) << b.output;
  EXPECT_EQ(slurp(dir_ / "a" / "scenario.json"), slurp(dir_ / "b" / "scenario.json"));

  EXPECT_EQ(hpfl("generate --config " + config() + " --out " + q(dir_ / "a")).code, 2);
  EXPECT_EQ(hpfl("generate --config " + config() + " --out " + q(dir_ / "a") + " --force").code, 0);

  ASSERT_EQ(hpfl("generate --config " + config() + " --seed 4 --out " + q(dir_ / "c")).code, 0);
  EXPECT_NE(slurp(dir_ / "a" / "scenario.json"), slurp(dir_ / "c" / "scenario.json"));
}

TEST_F(Cli, AlignRunAndReproduce) {
  ASSERT_EQ(hpfl("generate --config " + config() + " --out " + q(dir_ / "s")).code, 0);
  const std::string scen = q(dir_ / "s" / "scenario.json");

  const Outcome al = hpfl("align --scenario " + scen);
  ASSERT_EQ(al.code, 0) << al.output;
  EXPECT_TRUE(fs::exists(dir_ / "s" / "alignment_report.txt"));
  const Outcome again = hpfl("align --scenario " + scen);
  EXPECT_EQ(again.code, 0);
  EXPECT_NE(again.output.find("already present"), std::string::npos) << again.output;

  const Outcome bad = hpfl("run --scenario " + scen + " --methods sft,bogus --out " + q(dir_ / "r"));
  EXPECT_EQ(bad.code, 2) << bad.output;
  const Outcome data = hpfl("run --scenario " + scen + " --set tasks.sample_noise=2 --out " + q(dir_ / "r"));
  EXPECT_EQ(data.code, 2) << data.output;

  for (const char* sub : {"r1", "r2"}) {
    const Outcome run = hpfl("run --scenario " + scen + " --methods sft,fedmosaic --out " + q(dir_ / sub));
    ASSERT_EQ(run.code, 0) << run.output;
    EXPECT_NE(run.output.find("alignment: loaded"), std::string::npos) << run.output;
  }
  for (const char* f : {"trace_sft.csv", "trace_fedmosaic.csv", "summary_sft.json", "summary_fedmosaic.json",
                        "rounds_fedmosaic.jsonl", "comparison.txt"}) {
    const std::string one = slurp(dir_ / "r1" / f);
    EXPECT_FALSE(one.empty()) << f;
    EXPECT_EQ(one, slurp(dir_ / "r2" / f)) << f;
  }
  EXPECT_FALSE(fs::exists(dir_ / "r1" / "trace_vanilla_equal.csv"));
  const std::string trace = slurp(dir_ / "r1" / "trace_fedmosaic.csv");
  EXPECT_NE(trace.find("# config_hash "), std::string::npos);
  EXPECT_NE(trace.find("# seed 3"), std::string::npos);

  // A run-time override changes the config hash, so the run differs.
  ASSERT_EQ(hpfl("run --scenario " + scen + " --methods fedmosaic --set federation.tau=0.1 --out " +
                 q(dir_ / "r3"))
                .code,
            0);
  EXPECT_NE(slurp(dir_ / "r3" / "summary_fedmosaic.json"), slurp(dir_ / "r1" / "summary_fedmosaic.json"));
}
