// Copyright (C) 2026 The hpfl Authors
// SPDX-License-Identifier: Apache-2.0

// Config parsing/overrides and artifact (de)serialization.

#include <gtest/gtest.h>

#include <sstream>

#include "hpfl/config.hpp"
#include "hpfl/gradcheck.hpp"
#include "hpfl/serialize.hpp"

using namespace hpfl;

namespace {

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "<no error>";
}

ScenarioConfig small_config() {
  ScenarioConfig c;
  c.n_clients = 3;
  c.model_types = {{"a", 8, 4}, {"b", 12, 6}};
  c.n_blocks = 2;
  c.rank = 4;
  c.rounds = 4;
  c.eval_every = 2;
  c.train_per_task = 8;
  c.test_per_task = 5;
  c.public_samples = 20;
  c.unseen_train = 4;
  c.unseen_test = 4;
  return c;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

TEST(Config, CanonicalJsonRoundTrip) {
  ScenarioConfig c = small_config();
  c.seed = 42;
  c.mode = StreamMode::static_mixed;
  c.tau = 0.25;
  const ScenarioConfig back = parse_config(to_json(c).dump(2));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(config_hash(back), config_hash(c));
}

TEST(Config, MinimalConfigUsesDefaults) {
  const ScenarioConfig c = parse_config(R"({
    "population": {"n_clients": 6, "model_types": [{"id": "s", "width": 16, "depth": 8}]}
  })");
  EXPECT_EQ(c.n_clients, 6u);
  EXPECT_EQ(c.rounds, 20u);
  EXPECT_DOUBLE_EQ(c.tau, 0.5);
  EXPECT_DOUBLE_EQ(c.alpha, 0.5);
  EXPECT_DOUBLE_EQ(c.mask_ratio, 0.4);
  EXPECT_DOUBLE_EQ(c.noise_mu, 1e-4);
  EXPECT_EQ(c.n_blocks, 4u);
  EXPECT_EQ(c.probe_every, 10u);
}

TEST(Config, ErrorsNameTheFieldAndLine) {
  const std::string missing = error_of([] {
    parse_config("{\n  \"population\": {\n    \"model_types\": []\n  }\n}", "cfg.json");
  });
  EXPECT_NE(missing.find("population.n_clients"), std::string::npos) << missing;
  EXPECT_EQ(missing.rfind("cfg.json:2:", 0), 0u) << missing;

  const std::string unknown = error_of([] {
    parse_config(
        "{\n \"population\": {\"n_clients\": 2, \"model_types\": [{\"id\":\"a\",\"width\":8,\"depth\":4}]},\n"
        " \"federation\": {\n   \"tua\": 0.5\n }\n}",
        "cfg.json");
  });
  EXPECT_NE(unknown.find("unknown field 'federation.tua'"), std::string::npos) << unknown;
  EXPECT_EQ(unknown.rfind("cfg.json:4:", 0), 0u) << unknown;

  const std::string invalid = error_of([] {
    parse_config(
        "{\n \"population\": {\"n_clients\": 2, \"model_types\": [{\"id\":\"a\",\"width\":8,\"depth\":4}]},\n"
        " \"federation\": {\"tau\": 0}\n}",
        "cfg.json");
  });
  EXPECT_NE(invalid.find("federation.tau"), std::string::npos) << invalid;
  EXPECT_EQ(invalid.rfind("cfg.json:3:", 0), 0u) << invalid;

  const std::string syntax = error_of([] { parse_config("{\n  \"seed\": 1,\n  oops\n}", "cfg.json"); });
  EXPECT_NE(syntax.find("line 3"), std::string::npos) << syntax;

  const std::string type = error_of([] {
    parse_config(R"({"seed": -1, "population": {"n_clients": 2, "model_types": [{"id":"a","width":8,"depth":4}]}})");
  });
  EXPECT_NE(type.find("'seed'"), std::string::npos) << type;
  EXPECT_THROW(load_config("/nonexistent/hpfl.json"), ConfigError);
}

TEST(Config, OverridesKnownKeysOnly) {
  const ScenarioConfig c = small_config();
  const ScenarioConfig t = apply_override(c, "federation.tau=0.1");
  EXPECT_DOUBLE_EQ(t.tau, 0.1);
  EXPECT_NE(config_hash(t), config_hash(c));
  EXPECT_EQ(apply_override(c, "tasks.mode=static").mode, StreamMode::static_mixed);
  EXPECT_EQ(apply_override(c, "population.model_types.1.width=16").model_types[1].width, 16u);
  EXPECT_EQ(apply_override(c, "seed=9").seed, 9u);
  EXPECT_THROW(apply_override(c, "federation.bogus=1"), ConfigError);
  EXPECT_THROW(apply_override(c, "federation=1"), ConfigError);  // structured
  EXPECT_THROW(apply_override(c, "federation.tau"), ConfigError);
  EXPECT_THROW(apply_override(c, "federation.tau=-1"), ConfigError);
  EXPECT_THROW(apply_override(c, "federation.rounds=abc"), ConfigError);
  EXPECT_TRUE(affects_data("tasks.sample_noise"));
  EXPECT_TRUE(affects_data("population.n_clients"));
  EXPECT_FALSE(affects_data("federation.tau"));
}

TEST(Config, HashIsStableHex) {
  const std::string h = config_hash(ScenarioConfig{});
  EXPECT_EQ(h.size(), 16u);
  EXPECT_EQ(h, config_hash(ScenarioConfig{}));
  EXPECT_EQ(hex64(0x0123456789abcdefULL), "0123456789abcdef");
}

// ---------------------------------------------------------------------------
// Adapter checkpoints
// ---------------------------------------------------------------------------

TEST(AdapterFile, BitExactRoundTrip) {
  const ModelSpec spec = ModelSpec::mlp("m", 6, 10, 5, 3);
  AdapterSet set = make_adapter_set(spec, 3, 2, 11);
  GateParams g = GateParams::zeros(5);
  Rng rng(2);
  randomize_adapters(set, g, 0.7, rng);
  set.block(0).p(0, 0) = 1.0 / 3.0;  // not representable in short decimal
  std::stringstream ss;
  write_adapters(ss, set, "m", {"00ff00ff00ff00ff", 77});
  const AdapterFile f = read_adapters(ss);
  EXPECT_EQ(f.set, set);
  EXPECT_EQ(f.model_type, "m");
  EXPECT_EQ(f.header, (ArtifactHeader{"00ff00ff00ff00ff", 77}));
}

TEST(AdapterFile, RejectsMalformedInput) {
  std::stringstream none("model_type m\n");
  EXPECT_THROW(read_adapters(none), FormatError);
  const ModelSpec spec = ModelSpec::mlp("m", 6, 10, 4, 3);
  std::stringstream ss;
  write_adapters(ss, make_adapter_set(spec, 2, 2, 1), "m", {"h", 1});
  std::string text = ss.str();
  text = text.substr(0, text.size() - 4);  // drop "end\n"
  std::stringstream cut(text);
  EXPECT_THROW(read_adapters(cut), FormatError);
}

// ---------------------------------------------------------------------------
// Scenario artifact
// ---------------------------------------------------------------------------

TEST(ScenarioArtifact, RoundTripPreservesFingerprint) {
  const Scenario sc = generate_scenario(small_config());
  const Json j = scenario_to_json(sc);
  const Scenario back = scenario_from_json(Json::parse(j.dump()));
  EXPECT_EQ(dataset_fingerprint(back), dataset_fingerprint(sc));
  EXPECT_EQ(to_json(back.cfg), to_json(sc.cfg));
  EXPECT_EQ(back.clients[1].rounds, sc.clients[1].rounds);
  EXPECT_EQ(back.clients[2].tasks[1].label_map, sc.clients[2].tasks[1].label_map);
  EXPECT_EQ(back.unseen[0].test, sc.unseen[0].test);
  EXPECT_EQ(j.at("config_hash"), config_hash(sc.cfg));
}

TEST(ScenarioArtifact, DetectsTamperingAndWrongFormat) {
  const Scenario sc = generate_scenario(small_config());
  Json j = scenario_to_json(sc);
  j["clients"][0]["test"][0]["x"][0] = 123.0;
  EXPECT_THROW(scenario_from_json(j), FormatError);
  EXPECT_THROW(scenario_from_json(Json{{"format", "other"}}), FormatError);
}

// ---------------------------------------------------------------------------
// Metrics artifacts
// ---------------------------------------------------------------------------

namespace {

RunResult fake_result() {
  RunResult r;
  r.method = Method::fedmosaic;
  r.completed = true;
  r.trace.checkpoints = {1, 2};
  r.trace.acc.push_back(Matrix::from_rows({{0.5, 0.25}, {0.125, 0.75}}));
  r.trace.acc.push_back(Matrix::from_rows({{0.6, 0.2}, {0.4, 0.8}}));
  for (std::size_t k = 1; k <= 2; ++k) {
    RoundRecord rec;
    rec.round = k;
    rec.s = Matrix::from_rows({{1.0, 0.5}, {0.5, 1.0}});
    rec.w = aggregation_weights(rec.s, 0.5);
    rec.mean_loss = {1.0, 2.0};
    rec.dispatch_checksums = {1, 2};
    r.rounds.push_back(rec);
  }
  return r;
}

}  // namespace

TEST(TraceCsv, HeaderAndRoundTrip) {
  const RunResult r = fake_result();
  std::stringstream ss;
  write_trace_csv(ss, r.trace, r.method, {"abc", 5});
  const std::string text = ss.str();
  EXPECT_EQ(text.rfind("# hpfl metrics trace\n# method fedmosaic\n# config_hash abc\n# seed 5\n", 0), 0u);
  EXPECT_NE(text.find("checkpoint,evaluator,target,accuracy\n1,0,0,0.500000\n"), std::string::npos);
  const MetricsTrace back = read_trace_csv(ss);
  EXPECT_EQ(back.checkpoints, r.trace.checkpoints);
  for (std::size_t k = 0; k < 2; ++k) {
    EXPECT_LT(max_abs_diff(back.acc[k].data(), r.trace.acc[k].data()), 1e-6);
  }
  std::stringstream bad("checkpoint,evaluator,target,accuracy\n1,x\n");
  EXPECT_THROW(read_trace_csv(bad), FormatError);
}

TEST(SummaryJson, CarriesMetricsAndWeights) {
  const RunResult r = fake_result();
  const Json j = summary_to_json(r, {"abc", 5});
  EXPECT_EQ(j.at("method"), "fedmosaic");
  EXPECT_EQ(j.at("config_hash"), "abc");
  EXPECT_EQ(j.at("seed"), 5);
  EXPECT_EQ(j.at("completed"), true);
  EXPECT_DOUBLE_EQ(j.at("self").at("A_last").get<double>(), 0.7);
  EXPECT_DOUBLE_EQ(j.at("others").at("A_last").get<double>(), 0.3);
  EXPECT_NEAR(j.at("self").at("A_AUC").get<double>(), (0.625 + 0.7) / 2, 1e-15);
  ASSERT_EQ(j.at("weight_snapshots").size(), 2u);
  EXPECT_EQ(j.at("weight_snapshots")[1].at("round"), 2);
}

TEST(RoundLog, OneLinePerRoundPlusHeader) {
  std::stringstream ss;
  write_round_log(ss, fake_result(), {"abc", 5});
  std::string line;
  std::vector<Json> lines;
  while (std::getline(ss, line)) lines.push_back(Json::parse(line));
  ASSERT_EQ(lines.size(), 3u);
  EXPECT_EQ(lines[0].at("config_hash"), "abc");
  EXPECT_EQ(lines[2].at("round"), 2);
  EXPECT_EQ(lines[2].at("checksums")[1], "0000000000000002");
  EXPECT_TRUE(lines[1].contains("W"));
}

TEST(ComparisonTable, OneRowPerMethod) {
  RunResult a = fake_result();
  RunResult b = fake_result();
  b.method = Method::sft;
  b.completed = false;
  const std::string t = comparison_table({a, b}, {"abc", 5});
  EXPECT_NE(t.find("# config_hash abc"), std::string::npos);
  EXPECT_NE(t.find("fedmosaic"), std::string::npos);
  EXPECT_NE(t.find("completed"), std::string::npos);
  EXPECT_NE(t.find("partial"), std::string::npos);
}
