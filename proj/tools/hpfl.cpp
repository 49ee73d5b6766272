// Copyright (C) 2026 The hpfl Authors
// SPDX-License-Identifier: Apache-2.0

// hpfl — operator surface of the heterogeneous-PFL simulator.
//
//   hpfl generate --config FILE [--seed N] [--set k=v]... --out DIR [--force]
//   hpfl align    --scenario FILE [--out DIR] [--force]
//   hpfl run      --scenario FILE [--methods a,b] --out DIR [--seed N] [--set k=v]...
//   hpfl check    --suite theorem1|theorem2|gradients|alignment|rela [--seed N] [--out FILE]
//
// Exit codes: 0 success, 1 failure (failed property, runtime error, or an
// interrupted run), 2 usage or configuration error.

#include <atomic>
#include <csignal>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "hpfl/bench.hpp"
#include "hpfl/checks.hpp"
#include "hpfl/config.hpp"
#include "hpfl/serialize.hpp"

namespace fs = std::filesystem;
using namespace hpfl;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

/// Bad flags, missing inputs, or outputs that would be clobbered.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::atomic<bool> g_interrupted{false};

extern "C" void on_sigint(int) { g_interrupted.store(true); }

// ---------------------------------------------------------------------------
// File helpers
// ---------------------------------------------------------------------------

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError(path.string() + ": cannot open");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes via a temporary and a rename so readers (and an interrupt) never
/// observe a half-written artifact.
void write_file(const fs::path& path, const std::string& content) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error(tmp.string() + ": cannot write");
    out << content;
    if (!out.flush()) throw std::runtime_error(tmp.string() + ": write failed");
  }
  fs::rename(tmp, path);
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error(dir.string() + ": " + ec.message());
}

std::string file_stem_for(const std::string& id) {
  std::string s = id;
  for (char& c : s) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_') c = '_';
  }
  return s;
}

fs::path checkpoint_path(const fs::path& dir, const ScenarioConfig& cfg, std::size_t t) {
  return dir / ("adapters_" + std::to_string(t) + "_" + file_stem_for(cfg.model_types[t].id) + ".txt");
}

ScenarioConfig apply_overrides(ScenarioConfig cfg, const std::vector<std::string>& sets) {
  for (const auto& s : sets) cfg = apply_override(cfg, s);
  return cfg;
}

std::string override_key(const std::string& assignment) {
  return assignment.substr(0, assignment.find('='));
}

Scenario load_scenario(const fs::path& path) {
  const std::string text = read_file(path);
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw UsageError(path.string() + ": " + e.what());
  }
  try {
    return scenario_from_json(j);
  } catch (const std::exception& e) {
    throw UsageError(path.string() + ": " + e.what());
  }
}

ArtifactHeader header_of(const ScenarioConfig& cfg) { return {config_hash(cfg), cfg.seed}; }

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

struct GenerateArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> sets;
  std::string out;
  bool force = false;
};

int cmd_generate(const GenerateArgs& a) {
  ScenarioConfig cfg = apply_overrides(load_config(a.config), a.sets);
  if (a.seed) cfg.seed = *a.seed;
  const fs::path dir(a.out);
  const fs::path file = dir / "scenario.json";
  if (fs::exists(file) && !a.force) {
    throw UsageError(file.string() + " exists (use --force to overwrite)");
  }
  ensure_dir(dir);
  const Scenario sc = generate_scenario(cfg);
  write_file(file, scenario_to_json(sc).dump() + "\n");
  std::cout << "scenario " << file.string() << '\n'
            << "config_hash " << config_hash(cfg) << '\n'
            << "seed " << cfg.seed << '\n'
            << "fingerprint " << hex64(dataset_fingerprint(sc)) << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// align
// ---------------------------------------------------------------------------

struct AlignArgs {
  std::string scenario;
  std::string out;
  bool force = false;
};

std::string alignment_report(const AlignmentResult& res, const ScenarioConfig& cfg) {
  std::ostringstream os;
  const ArtifactHeader hdr = header_of(cfg);
  os << "# hpfl alignment report\n# config_hash " << hdr.config_hash << "\n# seed " << hdr.seed
     << "\n# pivot " << cfg.model_types[res.pivot].id << '\n';
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-10s %5s %6s %6s %12s %12s %8s %9s %9s %10s %s\n", "type",
                "block", "l_piv", "l_oth", "gap_before", "gap_after", "ratio", "cka_pre",
                "cka_post", "orth_err_A", "status");
  os << buf;
  for (const auto& l : res.layers) {
    const double ratio = l.a_gap_before > 0.0 ? l.a_gap_after / l.a_gap_before : 0.0;
    std::snprintf(buf, sizeof buf, "%-10s %5zu %6zu %6zu %12.6f %12.6f %8.4f %9.4f %9.4f %10.2e %s\n",
                  cfg.model_types[l.type].id.c_str(), l.block + 1, l.pivot_layer, l.other_layer,
                  l.a_gap_before, l.a_gap_after, ratio, l.b_cka_before, l.b_cka_after,
                  l.a_orth_error, l.a_gap_after <= l.a_gap_before ? "ok" : "WORSENED");
    os << buf;
  }
  if (res.layers.empty()) os << "(single model type: checkpoint equals fresh initialisation)\n";
  return os.str();
}

int cmd_align(const AlignArgs& a) {
  const fs::path scen(a.scenario);
  const Scenario sc = load_scenario(scen);
  const fs::path dir = a.out.empty() ? scen.parent_path() : fs::path(a.out);
  bool all_present = true;
  for (std::size_t t = 0; t < sc.types.size(); ++t) {
    all_present = all_present && fs::exists(checkpoint_path(dir, sc.cfg, t));
  }
  if (all_present && !a.force) {
    std::cout << "notice: alignment checkpoints already present in " << dir.string()
              << "; skipping (use --force to recompute)\n";
    return kExitOk;
  }
  ensure_dir(dir);
  const Backbones bb = build_backbones(sc);
  const AlignmentResult res = align_scenario(sc, bb);
  const ArtifactHeader hdr = header_of(sc.cfg);
  for (std::size_t t = 0; t < sc.types.size(); ++t) {
    std::ostringstream os;
    write_adapters(os, res.sets[t], sc.cfg.model_types[t].id, hdr);
    write_file(checkpoint_path(dir, sc.cfg, t), os.str());
    std::cout << "checkpoint " << checkpoint_path(dir, sc.cfg, t).string() << '\n';
  }
  const std::string report = alignment_report(res, sc.cfg);
  write_file(dir / "alignment_report.txt", report);
  std::cout << report;
  return kExitOk;
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

struct RunArgs {
  std::string scenario;
  std::string methods = "sft,vanilla_equal,fedmosaic";
  std::string out;
  std::string checkpoints;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> sets;
  std::size_t threads = 1;
  bool force = false;
};

std::vector<Method> parse_methods(const std::string& list) {
  std::vector<Method> out;
  std::set<std::string> seen;
  std::stringstream ss(list);
  for (std::string m; std::getline(ss, m, ',');) {
    if (m.empty()) continue;
    if (!seen.insert(m).second) throw UsageError("--methods: '" + m + "' listed twice");
    try {
      out.push_back(method_from_string(m));
    } catch (const std::exception&) {
      throw UsageError("--methods: unknown method '" + m + "' (expected sft|vanilla_equal|fedmosaic)");
    }
  }
  if (out.empty()) throw UsageError("--methods: empty method list");
  return out;
}

/// Overrides that invalidate the scenario's alignment checkpoints.
bool affects_alignment(const std::string& key) {
  return key == "seed" || key.starts_with("alignment.") || key.starts_with("pretrain.") ||
         key == "federation.rank" || key == "federation.n_blocks";
}

/// Aligned start adapters: the scenario's checkpoints when they match,
/// otherwise computed in-process (with a notice).
std::vector<AdapterSet> start_adapters(const Scenario& original, const Scenario& sc,
                                       const Backbones& bb, const fs::path& dir, bool reusable) {
  const ArtifactHeader want = header_of(original.cfg);
  std::vector<AdapterSet> sets;
  std::string why;
  for (std::size_t t = 0; t < sc.types.size() && reusable; ++t) {
    const fs::path p = checkpoint_path(dir, sc.cfg, t);
    std::ifstream in(p);
    if (!in) {
      why = "no checkpoint " + p.string();
      break;
    }
    AdapterFile f = read_adapters(in);
    if (!(f.header == want) || f.model_type != sc.cfg.model_types[t].id) {
      why = p.string() + " belongs to another scenario";
      break;
    }
    require_attachable(f.set, sc.types[t]);
    sets.push_back(std::move(f.set));
  }
  if (reusable && sets.size() == sc.types.size()) {
    std::cout << "alignment: loaded " << sets.size() << " checkpoint(s) from " << dir.string() << '\n';
    return sets;
  }
  if (!reusable) why = "overrides change the alignment inputs";
  std::cout << "notice: aligning in-process (" << why << ")\n";
  return align_scenario(sc, bb).sets;
}

int cmd_run(const RunArgs& a) {
  const std::vector<Method> methods = parse_methods(a.methods);
  if (a.threads == 0) throw UsageError("--threads must be >= 1");
  for (const auto& s : a.sets) {
    if (affects_data(override_key(s))) {
      throw UsageError("--set " + s + ": '" + override_key(s) +
                       "' shapes the datasets; regenerate the scenario instead");
    }
  }
  const fs::path scen(a.scenario);
  const Scenario original = load_scenario(scen);
  Scenario sc = original;
  sc.cfg = apply_overrides(sc.cfg, a.sets);
  if (a.seed) sc.cfg.seed = *a.seed;
  bool reusable = sc.cfg.seed == original.cfg.seed;
  for (const auto& s : a.sets) reusable = reusable && !affects_alignment(override_key(s));

  const fs::path out(a.out);
  if (!a.force) {
    for (Method m : methods) {
      const fs::path p = out / ("trace_" + to_string(m) + ".csv");
      if (fs::exists(p)) throw UsageError(p.string() + " exists (use --force to overwrite)");
    }
  }
  ensure_dir(out);
  const ArtifactHeader hdr = header_of(sc.cfg);
  std::cout << "config_hash " << hdr.config_hash << "\nseed " << hdr.seed << '\n';

  const Backbones bb = build_backbones(sc);
  const fs::path ck_dir = a.checkpoints.empty() ? scen.parent_path() : fs::path(a.checkpoints);
  const std::vector<AdapterSet> start = start_adapters(original, sc, bb, ck_dir, reusable);

  const auto flush = [&](const RunResult& r) {
    const std::string m = to_string(r.method);
    std::ostringstream trace, rounds;
    write_trace_csv(trace, r.trace, r.method, hdr);
    write_round_log(rounds, r, hdr);
    write_file(out / ("trace_" + m + ".csv"), trace.str());
    write_file(out / ("summary_" + m + ".json"), summary_to_json(r, hdr).dump(2) + "\n");
    write_file(out / ("rounds_" + m + ".jsonl"), rounds.str());
  };

  std::signal(SIGINT, on_sigint);
  std::vector<RunResult> results;
  bool all_done = true;
  for (Method m : methods) {
    if (g_interrupted.load()) {
      all_done = false;
      break;
    }
    std::cout << "method " << to_string(m) << " ..." << std::flush;
    RunOptions opt;
    opt.threads = a.threads;
    opt.interrupt = &g_interrupted;
    opt.on_checkpoint = flush;
    RunResult r = run(sc, bb, start, m, opt);
    flush(r);
    const MethodSummary s = r.trace.acc.empty() ? MethodSummary{} : summarize(r.trace);
    std::cout << (r.completed ? " done" : " interrupted") << "  Self A_AUC " << fixed6(s.self.a_auc)
              << "  Others A_AUC " << fixed6(s.others.a_auc) << '\n';
    all_done = all_done && r.completed;
    results.push_back(std::move(r));
  }
  const std::string table = comparison_table(results, hdr);
  write_file(out / "comparison.txt", table);
  std::cout << table;
  if (!all_done) {
    std::cerr << "hpfl: interrupted; partial results flushed to " << out.string() << '\n';
    return kExitFailure;
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// check
// ---------------------------------------------------------------------------

struct CheckArgs {
  std::string suite;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_check(const CheckArgs& a) {
  const SuiteReport rep = run_suite(a.suite, a.seed);
  const std::string text = format_report(rep);
  std::cout << text;
  if (!a.out.empty()) write_file(a.out, text);
  return rep.passed() ? kExitOk : kExitFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hpfl: heterogeneous personalized federated learning simulator (PQ-LoRA + RELA)"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "Generate a scenario artifact from a config file");
  g->add_option("--config", gen.config, "Scenario config (JSON)")->required()->check(CLI::ExistingFile);
  g->add_option("--seed", gen.seed, "Master seed (overrides the config's seed)");
  g->add_option("--set", gen.sets, "Override key=value (repeatable)");
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_flag("--force", gen.force, "Overwrite an existing scenario");

  AlignArgs al;
  auto* l = app.add_subcommand("align", "Align adapters across model types; write checkpoints");
  l->add_option("--scenario", al.scenario, "scenario.json from `generate`")->required()->check(CLI::ExistingFile);
  l->add_option("--out", al.out, "Checkpoint directory (default: the scenario's directory)");
  l->add_flag("--force", al.force, "Recompute even if checkpoints exist");

  RunArgs ra;
  auto* r = app.add_subcommand("run", "Run methods on a scenario; write traces and summaries");
  r->add_option("--scenario", ra.scenario, "scenario.json from `generate`")->required()->check(CLI::ExistingFile);
  r->add_option("--methods", ra.methods, "Comma-separated: sft,vanilla_equal,fedmosaic")->capture_default_str();
  r->add_option("--out", ra.out, "Output directory")->required();
  r->add_option("--checkpoints", ra.checkpoints, "Alignment checkpoint directory (default: the scenario's)");
  r->add_option("--seed", ra.seed, "Master seed for init/noise/batch streams (default: the scenario's)");
  r->add_option("--set", ra.sets, "Override key=value (repeatable; not population.* / tasks.*)");
  r->add_option("--threads", ra.threads, "Worker threads (results do not depend on it)")->capture_default_str();
  r->add_flag("--force", ra.force, "Overwrite existing traces");

  CheckArgs ca;
  auto* c = app.add_subcommand("check", "Run a self-contained property suite");
  c->add_option("--suite", ca.suite, "Suite name")
      ->required()
      ->check(CLI::IsMember(suite_names()));
  c->add_option("--seed", ca.seed, "Fixture seed")->capture_default_str();
  c->add_option("--out", ca.out, "Also write the report to this file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*g) return cmd_generate(gen);
    if (*l) return cmd_align(al);
    if (*r) return cmd_run(ra);
    if (*c) return cmd_check(ca);
  } catch (const UsageError& e) {
    std::cerr << "hpfl: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "hpfl: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "hpfl: error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}
