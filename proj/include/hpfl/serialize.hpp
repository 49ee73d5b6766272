// Copyright (C) 2026 The hpfl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// On-disk artifacts.
//
//  * Adapter checkpoints: a line-oriented named-tensor container. Tensors are
//    ordered by layer, then A/B/P/Q, each with a shape header; values are C99
//    hexfloats so a round trip is bit-exact.
//  * Scenario artifacts: JSON holding the config, its hash, the dataset
//    fingerprint and every dataset (doubles round-trip exactly through
//    nlohmann's shortest representation).
//  * Metrics: CSV traces (checkpoint, evaluator, target, accuracy), JSON
//    summaries and JSONL round records.
//
// Every artifact starts with the config hash and master seed.

#include <cinttypes>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "hpfl/adapter.hpp"
#include "hpfl/bench.hpp"
#include "hpfl/config.hpp"

namespace hpfl {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ArtifactHeader {
  std::string config_hash;
  std::uint64_t seed = 0;
  friend bool operator==(const ArtifactHeader&, const ArtifactHeader&) = default;
};

// ---------------------------------------------------------------------------
// Named-tensor adapter container
// ---------------------------------------------------------------------------

namespace detail {

inline std::string hexfloat(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

inline void write_tensor(std::ostream& os, const std::string& name, const Matrix& m) {
  os << "tensor " << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) os << (j ? " " : "") << hexfloat(m(i, j));
    os << '\n';
  }
}

inline double parse_double(const std::string& tok, std::size_t line) {
  char* end = nullptr;
  const double v = std::strtod(tok.c_str(), &end);
  if (end == tok.c_str() || *end != '\0') {
    throw FormatError("line " + std::to_string(line) + ": bad number '" + tok + "'");
  }
  return v;
}

class LineReader {
 public:
  explicit LineReader(std::istream& is) : is_(is) {}

  /// Next non-comment line split into tokens; empty at end of input.
  std::vector<std::string> next() {
    std::string s;
    while (std::getline(is_, s)) {
      ++line_;
      if (s.empty() || s[0] == '#') continue;
      std::vector<std::string> toks;
      std::istringstream ls(s);
      for (std::string t; ls >> t;) toks.push_back(t);
      return toks;
    }
    return {};
  }

  std::size_t line() const { return line_; }

  [[noreturn]] void fail(const std::string& what) const {
    throw FormatError("line " + std::to_string(line_) + ": " + what);
  }

 private:
  std::istream& is_;
  std::size_t line_ = 0;
};

inline Matrix read_tensor(LineReader& in, const std::string& want_name) {
  const auto head = in.next();
  if (head.size() != 4 || head[0] != "tensor") in.fail("expected 'tensor " + want_name + " R C'");
  if (head[1] != want_name) in.fail("expected tensor " + want_name + ", found " + head[1]);
  const std::size_t rows = std::stoul(head[2]), cols = std::stoul(head[3]);
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    const auto toks = in.next();
    if (toks.size() != cols) in.fail("tensor " + want_name + ": expected " + std::to_string(cols) + " values");
    for (std::size_t j = 0; j < cols; ++j) m(i, j) = parse_double(toks[j], in.line());
  }
  return m;
}

}  // namespace detail

inline void write_adapters(std::ostream& os, const AdapterSet& set, const std::string& model_type,
                           const ArtifactHeader& hdr) {
  os << "# hpfl-adapters v1\n";
  os << "# config_hash " << hdr.config_hash << "\n# seed " << hdr.seed << '\n';
  os << "model_type " << model_type << '\n';
  os << "depth " << set.depth() << '\n';
  os << "pq_layers";
  for (std::size_t l : set.pq_layers) os << ' ' << l;
  os << '\n';
  for (std::size_t l = 0; l < set.depth(); ++l) {
    const std::string base = "layer" + std::to_string(l + 1) + ".";
    if (const auto* pq = std::get_if<PqLoraAdapter>(&set.layers[l])) {
      detail::write_tensor(os, base + "A", pq->a);
      detail::write_tensor(os, base + "B", pq->b);
      detail::write_tensor(os, base + "P", pq->p);
      detail::write_tensor(os, base + "Q", Matrix(1, pq->q.size(), pq->q));
    } else {
      const auto& lo = std::get<LoraAdapter>(set.layers[l]);
      detail::write_tensor(os, base + "A", lo.a);
      detail::write_tensor(os, base + "B", lo.b);
    }
  }
  os << "end\n";
}

struct AdapterFile {
  ArtifactHeader header;
  std::string model_type;
  AdapterSet set;
};

inline AdapterFile read_adapters(std::istream& is) {
  AdapterFile f;
  // Header comments carry hash and seed.
  std::string first;
  std::vector<std::string> preamble;
  while (is.peek() == '#') {
    std::getline(is, first);
    preamble.push_back(first);
  }
  if (preamble.empty() || preamble[0] != "# hpfl-adapters v1") {
    throw FormatError("not an hpfl adapter file (missing '# hpfl-adapters v1')");
  }
  for (const auto& line : preamble) {
    std::istringstream ls(line);
    std::string hash, key, value;
    ls >> hash >> key >> value;
    if (key == "config_hash") f.header.config_hash = value;
    if (key == "seed") f.header.seed = std::stoull(value);
  }
  detail::LineReader in(is);
  auto toks = in.next();
  if (toks.size() != 2 || toks[0] != "model_type") in.fail("expected 'model_type ID'");
  f.model_type = toks[1];
  toks = in.next();
  if (toks.size() != 2 || toks[0] != "depth") in.fail("expected 'depth N'");
  const std::size_t depth = std::stoul(toks[1]);
  toks = in.next();
  if (toks.empty() || toks[0] != "pq_layers") in.fail("expected 'pq_layers ...'");
  for (std::size_t k = 1; k < toks.size(); ++k) f.set.pq_layers.push_back(std::stoul(toks[k]));
  for (std::size_t l = 0; l < depth; ++l) {
    const std::string base = "layer" + std::to_string(l + 1) + ".";
    const bool pq = std::find(f.set.pq_layers.begin(), f.set.pq_layers.end(), l + 1) !=
                    f.set.pq_layers.end();
    Matrix a = detail::read_tensor(in, base + "A");
    Matrix b = detail::read_tensor(in, base + "B");
    if (pq) {
      Matrix p = detail::read_tensor(in, base + "P");
      Matrix q = detail::read_tensor(in, base + "Q");
      f.set.layers.emplace_back(PqLoraAdapter{std::move(a), std::move(b), std::move(p), q.values()});
    } else {
      f.set.layers.emplace_back(LoraAdapter{std::move(a), std::move(b)});
    }
  }
  toks = in.next();
  if (toks.size() != 1 || toks[0] != "end") in.fail("expected 'end'");
  try {
    f.set.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("adapter file: ") + e.what());
  }
  return f;
}

// ---------------------------------------------------------------------------
// Scenario artifact
// ---------------------------------------------------------------------------

namespace detail {

inline Json batch_to_json(const Batch& b) {
  return Json{{"rows", b.inputs.rows()},
              {"cols", b.inputs.cols()},
              {"x", b.inputs.values()},
              {"y", b.labels}};
}

inline Batch batch_from_json(const Json& j) {
  const auto rows = j.at("rows").get<std::size_t>();
  const auto cols = j.at("cols").get<std::size_t>();
  Batch b{Matrix(rows, cols, j.at("x").get<std::vector<double>>()),
          j.at("y").get<std::vector<std::size_t>>()};
  if (b.labels.size() != rows) throw FormatError("batch: label count != rows");
  return b;
}

inline Json task_to_json(const TaskDescriptor& t) {
  return Json{{"cluster", t.cluster},
              {"task", t.task},
              {"label_map", t.label_map},
              {"prototypes", batch_to_json(Batch{t.prototypes, std::vector<std::size_t>(t.prototypes.rows())})}};
}

inline TaskDescriptor task_from_json(const Json& j) {
  return {j.at("cluster").get<std::size_t>(), j.at("task").get<std::size_t>(),
          batch_from_json(j.at("prototypes")).inputs,
          j.at("label_map").get<std::vector<std::size_t>>()};
}

template <class F>
Json array_of(const std::vector<Batch>& v, F f) {
  Json a = Json::array();
  for (const auto& x : v) a.push_back(f(x));
  return a;
}

inline std::vector<Batch> batches_from_json(const Json& j) {
  std::vector<Batch> out;
  for (const auto& x : j) out.push_back(batch_from_json(x));
  return out;
}

}  // namespace detail

inline Json scenario_to_json(const Scenario& sc) {
  Json clients = Json::array();
  for (const auto& c : sc.clients) {
    Json tasks = Json::array();
    for (const auto& t : c.tasks) tasks.push_back(detail::task_to_json(t));
    clients.push_back(Json{{"cluster", c.cluster},
                           {"model_type", c.model_type},
                           {"tasks", tasks},
                           {"train", detail::array_of(c.train, detail::batch_to_json)},
                           {"test", detail::array_of(c.test, detail::batch_to_json)},
                           {"rounds", detail::array_of(c.rounds, detail::batch_to_json)}});
  }
  Json unseen = Json::array();
  for (const auto& u : sc.unseen) {
    unseen.push_back(Json{{"task", detail::task_to_json(u.task)},
                          {"train", detail::batch_to_json(u.train)},
                          {"test", detail::batch_to_json(u.test)}});
  }
  return Json{{"format", "hpfl-scenario/1"},
              {"config_hash", config_hash(sc.cfg)},
              {"seed", sc.cfg.seed},
              {"fingerprint", hex64(dataset_fingerprint(sc))},
              {"config", to_json(sc.cfg)},
              {"clients", clients},
              {"public", detail::batch_to_json(sc.public_data)},
              {"unseen", unseen}};
}

/// Inverse of scenario_to_json; verifies the stored fingerprint.
inline Scenario scenario_from_json(const Json& j) {
  if (j.value("format", "") != "hpfl-scenario/1") {
    throw FormatError("not an hpfl scenario artifact (format != hpfl-scenario/1)");
  }
  Scenario sc;
  try {
    sc.cfg = config_from_json(j.at("config"));
    sc.cfg.validate();
    sc.types = model_specs(sc.cfg);
    sc.probe = probe_spec(sc.cfg);
    for (const auto& jc : j.at("clients")) {
      ClientData c;
      c.cluster = jc.at("cluster").get<std::size_t>();
      c.model_type = jc.at("model_type").get<std::size_t>();
      for (const auto& t : jc.at("tasks")) c.tasks.push_back(detail::task_from_json(t));
      c.train = detail::batches_from_json(jc.at("train"));
      c.test = detail::batches_from_json(jc.at("test"));
      c.rounds = detail::batches_from_json(jc.at("rounds"));
      sc.clients.push_back(std::move(c));
    }
    sc.public_data = detail::batch_from_json(j.at("public"));
    for (const auto& ju : j.at("unseen")) {
      sc.unseen.push_back(UnseenTask{detail::task_from_json(ju.at("task")),
                                     detail::batch_from_json(ju.at("train")),
                                     detail::batch_from_json(ju.at("test"))});
    }
  } catch (const Json::exception& e) {
    throw FormatError(std::string("scenario artifact: ") + e.what());
  }
  const std::string fp = hex64(dataset_fingerprint(sc));
  if (fp != j.at("fingerprint").get<std::string>()) {
    throw FormatError("scenario artifact: dataset fingerprint mismatch (stored " +
                      j.at("fingerprint").get<std::string>() + ", computed " + fp + ")");
  }
  if (sc.clients.size() != sc.cfg.n_clients || sc.unseen.size() != sc.cfg.n_clusters) {
    throw FormatError("scenario artifact: client or unseen-task count disagrees with config");
  }
  return sc;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

inline std::string fixed6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline void write_trace_csv(std::ostream& os, const MetricsTrace& trace, Method method,
                            const ArtifactHeader& hdr) {
  os << "# hpfl metrics trace\n# method " << to_string(method) << "\n# config_hash "
     << hdr.config_hash << "\n# seed " << hdr.seed << '\n';
  os << "checkpoint,evaluator,target,accuracy\n";
  for (std::size_t k = 0; k < trace.acc.size(); ++k) {
    const Matrix& a = trace.acc[k];
    for (std::size_t i = 0; i < a.rows(); ++i) {
      for (std::size_t j = 0; j < a.cols(); ++j) {
        os << trace.checkpoints[k] << ',' << i << ',' << j << ',' << fixed6(a(i, j)) << '\n';
      }
    }
  }
}

/// Inverse of write_trace_csv (accuracies at the written precision).
inline MetricsTrace read_trace_csv(std::istream& is) {
  MetricsTrace t;
  std::string line;
  std::size_t n = 0;
  std::vector<std::tuple<std::size_t, std::size_t, std::size_t, double>> rows;
  bool header = false;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      if (line != "checkpoint,evaluator,target,accuracy") throw FormatError("trace: bad CSV header");
      header = true;
      continue;
    }
    std::size_t ck, i, j;
    double acc;
    if (std::sscanf(line.c_str(), "%zu,%zu,%zu,%lf", &ck, &i, &j, &acc) != 4) {
      throw FormatError("trace: bad row '" + line + "'");
    }
    n = std::max(n, std::max(i, j) + 1);
    rows.emplace_back(ck, i, j, acc);
  }
  for (const auto& [ck, i, j, acc] : rows) {
    if (t.checkpoints.empty() || t.checkpoints.back() != ck) {
      t.checkpoints.push_back(ck);
      t.acc.emplace_back(n, n);
    }
    t.acc.back()(i, j) = acc;
  }
  return t;
}

inline Json matrix_to_json(const Matrix& m) {
  Json rows = Json::array();
  for (std::size_t i = 0; i < m.rows(); ++i) {
    Json r = Json::array();
    for (std::size_t j = 0; j < m.cols(); ++j) r.push_back(m(i, j));
    rows.push_back(r);
  }
  return rows;
}

inline Json summary_to_json(const RunResult& res, const ArtifactHeader& hdr) {
  const MethodSummary s = res.trace.acc.empty() ? MethodSummary{} : summarize(res.trace);
  Json snapshots = Json::array();
  for (const std::size_t ck : res.trace.checkpoints) {
    const RoundRecord& rec = res.rounds.at(ck - 1);
    if (!rec.w.rows()) continue;
    snapshots.push_back(Json{{"round", ck}, {"W", matrix_to_json(rec.w)}});
  }
  Json fast = Json::array();
  for (const auto& f : res.fast) {
    fast.push_back(Json{{"cluster", f.cluster},
                        {"model_type", f.model_type},
                        {"steps", f.steps},
                        {"random_init", f.random_init},
                        {"fedmosaic_init", f.fedmosaic_init}});
  }
  return Json{{"method", to_string(res.method)},
              {"config_hash", hdr.config_hash},
              {"seed", hdr.seed},
              {"completed", res.completed},
              {"checkpoints", res.trace.checkpoints},
              {"self", {{"A_last", s.self.a_last}, {"A_AUC", s.self.a_auc}}},
              {"others", {{"A_last", s.others.a_last}, {"A_AUC", s.others.a_auc}}},
              {"self_curve", res.trace.self_curve()},
              {"others_curve", res.trace.others_curve()},
              {"weight_snapshots", snapshots},
              {"fast_adaptation", fast}};
}

/// One JSON object per round: S, W, mean losses and dispatch checksums.
inline void write_round_log(std::ostream& os, const RunResult& res, const ArtifactHeader& hdr) {
  os << Json{{"config_hash", hdr.config_hash}, {"seed", hdr.seed}, {"method", to_string(res.method)}}.dump()
     << '\n';
  for (const auto& rec : res.rounds) {
    Json sums = Json::array();
    for (auto h : rec.dispatch_checksums) sums.push_back(hex64(h));
    Json line{{"round", rec.round}, {"mean_loss", rec.mean_loss}, {"checksums", sums}};
    if (rec.s.rows()) line["S"] = matrix_to_json(rec.s);
    if (rec.w.rows()) line["W"] = matrix_to_json(rec.w);
    os << line.dump() << '\n';
  }
}

/// Table-3-style comparison: methods x {Self, Others} x {A_last, A_AUC}.
inline std::string comparison_table(const std::vector<RunResult>& results, const ArtifactHeader& hdr) {
  std::ostringstream os;
  os << "# hpfl comparison\n# config_hash " << hdr.config_hash << "\n# seed " << hdr.seed << '\n';
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-14s %12s %12s %12s %12s %s\n", "method", "Self A_last",
                "Self A_AUC", "Oth A_last", "Oth A_AUC", "status");
  os << buf;
  for (const auto& r : results) {
    const MethodSummary s = r.trace.acc.empty() ? MethodSummary{} : summarize(r.trace);
    std::snprintf(buf, sizeof buf, "%-14s %12.4f %12.4f %12.4f %12.4f %s\n",
                  to_string(r.method).c_str(), s.self.a_last, s.self.a_auc, s.others.a_last,
                  s.others.a_auc, r.completed ? "completed" : "partial");
    os << buf;
  }
  return os.str();
}

}  // namespace hpfl
