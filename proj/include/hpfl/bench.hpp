// Copyright (C) 2026 The hpfl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Synthetic "mini-DRAKE" benchmark: scenario generator, the federated round
// loop for the three methods (sft, vanilla_equal, fedmosaic), the Self/Others
// evaluation grid, A_last / A_AUC, and the fast-adaptation protocol.
//
// Task family. All tasks are 8-way Gaussian-mixture classification in R^16.
// A shared base prototype set is shifted per cluster; each cluster also
// relabels a fraction `label_conflict` of its classes, which is what makes
// cross-cluster knowledge harmful. Every client task (and each cluster's
// held-out unseen task) is its own random Givens rotation, plus a small
// perturbation, of the cluster prototypes: peers in a cluster share the
// labelling and the geometry up to rotation, but never the same task.
//
// Randomness flows from the master seed through named sub-streams: "data-*"
// (prototypes and samples), "init-*" (backbones, adapters), "align",
// "mask" / "noise" (sanitization) and "batch-order" (replay draws).

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "hpfl/adapter.hpp"
#include "hpfl/align.hpp"
#include "hpfl/client.hpp"
#include "hpfl/data.hpp"
#include "hpfl/linalg.hpp"
#include "hpfl/model.hpp"
#include "hpfl/network.hpp"
#include "hpfl/rng.hpp"
#include "hpfl/server.hpp"

namespace hpfl {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct ModelTypeConfig {
  std::string id;
  std::size_t width = 16;
  std::size_t depth = 8;
  friend bool operator==(const ModelTypeConfig&, const ModelTypeConfig&) = default;
};

enum class StreamMode { dynamic, static_mixed };

inline std::string to_string(StreamMode m) { return m == StreamMode::dynamic ? "dynamic" : "static"; }

inline StreamMode stream_mode_from_string(const std::string& s) {
  if (s == "dynamic") return StreamMode::dynamic;
  if (s == "static") return StreamMode::static_mixed;
  throw std::invalid_argument("unknown stream mode '" + s + "' (expected dynamic or static)");
}

enum class Method { sft, vanilla_equal, fedmosaic };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::sft: return "sft";
    case Method::vanilla_equal: return "vanilla_equal";
    case Method::fedmosaic: return "fedmosaic";
  }
  return "?";
}

inline Method method_from_string(const std::string& s) {
  if (s == "sft") return Method::sft;
  if (s == "vanilla_equal") return Method::vanilla_equal;
  if (s == "fedmosaic") return Method::fedmosaic;
  throw std::invalid_argument("unknown method '" + s + "' (expected sft, vanilla_equal or fedmosaic)");
}

struct ScenarioConfig {
  // Population.
  std::size_t n_clients = 6;
  std::size_t n_clusters = 2;
  std::vector<ModelTypeConfig> model_types{{"small", 16, 8}, {"large", 32, 12}};
  ModelTypeConfig probe{"probe", 16, 2};
  std::size_t input_dim = 16;
  std::size_t n_classes = 8;
  PretrainConfig pretrain{};

  // Task family.
  std::size_t tasks_per_client = 4;  // T
  double prototype_scale = 1.5;
  double sample_noise = 1.0;
  double cluster_shift = 0.5;
  double label_conflict = 1.0;  // fraction of classes relabelled per cluster
  double task_rotation = 0.4;   // Givens angle (radians) of each task vs its cluster
  double task_perturbation = 0.2;
  std::size_t train_per_task = 40;
  std::size_t test_per_task = 100;
  std::size_t public_samples = 512;
  std::size_t unseen_train = 40;
  std::size_t unseen_test = 200;
  StreamMode mode = StreamMode::dynamic;

  // Federation and training (Appendix E defaults where transferable).
  std::size_t rounds = 20;  // R, total over all tasks
  std::size_t local_steps = 100;
  std::size_t eval_every = 5;
  std::size_t rank = 8;
  std::size_t n_blocks = 4;
  double tau = 0.5;
  double alpha = 0.5;
  double mask_ratio = 0.4;  // N_s
  double noise_mu = 1e-4;   // mu
  std::size_t probe_every = 10;  // f
  std::size_t batch_size = 16;
  double lr_pq = 5e-2;
  double lr_other = 2e-2;
  double momentum = 0.0;
  AlignmentConfig align{};
  std::size_t fast_steps = 200;
  std::size_t fast_eval_every = 10;

  std::uint64_t seed = 0;

  std::size_t rounds_per_task() const { return rounds / tasks_per_client; }

  TrainConfig train_config() const {
    TrainConfig t;
    t.lr_pq = lr_pq;
    t.lr_other = lr_other;
    t.momentum = momentum;
    t.batch_size = batch_size;
    t.local_steps = local_steps;
    t.probe_every = probe_every;
    t.alpha = alpha;
    return t;
  }

  std::size_t cluster_of(std::size_t client) const { return client * n_clusters / n_clients; }
  std::size_t type_of(std::size_t client) const { return client % model_types.size(); }

  /// Throws std::invalid_argument naming the offending field.
  void validate() const {
    auto need = [](bool ok, const std::string& field, const std::string& why) {
      if (!ok) throw std::invalid_argument(field + ": " + why);
    };
    need(n_clients >= 1, "population.n_clients", "must be >= 1");
    need(n_clusters >= 1 && n_clusters <= n_clients, "population.n_clusters", "must be in [1, n_clients]");
    need(!model_types.empty(), "population.model_types", "at least one model type is required");
    for (std::size_t t = 0; t < model_types.size(); ++t) {
      const auto& m = model_types[t];
      const std::string f = "population.model_types." + std::to_string(t);
      need(!m.id.empty(), f + ".id", "must be non-empty");
      need(m.depth >= 2, f + ".depth", "must be >= 2");
      need(m.width >= rank, f + ".width", "must be >= rank");
      need(n_blocks <= m.depth, f + ".depth", "must be >= n_blocks");
      for (std::size_t u = 0; u < t; ++u) {
        need(model_types[u].id != m.id, f + ".id", "duplicate model type id '" + m.id + "'");
      }
    }
    need(probe.depth >= 1 && probe.width >= 1, "population.probe", "needs depth >= 1 and width >= 1");
    need(input_dim >= 2, "population.input_dim", "must be >= 2");
    need(n_classes >= 2, "population.n_classes", "must be >= 2");
    need(rank >= 1 && rank <= std::min(input_dim, n_classes), "federation.rank",
         "must be in [1, min(input_dim, n_classes)]");
    need(n_blocks >= 1, "federation.n_blocks", "must be >= 1");
    need(tasks_per_client >= 1, "tasks.tasks_per_client", "must be >= 1");
    need(rounds >= tasks_per_client && rounds % tasks_per_client == 0, "federation.rounds",
         "must be a positive multiple of tasks_per_client");
    need(eval_every >= 1 && rounds % eval_every == 0, "federation.eval_every", "must divide rounds");
    need(local_steps >= 1, "federation.local_steps", "must be >= 1");
    need(train_per_task >= rounds_per_task(), "tasks.train_per_task",
         "must be >= rounds per task so every round observes data");
    need(test_per_task >= 1, "tasks.test_per_task", "must be >= 1");
    need(public_samples > rank, "tasks.public_samples", "must exceed rank (CCA)");
    need(unseen_train >= 1 && unseen_test >= 1, "tasks.unseen_train", "unseen sets must be nonempty");
    need(label_conflict >= 0.0 && label_conflict <= 1.0, "tasks.label_conflict", "must be in [0, 1]");
    need(prototype_scale > 0.0, "tasks.prototype_scale", "must be > 0");
    need(sample_noise >= 0.0 && cluster_shift >= 0.0 && task_perturbation >= 0.0,
         "tasks.sample_noise", "noise scales must be >= 0");
    need(tau > 0.0, "federation.tau", "must be > 0");
    need(mask_ratio > 0.0 && mask_ratio <= 1.0, "federation.mask_ratio", "must be in (0, 1]");
    need(noise_mu >= 0.0, "federation.noise_mu", "must be >= 0");
    need(fast_eval_every >= 1, "federation.fast_eval_every", "must be >= 1");
    try {
      train_config().validate();
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(std::string("federation: ") + e.what());
    }
    try {
      align.validate();
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(std::string("alignment: ") + e.what());
    }
  }
};

// ---------------------------------------------------------------------------
// Scenario
// ---------------------------------------------------------------------------

struct TaskDescriptor {
  std::size_t cluster = 0;
  std::size_t task = 0;                 // index in the cluster's pool
  Matrix prototypes;                    // n_classes x input_dim
  std::vector<std::size_t> label_map;   // prototype k carries label label_map[k]
  friend bool operator==(const TaskDescriptor&, const TaskDescriptor&) = default;
};

struct ClientData {
  std::size_t cluster = 0;
  std::size_t model_type = 0;
  std::vector<TaskDescriptor> tasks;  // stream (Dynamic) order
  std::vector<Batch> train;           // per task, stream order
  std::vector<Batch> test;            // per task, stream order
  std::vector<Batch> rounds;          // samples observed in each round
  friend bool operator==(const ClientData&, const ClientData&) = default;
};

struct UnseenTask {
  TaskDescriptor task;
  Batch train;
  Batch test;
  friend bool operator==(const UnseenTask&, const UnseenTask&) = default;
};

struct Scenario {
  ScenarioConfig cfg;
  std::vector<ModelSpec> types;
  ModelSpec probe;
  std::vector<ClientData> clients;
  Batch public_data;
  std::vector<UnseenTask> unseen;  // one per cluster

  std::vector<std::size_t> type_map() const {
    std::vector<std::size_t> v;
    for (const auto& c : clients) v.push_back(c.model_type);
    return v;
  }
  std::vector<std::size_t> cluster_map() const {
    std::vector<std::size_t> v;
    for (const auto& c : clients) v.push_back(c.cluster);
    return v;
  }
};

namespace detail {

/// Product of Givens rotations by +-angle over a random pairing of the axes.
inline Matrix random_rotation(std::size_t dim, double angle, Rng& rng) {
  std::vector<std::size_t> axes(dim);
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  std::shuffle(axes.begin(), axes.end(), rng);
  Matrix r = Matrix::identity(dim);
  std::bernoulli_distribution flip(0.5);
  for (std::size_t k = 0; k + 1 < dim; k += 2) {
    const std::size_t p = axes[k], q = axes[k + 1];
    const double th = flip(rng) ? angle : -angle;
    const double c = std::cos(th), s = std::sin(th);
    Matrix g = Matrix::identity(dim);
    g(p, p) = c;
    g(q, q) = c;
    g(p, q) = -s;
    g(q, p) = s;
    r = matmul(g, r);
  }
  return r;
}

/// Cluster 0 keeps the identity labelling; every other cluster cyclically
/// relabels round(conflict * C) randomly chosen classes.
inline std::vector<std::size_t> label_map(std::size_t classes, std::size_t cluster,
                                          double conflict, Rng& rng) {
  std::vector<std::size_t> map(classes);
  std::iota(map.begin(), map.end(), std::size_t{0});
  if (cluster == 0) return map;
  const auto m = static_cast<std::size_t>(std::llround(conflict * static_cast<double>(classes)));
  if (m < 2) return map;
  std::vector<std::size_t> chosen(classes);
  std::iota(chosen.begin(), chosen.end(), std::size_t{0});
  std::shuffle(chosen.begin(), chosen.end(), rng);
  chosen.resize(m);
  for (std::size_t k = 0; k < m; ++k) map[chosen[k]] = chosen[(k + 1) % m];
  return map;
}

inline Matrix perturbed(const Matrix& base, double sd, Rng& rng) {
  Matrix out = base;
  if (sd > 0.0) out += gaussian_matrix(base.rows(), base.cols(), sd, rng);
  return out;
}

inline Batch sample_task(const TaskDescriptor& t, double noise, std::size_t n, Rng& rng) {
  Batch b = sample_mixture(t.prototypes, noise, n, rng);
  for (auto& y : b.labels) y = t.label_map[y];
  return b;
}

/// Splits `b` into `parts` consecutive chunks whose sizes differ by <= 1.
inline std::vector<Batch> split_rows(const Batch& b, std::size_t parts) {
  std::vector<Batch> out;
  const std::size_t n = b.size();
  std::size_t begin = 0;
  for (std::size_t p = 0; p < parts; ++p) {
    const std::size_t end = (n * (p + 1)) / parts;
    std::vector<std::size_t> idx(end - begin);
    std::iota(idx.begin(), idx.end(), begin);
    out.push_back(select_rows(b, idx));
    begin = end;
  }
  return out;
}

}  // namespace detail

inline std::vector<ModelSpec> model_specs(const ScenarioConfig& cfg) {
  std::vector<ModelSpec> out;
  for (const auto& m : cfg.model_types) {
    out.push_back(ModelSpec::mlp(m.id, cfg.input_dim, m.width, m.depth, cfg.n_classes));
  }
  return out;
}

inline ModelSpec probe_spec(const ScenarioConfig& cfg) {
  return ModelSpec::mlp(cfg.probe.id, cfg.input_dim, cfg.probe.width, cfg.probe.depth,
                        cfg.n_classes);
}

/// Clustered task family: a cluster fixes shifted class prototypes and a label
/// map (clusters conflict on `label_conflict` of the classes); each of a
/// client's T tasks is a distinct random rotation of its cluster's prototypes,
/// so peers share structure but never data. Deterministic in cfg (incl. seed).
inline Scenario generate_scenario(const ScenarioConfig& cfg) {
  cfg.validate();
  const std::uint64_t seed = cfg.seed;
  const std::size_t T = cfg.tasks_per_client, C = cfg.n_classes, d = cfg.input_dim;
  Scenario sc;
  sc.cfg = cfg;
  sc.types = model_specs(cfg);
  sc.probe = probe_spec(cfg);

  Rng base_rng = make_rng(seed, "data-base");
  const Matrix base = gaussian_matrix(C, d, cfg.prototype_scale, base_rng);

  // Per-cluster prototypes and labelling; every task is its own rotation.
  std::vector<Matrix> cluster_protos;
  std::vector<std::vector<std::size_t>> cluster_labels;
  for (std::size_t c = 0; c < cfg.n_clusters; ++c) {
    Rng rng = make_rng(seed, "data-cluster", c);
    cluster_protos.push_back(detail::perturbed(base, c == 0 ? 0.0 : cfg.cluster_shift, rng));
    cluster_labels.push_back(detail::label_map(C, c, cfg.label_conflict, rng));
  }
  auto make_task = [&](std::size_t c, std::size_t index, Rng& rng) {
    const Matrix rot = detail::random_rotation(d, cfg.task_rotation, rng);
    Matrix p = matmul_nt(cluster_protos[c], rot);  // rows rotated: x -> R x
    p = detail::perturbed(p, cfg.task_perturbation, rng);
    return TaskDescriptor{c, index, std::move(p), cluster_labels[c]};
  };

  const std::size_t rpt = cfg.rounds_per_task();
  for (std::size_t i = 0; i < cfg.n_clients; ++i) {
    ClientData cd;
    cd.cluster = cfg.cluster_of(i);
    cd.model_type = cfg.type_of(i);
    Rng rng = make_rng(seed, "data-client", i);
    for (std::size_t k = 0; k < T; ++k) {
      TaskDescriptor t = make_task(cd.cluster, i * T + k, rng);
      cd.train.push_back(detail::sample_task(t, cfg.sample_noise, cfg.train_per_task, rng));
      cd.test.push_back(detail::sample_task(t, cfg.sample_noise, cfg.test_per_task, rng));
      cd.tasks.push_back(std::move(t));
    }
    if (cfg.mode == StreamMode::dynamic) {
      for (const Batch& b : cd.train) {
        for (Batch& part : detail::split_rows(b, rpt)) cd.rounds.push_back(std::move(part));
      }
    } else {
      Batch all = concat(cd.train);
      std::vector<std::size_t> perm(all.size());
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      Rng order = make_rng(seed, "data-static-order", i);
      std::shuffle(perm.begin(), perm.end(), order);
      cd.rounds = detail::split_rows(select_rows(all, perm), cfg.rounds);
    }
    sc.clients.push_back(std::move(cd));
  }

  // D_p: a separate mixture, never used by any client task.
  Rng pub = make_rng(seed, "data-public");
  const Matrix pub_protos = gaussian_matrix(C, d, cfg.prototype_scale, pub);
  sc.public_data = sample_mixture(pub_protos, cfg.sample_noise, cfg.public_samples, pub);

  for (std::size_t c = 0; c < cfg.n_clusters; ++c) {
    Rng rng = make_rng(seed, "data-unseen", c);
    UnseenTask u;
    u.task = make_task(c, cfg.n_clients * T + c, rng);
    u.train = detail::sample_task(u.task, cfg.sample_noise, cfg.unseen_train, rng);
    u.test = detail::sample_task(u.task, cfg.sample_noise, cfg.unseen_test, rng);
    sc.unseen.push_back(std::move(u));
  }
  return sc;
}

/// Order-sensitive hash of every dataset in the scenario.
inline std::uint64_t dataset_fingerprint(const Scenario& sc) {
  std::uint64_t h = fnv1a("hpfl-scenario");
  auto add = [&h](const Batch& b) {
    h = fnv1a_bytes(b.inputs.data(), h);
    for (std::size_t y : b.labels) h = fnv1a(std::to_string(y) + ",", h);
  };
  for (const auto& c : sc.clients) {
    for (const auto& b : c.train) add(b);
    for (const auto& b : c.test) add(b);
    for (const auto& b : c.rounds) add(b);
  }
  add(sc.public_data);
  for (const auto& u : sc.unseen) {
    add(u.train);
    add(u.test);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Models and aligned initialisation
// ---------------------------------------------------------------------------

struct Backbones {
  std::vector<FrozenModel> types;
  FrozenModel probe;
};

inline Backbones build_backbones(const Scenario& sc) {
  std::vector<FrozenModel> types;
  for (std::size_t t = 0; t < sc.types.size(); ++t) {
    types.push_back(build_frozen(sc.types[t], derive_seed(sc.cfg.seed, "init-backbone", t),
                                 sc.cfg.pretrain));
  }
  FrozenModel probe = build_frozen(sc.probe, derive_seed(sc.cfg.seed, "init-probe"), sc.cfg.pretrain);
  return {std::move(types), std::move(probe)};
}

/// Fresh per-type adapter sets E_t (before alignment).
inline std::vector<AdapterSet> initial_adapters(const Scenario& sc) {
  std::vector<AdapterSet> out;
  for (std::size_t t = 0; t < sc.types.size(); ++t) {
    out.push_back(make_adapter_set(sc.types[t], sc.cfg.rank, sc.cfg.n_blocks,
                                   derive_seed(sc.cfg.seed, "init-adapter", t)));
  }
  return out;
}

inline AlignmentResult align_scenario(const Scenario& sc, const Backbones& bb) {
  AlignmentConfig acfg = sc.cfg.align;
  acfg.seed = derive_seed(sc.cfg.seed, "align");
  return align_all(bb.types, initial_adapters(sc), sc.public_data.inputs, acfg);
}

// ---------------------------------------------------------------------------
// Evaluation and metrics
// ---------------------------------------------------------------------------

/// Fraction of argmax-correct predictions under the gated dual forward.
inline double evaluate(const FrozenModel& model, const AdapterSet& local, const AdapterSet& global,
                       const GateParams& gates, const Batch& test) {
  if (test.empty()) throw std::invalid_argument("evaluate: empty test set");
  const Matrix logits = predict_logits(model, local, global, gates, test.inputs);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < test.size(); ++i) hit += argmax(logits.row(i)) == test.labels[i];
  return static_cast<double>(hit) / static_cast<double>(test.size());
}

struct CurveMetrics {
  double a_last = 0.0;
  double a_auc = 0.0;
};

/// A_last = final point; A_AUC = mean of the (uniformly spaced) points.
inline CurveMetrics metrics(const std::vector<double>& curve) {
  if (curve.empty()) throw std::invalid_argument("metrics: empty accuracy curve");
  const double sum = std::accumulate(curve.begin(), curve.end(), 0.0);
  return {curve.back(), sum / static_cast<double>(curve.size())};
}

struct MetricsTrace {
  std::vector<std::size_t> checkpoints;  // 1-based round numbers
  std::vector<Matrix> acc;               // acc[k](evaluator, target)

  /// Mean of the diagonal at every checkpoint.
  std::vector<double> self_curve() const {
    std::vector<double> out;
    for (const Matrix& a : acc) {
      double s = 0.0;
      for (std::size_t i = 0; i < a.rows(); ++i) s += a(i, i);
      out.push_back(s / static_cast<double>(a.rows()));
    }
    return out;
  }

  /// Unweighted mean over all (evaluator i, target j != i) pairs; equals the
  /// Self curve when N = 1.
  std::vector<double> others_curve() const {
    std::vector<double> out;
    for (const Matrix& a : acc) {
      const std::size_t n = a.rows();
      if (n == 1) {
        out.push_back(a(0, 0));
        continue;
      }
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          if (i != j) s += a(i, j);
        }
      }
      out.push_back(s / static_cast<double>(n * (n - 1)));
    }
    return out;
  }

  friend bool operator==(const MetricsTrace&, const MetricsTrace&) = default;
};

struct MethodSummary {
  CurveMetrics self;
  CurveMetrics others;
};

inline MethodSummary summarize(const MetricsTrace& trace) {
  return {metrics(trace.self_curve()), metrics(trace.others_curve())};
}

/// Mean off-diagonal weight within and across clusters.
struct ClusterWeightMass {
  double within = 0.0;
  double cross = 0.0;
};

inline ClusterWeightMass cluster_weight_mass(const Matrix& w,
                                             const std::vector<std::size_t>& cluster_of) {
  double within = 0.0, cross = 0.0;
  std::size_t nw = 0, nc = 0;
  for (std::size_t i = 0; i < w.rows(); ++i) {
    for (std::size_t j = 0; j < w.cols(); ++j) {
      if (i == j) continue;
      if (cluster_of[i] == cluster_of[j]) {
        within += w(i, j);
        ++nw;
      } else {
        cross += w(i, j);
        ++nc;
      }
    }
  }
  return {nw ? within / static_cast<double>(nw) : 0.0, nc ? cross / static_cast<double>(nc) : 0.0};
}

// ---------------------------------------------------------------------------
// Run loop
// ---------------------------------------------------------------------------

struct RoundRecord {
  std::size_t round = 0;  // 1-based
  Matrix s;               // relevance (fedmosaic only; empty otherwise)
  Matrix w;               // weights used (empty for sft)
  std::vector<Vector> transmitted;  // sanitized g~_i (empty for sft)
  std::vector<double> mean_loss;
  std::vector<std::uint64_t> dispatch_checksums;  // G_i after the round
};

struct FastAdaptCurve {
  std::size_t cluster = 0;
  std::size_t model_type = 0;
  std::vector<std::size_t> steps;
  std::vector<double> random_init;
  std::vector<double> fedmosaic_init;
};

struct RunResult {
  Method method = Method::sft;
  MetricsTrace trace;
  std::vector<RoundRecord> rounds;
  std::vector<FastAdaptCurve> fast;
  bool completed = false;
};

struct RunOptions {
  std::size_t threads = 1;
  const std::atomic<bool>* interrupt = nullptr;  // polled between rounds
  std::function<void(const RunResult&)> on_checkpoint;
  /// Observer of the client states after each round's dispatch.
  std::function<void(std::size_t round, const std::vector<ClientState>&)> on_round;
  bool fast_adaptation = true;  // fedmosaic only
};

namespace detail {

/// Runs fn(i) for i in [0, n) on up to `threads` workers; rethrows the
/// first exception. Results must not depend on scheduling.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

/// Tasks of client j visible at (1-based) round r.
inline std::size_t seen_tasks(const ScenarioConfig& cfg, std::size_t round) {
  if (cfg.mode == StreamMode::static_mixed) return cfg.tasks_per_client;
  return std::min(cfg.tasks_per_client, (round - 1) / cfg.rounds_per_task() + 1);
}

}  // namespace detail

/// Accuracy curve of a fresh client fine-tuned from `init` (L = G = init) on
/// `train`, evaluated on `test` every `eval_every` steps, step 0 included.
inline std::vector<double> fast_adaptation(const FrozenModel& model, const FrozenModel& probe,
                                           const AdapterSet& init, const Batch& train,
                                           const Batch& test, const TrainConfig& cfg,
                                           std::size_t steps, std::size_t eval_every,
                                           std::uint64_t seed) {
  ClientState c = make_client(0, 0, init, model.spec().input_dim,
                              probe.spec().layers.back().d_in * probe.spec().output_dim, seed);
  observe(c, train);
  TrainConfig quiet = cfg;
  quiet.probe_every = steps + 1;  // the probe plays no role here
  std::vector<double> curve{evaluate(model, c.local, c.global, c.gates, test)};
  for (std::size_t s = 1; s <= steps; ++s) {
    local_step(c, model, probe, s, quiet);
    c.round_probes.clear();
    if (s % eval_every == 0) curve.push_back(evaluate(model, c.local, c.global, c.gates, test));
  }
  return curve;
}

/// RELA-style initialisation for a newcomer of type `type`: the final local
/// adapters weighted by softmax(cos(g_new, g_j) / tau), where g_new is the
/// newcomer's sanitized probe gradient on its training data.
inline AdapterSet relevance_init(const std::vector<AdapterSet>& locals,
                                 const std::vector<std::size_t>& type_of,
                                 const std::vector<Vector>& transmitted, const Vector& g_new,
                                 const AdapterSet& own_init, std::size_t type, double tau) {
  const std::size_t n = locals.size();
  std::vector<AdapterSet> all = locals;
  all.push_back(own_init);
  std::vector<std::size_t> types = type_of;
  types.push_back(type);
  Matrix w = Matrix::identity(n + 1);
  double zmax = -1e300;
  std::vector<double> z(n);
  for (std::size_t j = 0; j < n; ++j) {
    z[j] = cosine(g_new, transmitted[j]).value / tau;
    zmax = std::max(zmax, z[j]);
  }
  double sum = 0.0;
  for (std::size_t j = 0; j < n; ++j) sum += std::exp(z[j] - zmax);
  w(n, n) = 0.0;
  for (std::size_t j = 0; j < n; ++j) w(n, j) = std::exp(z[j] - zmax) / sum;
  return aggregate(all, w, types)[n];
}

/// Executes the federated protocol (Alg. 1 outer loop). `start` holds one
/// (aligned) adapter set per model type.
inline RunResult run(const Scenario& sc, const Backbones& bb, const std::vector<AdapterSet>& start,
                     Method method, const RunOptions& opt = {}) {
  const ScenarioConfig& cfg = sc.cfg;
  const std::size_t n = sc.clients.size();
  if (start.size() != sc.types.size()) throw std::invalid_argument("run: one adapter set per model type");
  const TrainConfig tcfg = cfg.train_config();
  const std::size_t probe_dim = bb.probe.spec().layers.back().d_in * bb.probe.spec().output_dim;
  const SanitizationSpec mask =
      SanitizationSpec::make(probe_dim, cfg.mask_ratio, cfg.noise_mu, derive_seed(cfg.seed, "mask"));
  const std::vector<std::size_t> type_of = sc.type_map();

  std::vector<ClientState> clients;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t t = sc.clients[i].model_type;
    clients.push_back(make_client(i, t, start[t], cfg.input_dim, probe_dim, cfg.seed));
  }

  RunResult res;
  res.method = method;
  std::vector<Vector> transmitted(n);
  for (std::size_t r = 0; r < cfg.rounds; ++r) {
    RoundRecord rec;
    rec.round = r + 1;
    rec.mean_loss.assign(n, 0.0);
    detail::parallel_for(n, opt.threads, [&](std::size_t i) {
      ClientState& c = clients[i];
      const FrozenModel& model = bb.types[c.model_type];
      const Batch& arriving = sc.clients[i].rounds[r];
      const std::size_t m = arriving.size();
      std::size_t next = 0;
      double loss = 0.0;
      for (std::size_t s = 0; s < cfg.local_steps; ++s) {
        // Stream samples arrive spread evenly over the round's steps.
        std::vector<std::size_t> idx;
        while (next < m && next * cfg.local_steps / m <= s) idx.push_back(next++);
        if (!idx.empty()) observe(c, select_rows(arriving, idx));
        loss += local_step(c, model, bb.probe, s, tcfg).loss;
      }
      rec.mean_loss[i] = loss / static_cast<double>(cfg.local_steps);
      finish_round(c, cfg.alpha);
    });

    if (method != Method::sft) {
      for (std::size_t i = 0; i < n; ++i) {
        Rng noise = make_rng(cfg.seed, "noise", r * n + i);
        transmitted[i] = transmit_gradient(clients[i], mask, noise);
      }
      rec.transmitted = transmitted;
      if (method == Method::fedmosaic) {
        RelevanceState st = compute_relevance(transmitted, cfg.tau);
        rec.s = std::move(st.s);
        rec.w = std::move(st.w);
      } else {
        rec.w = uniform_weights(n);
      }
      std::vector<AdapterSet> locals;
      for (const auto& c : clients) locals.push_back(c.local);
      auto dispatch = aggregate(locals, rec.w, type_of);
      for (std::size_t i = 0; i < n; ++i) receive_global(clients[i], std::move(dispatch[i]));
    }
    for (const auto& c : clients) rec.dispatch_checksums.push_back(adapter_checksum(c.global));
    res.rounds.push_back(std::move(rec));
    if (opt.on_round) opt.on_round(r + 1, clients);

    if ((r + 1) % cfg.eval_every == 0) {
      const std::size_t seen = detail::seen_tasks(cfg, r + 1);
      std::vector<Batch> targets(n);
      for (std::size_t j = 0; j < n; ++j) {
        targets[j] = concat(std::span<const Batch>(sc.clients[j].test.data(), seen));
      }
      Matrix acc(n, n);
      detail::parallel_for(n, opt.threads, [&](std::size_t i) {
        const ClientState& c = clients[i];
        for (std::size_t j = 0; j < n; ++j) {
          acc(i, j) = evaluate(bb.types[c.model_type], c.local, c.global, c.gates, targets[j]);
        }
      });
      res.trace.checkpoints.push_back(r + 1);
      res.trace.acc.push_back(std::move(acc));
      if (opt.on_checkpoint) opt.on_checkpoint(res);
    }
    if (opt.interrupt && opt.interrupt->load()) return res;
  }

  if (method == Method::fedmosaic && opt.fast_adaptation && cfg.fast_steps > 0) {
    std::vector<AdapterSet> locals;
    for (const auto& c : clients) locals.push_back(c.local);
    std::vector<std::pair<std::size_t, std::size_t>> jobs;
    for (std::size_t u = 0; u < sc.unseen.size(); ++u) {
      for (std::size_t t = 0; t < sc.types.size(); ++t) jobs.emplace_back(u, t);
    }
    res.fast.resize(jobs.size());
    detail::parallel_for(jobs.size(), opt.threads, [&](std::size_t k) {
      const auto [u, t] = jobs[k];
      const UnseenTask& task = sc.unseen[u];
      Rng noise = make_rng(cfg.seed, "noise-newcomer", k);
      const Vector g_new = sanitize(last_layer_gradient(bb.probe, task.train), mask, noise);
      const AdapterSet warm =
          relevance_init(locals, type_of, transmitted, g_new, start[t], t, cfg.tau);
      const std::uint64_t seed = derive_seed(cfg.seed, "fast-adapt", k);
      FastAdaptCurve fc;
      fc.cluster = task.task.cluster;
      fc.model_type = t;
      for (std::size_t s = 0; s <= cfg.fast_steps; s += cfg.fast_eval_every) fc.steps.push_back(s);
      fc.random_init = fast_adaptation(bb.types[t], bb.probe, start[t], task.train, task.test,
                                       tcfg, cfg.fast_steps, cfg.fast_eval_every, seed);
      fc.fedmosaic_init = fast_adaptation(bb.types[t], bb.probe, warm, task.train, task.test, tcfg,
                                          cfg.fast_steps, cfg.fast_eval_every, seed);
      res.fast[k] = std::move(fc);
    });
  }
  res.completed = true;
  return res;
}

/// Criterion-10 statistic: the first step at which `warm` reaches the final
/// value of `cold` (nullopt if never).
inline std::optional<std::size_t> steps_to_reach(const std::vector<std::size_t>& steps,
                                                 const std::vector<double>& warm,
                                                 const std::vector<double>& cold) {
  if (cold.empty() || warm.size() != steps.size()) throw std::invalid_argument("steps_to_reach: curve shape");
  for (std::size_t k = 0; k < warm.size(); ++k) {
    if (warm[k] >= cold.back()) return steps[k];
  }
  return std::nullopt;
}

}  // namespace hpfl
