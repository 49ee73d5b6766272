// Copyright (C) 2026 The hpfl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Per-client state machine (Alg. 1, client side): append-only episodic memory,
// memory-only training of the gated dual adapter, and the RELA gradient probe.
//
// Each round a client takes `local_steps` optimizer steps on batches drawn
// uniformly from memory; every `probe_every` steps (step index within the
// round) it also records the probe model's last-layer gradient on that batch.
// At the end of the round the mean probe gradient enters the EMA (Eq. 2) and
// the EMA is sanitized once for transmission (Eq. 3).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "hpfl/adapter.hpp"
#include "hpfl/data.hpp"
#include "hpfl/linalg.hpp"
#include "hpfl/model.hpp"
#include "hpfl/network.hpp"
#include "hpfl/rng.hpp"

namespace hpfl {

// ---------------------------------------------------------------------------
// Gradient sanitization (Eqs. 2-3)
// ---------------------------------------------------------------------------

/// Eq. 2: (1 - alpha) * ghat + alpha * g.
inline Vector update_ema(const Vector& ghat, const Vector& g, double alpha) {
  if (ghat.size() != g.size()) {
    throw std::invalid_argument("update_ema: dimension mismatch " + std::to_string(ghat.size()) +
                                " vs " + std::to_string(g.size()));
  }
  if (!(alpha > 0.0 && alpha <= 1.0)) throw std::invalid_argument("update_ema: alpha not in (0, 1]");
  Vector out(g.size());
  for (std::size_t k = 0; k < g.size(); ++k) out[k] = (1.0 - alpha) * ghat[k] + alpha * g[k];
  return out;
}

/// Shared subsample mask M plus noise scale mu. One instance per run; every
/// client uses the same mask ("Set Random subsample indices", Alg. 1).
struct SanitizationSpec {
  std::vector<std::uint8_t> mask;
  double mu = 1e-4;
  double ratio = 0.4;

  std::size_t dim() const noexcept { return mask.size(); }
  std::size_t popcount() const noexcept {
    return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
  }

  /// Mask with exactly round(ratio * dim) ones at positions drawn from `seed`.
  static SanitizationSpec make(std::size_t dim, double ratio, double mu, std::uint64_t seed) {
    if (dim == 0) throw std::invalid_argument("SanitizationSpec: zero dimension");
    if (!(ratio > 0.0 && ratio <= 1.0)) {
      throw std::invalid_argument("SanitizationSpec: subsample ratio N_s must be in (0, 1]");
    }
    if (!(mu >= 0.0)) throw std::invalid_argument("SanitizationSpec: mu must be >= 0");
    const auto keep = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(dim)));
    std::vector<std::size_t> idx(dim);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng(derive_seed(seed, "mask"));
    std::shuffle(idx.begin(), idx.end(), rng);
    SanitizationSpec s{std::vector<std::uint8_t>(dim, 0), mu, ratio};
    for (std::size_t k = 0; k < keep; ++k) s.mask[idx[k]] = 1;
    return s;
  }
};

/// Eq. 3: M ⊙ (ghat + mu * eps), eps ~ N(0, I). Draws dim() normals from
/// `rng` whatever the mask, so the stream position does not depend on it.
inline Vector sanitize(const Vector& ghat, const SanitizationSpec& spec, Rng& rng) {
  if (ghat.size() != spec.dim()) {
    throw std::invalid_argument("sanitize: gradient has " + std::to_string(ghat.size()) +
                                " entries but the mask has " + std::to_string(spec.dim()));
  }
  std::normal_distribution<double> eps(0.0, 1.0);
  Vector out(ghat.size());
  for (std::size_t k = 0; k < out.size(); ++k) {
    const double noisy = ghat[k] + spec.mu * eps(rng);
    out[k] = spec.mask[k] ? noisy : 0.0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Client state
// ---------------------------------------------------------------------------

struct TrainConfig {
  double lr_pq = 5e-2;     // P, Q
  double lr_other = 2e-2;  // conventional A, B and beta
  double momentum = 0.0;   // 0 = plain SGD
  std::size_t batch_size = 16;
  std::size_t local_steps = 100;
  std::size_t probe_every = 10;  // f
  double alpha = 0.5;            // EMA ratio

  void validate() const {
    if (!(lr_pq > 0.0) || !(lr_other > 0.0)) throw std::invalid_argument("learning rates must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("momentum must be in [0, 1)");
    if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
    if (probe_every == 0) throw std::invalid_argument("probe_every (f) must be >= 1");
    if (!(alpha > 0.0 && alpha <= 1.0)) throw std::invalid_argument("alpha must be in (0, 1]");
  }
};

struct ClientState {
  std::size_t id = 0;
  std::size_t model_type = 0;
  AdapterSet local;   // L_i, trained
  AdapterSet global;  // G_i, frozen during local training
  GateParams gates;
  Batch memory;       // append-only episodic memory
  Vector ema;         // ghat_i, probe-gradient dimension
  bool has_evidence = false;  // set once a probe gradient has entered the EMA
  std::vector<Vector> round_probes;
  AdapterGrads velocity;  // momentum buffers (empty when momentum == 0)
  Rng batch_rng;
};

/// Client with L_i = G_i = `init` (Alg. 1), beta = 0, zero EMA.
inline ClientState make_client(std::size_t id, std::size_t model_type, const AdapterSet& init,
                               std::size_t input_dim, std::size_t probe_dim, std::uint64_t seed) {
  ClientState c;
  c.id = id;
  c.model_type = model_type;
  c.local = init;
  c.global = init;
  c.gates = GateParams::zeros(init.depth());
  c.memory = Batch{Matrix(0, input_dim), {}};
  c.ema.assign(probe_dim, 0.0);
  c.batch_rng = Rng(derive_seed(seed, "batch-order", id));
  return c;
}

/// Appends every row of `samples` to memory, preserving order.
inline void observe(ClientState& c, const Batch& samples) {
  if (samples.empty()) return;
  if (samples.inputs.cols() != c.memory.inputs.cols()) {
    throw std::invalid_argument("observe: sample width " + std::to_string(samples.inputs.cols()) +
                                " != memory width " + std::to_string(c.memory.inputs.cols()));
  }
  c.memory.inputs.append_rows(samples.inputs);
  c.memory.labels.insert(c.memory.labels.end(), samples.labels.begin(), samples.labels.end());
}

/// Uniform draw of min(B, |M|) distinct memory rows.
inline Batch draw_batch(const Batch& memory, std::size_t batch_size, Rng& rng) {
  if (memory.empty()) throw std::invalid_argument("draw_batch: empty memory");
  const std::size_t n = memory.size();
  const std::size_t b = std::min(batch_size, n);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t k = 0; k < b; ++k) {
    std::uniform_int_distribution<std::size_t> pick(k, n - 1);
    std::swap(idx[k], idx[pick(rng)]);
  }
  idx.resize(b);
  return select_rows(memory, idx);
}

namespace detail {

// p -= lr * v, with v = momentum * v + g (v == g when momentum == 0).
inline void sgd_update(std::span<double> param, std::span<const double> grad, double lr,
                       double momentum, std::span<double> velocity) {
  for (std::size_t k = 0; k < param.size(); ++k) {
    double step = grad[k];
    if (momentum > 0.0) {
      velocity[k] = momentum * velocity[k] + grad[k];
      step = velocity[k];
    }
    param[k] -= lr * step;
  }
}

inline AdapterGrads zero_grads_like(const AdapterSet& set) {
  AdapterGrads g;
  for (const auto& ad : set.layers) g.layers.push_back(zero_grad(ad));
  g.dbeta.assign(set.depth(), 0.0);
  return g;
}

}  // namespace detail

/// Applies `grads` to the trainable parameters of `local`/`gates`.
inline void apply_gradients(AdapterSet& local, GateParams& gates, const AdapterGrads& grads,
                            const TrainConfig& cfg, AdapterGrads& velocity) {
  if (cfg.momentum > 0.0 && velocity.layers.empty()) velocity = detail::zero_grads_like(local);
  const double mom = cfg.momentum;
  for (std::size_t l = 0; l < local.depth(); ++l) {
    if (auto* pq = std::get_if<PqLoraAdapter>(&local.layers[l])) {
      const auto& g = std::get<PqGrad>(grads.layers[l]);
      std::span<double> vp, vq;
      if (mom > 0.0) {
        auto& v = std::get<PqGrad>(velocity.layers[l]);
        vp = v.dp.data();
        vq = v.dq;
      }
      detail::sgd_update(pq->p.data(), g.dp.data(), cfg.lr_pq, mom, vp);
      detail::sgd_update(pq->q, g.dq, cfg.lr_pq, mom, vq);
    } else {
      auto& lo = std::get<LoraAdapter>(local.layers[l]);
      const auto& g = std::get<LoraGrad>(grads.layers[l]);
      std::span<double> va, vb;
      if (mom > 0.0) {
        auto& v = std::get<LoraGrad>(velocity.layers[l]);
        va = v.da.data();
        vb = v.db.data();
      }
      detail::sgd_update(lo.a.data(), g.da.data(), cfg.lr_other, mom, va);
      detail::sgd_update(lo.b.data(), g.db.data(), cfg.lr_other, mom, vb);
    }
  }
  std::span<double> vbeta;
  if (mom > 0.0) vbeta = velocity.dbeta;
  detail::sgd_update(gates.beta, grads.dbeta, cfg.lr_other, mom, vbeta);
}

struct StepResult {
  double loss = 0.0;
  std::optional<Vector> probe_grad;  // set when step_index % f == 0
};

/// One memory-only optimizer step of the gated dual adapter (Alg. 1 inner
/// loop). Only L_i and beta change; G_i, the backbone and the probe do not.
inline StepResult local_step(ClientState& c, const FrozenModel& model, const FrozenModel& probe,
                             std::size_t step_index, const TrainConfig& cfg,
                             ForwardMode mode = ForwardMode::gated_dual) {
  if (c.memory.empty()) {
    throw std::invalid_argument("local_step: client " + std::to_string(c.id) + " has empty memory");
  }
  const Batch batch = draw_batch(c.memory, cfg.batch_size, c.batch_rng);
  const LossAndGrads lg = loss_and_grads(model, c.local, c.global, c.gates, batch, mode);
  apply_gradients(c.local, c.gates, lg.grads, cfg, c.velocity);
  StepResult out{lg.loss, std::nullopt};
  if (step_index % cfg.probe_every == 0) {
    out.probe_grad = last_layer_gradient(probe, batch);
    c.round_probes.push_back(*out.probe_grad);
  }
  return out;
}

/// End of round: folds the mean of this round's probe gradients into the
/// EMA (Eq. 2). Rounds without probes leave the EMA unchanged.
inline void finish_round(ClientState& c, double alpha) {
  if (c.round_probes.empty()) return;
  Vector mean(c.ema.size(), 0.0);
  for (const Vector& g : c.round_probes) {
    if (g.size() != mean.size()) throw std::invalid_argument("finish_round: probe dimension");
    for (std::size_t k = 0; k < g.size(); ++k) mean[k] += g[k];
  }
  for (double& v : mean) v /= static_cast<double>(c.round_probes.size());
  c.ema = update_ema(c.ema, mean, alpha);
  c.has_evidence = true;
  c.round_probes.clear();
}

/// What the client transmits: the sanitized EMA, or the zero vector before
/// any probe has been taken (read by the server as "no evidence").
inline Vector transmit_gradient(const ClientState& c, const SanitizationSpec& spec, Rng& noise_rng) {
  if (!c.has_evidence) return Vector(spec.dim(), 0.0);
  return sanitize(c.ema, spec, noise_rng);
}

/// Replaces G_i; the new global must have the same layout as L_i.
inline void receive_global(ClientState& c, AdapterSet g_new) {
  require_compatible(c.local, g_new, "receive_global (client " + std::to_string(c.id) + ")");
  c.global = std::move(g_new);
}

}  // namespace hpfl
