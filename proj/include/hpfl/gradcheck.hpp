// Copyright (C) 2026 The hpfl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Central finite-difference oracle for loss_and_grads. Each trainable tensor
// (P, Q, conventional A, B, and the gate vector) is compared as a whole:
//
//   err = ||g_analytic - g_fd|| / max(||g_analytic||, ||g_fd||, floor)
//
// Norm-wise relative error avoids the blow-up of per-entry relative error on
// entries that are zero up to rounding.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <variant>
#include <vector>

#include "hpfl/network.hpp"

namespace hpfl {

struct TensorCheck {
  std::string name;  // e.g. "layer3.P"
  double rel_error = 0.0;
  double analytic_norm = 0.0;
};

struct GradCheckReport {
  std::vector<TensorCheck> tensors;

  double max_error() const {
    double m = 0.0;
    for (const auto& t : tensors) m = std::max(m, t.rel_error);
    return m;
  }
};

namespace detail {

inline double normwise_error(const Vector& a, const Vector& b, double floor) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    diff += (a[k] - b[k]) * (a[k] - b[k]);
    na += a[k] * a[k];
    nb += b[k] * b[k];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

}  // namespace detail

/// Compares every trainable gradient of `local`/`gates` against central
/// differences with step `h`. `local` and `gates` are copied and perturbed;
/// the caller's values are not modified.
inline GradCheckReport check_gradients(const FrozenModel& model, const AdapterSet& local,
                                       const AdapterSet& global, const GateParams& gates,
                                       const Batch& batch, ForwardMode mode, double h = 1e-4,
                                       double floor = 1e-8) {
  const LossAndGrads analytic = loss_and_grads(model, local, global, gates, batch, mode);
  AdapterSet work = local;
  GateParams work_gates = gates;
  const auto loss = [&] {
    return loss_and_grads(model, work, global, work_gates, batch, mode).loss;
  };
  // Central difference over every entry of `param`, in place.
  const auto fd = [&](std::span<double> param) {
    Vector g(param.size());
    for (std::size_t k = 0; k < param.size(); ++k) {
      const double saved = param[k];
      param[k] = saved + h;
      const double up = loss();
      param[k] = saved - h;
      const double down = loss();
      param[k] = saved;
      g[k] = (up - down) / (2.0 * h);
    }
    return g;
  };
  const auto record = [&](std::string name, const Vector& got, const Vector& want,
                          GradCheckReport& rep) {
    double n = 0.0;
    for (double v : got) n += v * v;
    rep.tensors.push_back({std::move(name), detail::normwise_error(got, want, floor), std::sqrt(n)});
  };

  GradCheckReport rep;
  const bool local_trainable = mode == ForwardMode::local_only || mode == ForwardMode::gated_dual;
  if (local_trainable) {
    for (std::size_t l = 0; l < work.depth(); ++l) {
      const std::string prefix = "layer" + std::to_string(l + 1) + ".";
      if (auto* pq = std::get_if<PqLoraAdapter>(&work.layers[l])) {
        const auto& g = std::get<PqGrad>(analytic.grads.layers[l]);
        record(prefix + "P", g.dp.values(), fd(pq->p.data()), rep);
        record(prefix + "Q", g.dq, fd(pq->q), rep);
      } else {
        auto& lo = std::get<LoraAdapter>(work.layers[l]);
        const auto& g = std::get<LoraGrad>(analytic.grads.layers[l]);
        record(prefix + "A", g.da.values(), fd(lo.a.data()), rep);
        record(prefix + "B", g.db.values(), fd(lo.b.data()), rep);
      }
    }
  }
  if (mode == ForwardMode::gated_dual) {
    record("beta", analytic.grads.dbeta, fd(work_gates.beta), rep);
  }
  return rep;
}

/// Fills every trainable and frozen adapter entry with N(0, scale^2) draws
/// (A/B of PQ layers stay orthonormal) and the gates with N(0, 1), so the
/// gradient check exercises non-degenerate points.
inline void randomize_adapters(AdapterSet& set, GateParams& gates, double scale, Rng& rng) {
  std::normal_distribution<double> n(0.0, scale);
  for (auto& ad : set.layers) {
    if (auto* pq = std::get_if<PqLoraAdapter>(&ad)) {
      for (double& v : pq->p.data()) v = n(rng);
      for (double& v : pq->q) v = n(rng);
    } else {
      auto& lo = std::get<LoraAdapter>(ad);
      for (double& v : lo.a.data()) v = n(rng);
      for (double& v : lo.b.data()) v = n(rng);
    }
  }
  std::normal_distribution<double> g(0.0, 1.0);
  for (double& b : gates.beta) b = g(rng);
}

}  // namespace hpfl
