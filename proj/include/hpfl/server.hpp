// Copyright (C) 2026 The hpfl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Server side of a round (Eq. 4): the relevance matrix S_ij = cos(g~_i, g~_j),
// row-softmax weights W = softmax(S / tau), and per-client customised global
// adapters G_i = sum_j w_ij L_j.
//
// Only P and Q cross model types (matched by block ordinal). Conventional
// LoRA layers are averaged within the client's own type cohort with the RELA
// weights renormalised over that cohort. Frozen A, B of PQ layers are the
// client's own (aligned, per type) and beta never leaves the client.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <limits>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "hpfl/adapter.hpp"
#include "hpfl/linalg.hpp"
#include "hpfl/rng.hpp"

namespace hpfl {

struct RelevanceState {
  Matrix s;                       // N x N cosine similarities
  Matrix w;                       // N x N row-stochastic weights
  double tau = 0.5;
  std::vector<bool> degenerate;   // client sent a zero vector ("no evidence")
};

/// Pairwise cosine of the transmitted gradients. A zero vector has S = 0
/// against everyone else and 1 on its own diagonal.
inline Matrix relevance_matrix(const std::vector<Vector>& grads,
                               std::vector<bool>* degenerate = nullptr) {
  const std::size_t n = grads.size();
  if (n == 0) throw std::invalid_argument("relevance_matrix: no clients");
  for (const Vector& g : grads) {
    if (g.size() != grads.front().size()) {
      throw std::invalid_argument("relevance_matrix: gradient dimensions differ (" +
                                  std::to_string(g.size()) + " vs " +
                                  std::to_string(grads.front().size()) + ")");
    }
  }
  std::vector<bool> deg(n);
  for (std::size_t i = 0; i < n; ++i) deg[i] = norm2(grads[i]) == 0.0;
  Matrix s(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    s(i, i) = 1.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      const double c = cosine(grads[i], grads[j]).value;  // 0 when either is degenerate
      s(i, j) = c;
      s(j, i) = c;
    }
  }
  if (degenerate) *degenerate = std::move(deg);
  return s;
}

/// Row-wise softmax of S / tau (Eq. 4). Rows of degenerate clients are uniform.
inline Matrix aggregation_weights(const Matrix& s, double tau,
                                  const std::vector<bool>& degenerate = {}) {
  if (!(tau > 0.0)) throw std::invalid_argument("aggregation_weights: tau must be > 0");
  if (s.rows() != s.cols()) throw std::invalid_argument("aggregation_weights: S must be square");
  const std::size_t n = s.rows();
  if (!degenerate.empty() && degenerate.size() != n) {
    throw std::invalid_argument("aggregation_weights: degenerate flag count");
  }
  Matrix w(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!degenerate.empty() && degenerate[i]) {
      for (std::size_t j = 0; j < n; ++j) w(i, j) = 1.0 / static_cast<double>(n);
      continue;
    }
    double zmax = s(i, 0) / tau;
    for (std::size_t j = 1; j < n; ++j) zmax = std::max(zmax, s(i, j) / tau);
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      w(i, j) = std::exp(s(i, j) / tau - zmax);
      sum += w(i, j);
    }
    for (std::size_t j = 0; j < n; ++j) w(i, j) /= sum;
  }
  return w;
}

/// Full RELA weighting step on the transmitted gradients.
inline RelevanceState compute_relevance(const std::vector<Vector>& grads, double tau) {
  RelevanceState st;
  st.tau = tau;
  st.s = relevance_matrix(grads, &st.degenerate);
  st.w = aggregation_weights(st.s, tau, st.degenerate);
  return st;
}

inline Matrix uniform_weights(std::size_t n) {
  return Matrix(n, n, 1.0 / static_cast<double>(n));
}

/// Largest |row sum - 1| and whether every entry is non-negative.
inline double row_stochastic_error(const Matrix& w) {
  double err = 0.0;
  for (std::size_t i = 0; i < w.rows(); ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < w.cols(); ++j) {
      if (w(i, j) < 0.0) return std::numeric_limits<double>::infinity();
      sum += w(i, j);
    }
    err = std::max(err, std::abs(sum - 1.0));
  }
  return err;
}

/// G_i for every client i. `locals[j]` is L_j; `type_of[j]` its model type.
inline std::vector<AdapterSet> aggregate(const std::vector<AdapterSet>& locals, const Matrix& w,
                                         const std::vector<std::size_t>& type_of) {
  const std::size_t n = locals.size();
  if (n == 0) throw std::invalid_argument("aggregate: no clients");
  if (w.rows() != n || w.cols() != n || type_of.size() != n) {
    throw std::invalid_argument("aggregate: " + std::to_string(n) + " clients but W is " +
                                std::to_string(w.rows()) + "x" + std::to_string(w.cols()) +
                                " and the type map has " + std::to_string(type_of.size()) +
                                " entries");
  }
  if (row_stochastic_error(w) > 1e-9) throw std::invalid_argument("aggregate: W not row-stochastic");
  const std::size_t nb = locals.front().n_blocks();
  for (std::size_t j = 0; j < n; ++j) {
    if (locals[j].n_blocks() != nb) throw std::invalid_argument("aggregate: clients disagree on N_B");
    for (std::size_t k = 0; k < nb; ++k) {
      if (locals[j].block(k).rank() != locals.front().block(k).rank()) {
        throw std::invalid_argument("aggregate: clients disagree on the PQ rank");
      }
    }
  }
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t i = 0; i < j; ++i) {
      if (type_of[i] == type_of[j]) {
        require_compatible(locals[i], locals[j], "aggregate (same-type clients)");
      }
    }
  }

  std::vector<AdapterSet> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    AdapterSet g = locals[i];  // keeps i's frozen A, B and layout
    // P, Q: every client, matched by block ordinal.
    for (std::size_t k = 0; k < nb; ++k) {
      PqLoraAdapter& dst = g.block(k);
      dst.p = Matrix(dst.p.rows(), dst.p.cols());
      std::fill(dst.q.begin(), dst.q.end(), 0.0);
      for (std::size_t j = 0; j < n; ++j) {
        const PqLoraAdapter& src = locals[j].block(k);
        dst.p.axpy(w(i, j), src.p);
        for (std::size_t c = 0; c < dst.q.size(); ++c) dst.q[c] += w(i, j) * src.q[c];
      }
    }
    // Conventional layers: same-type cohort with renormalised weights. A
    // cohort carrying no weight at all keeps the client's own layers.
    double cohort = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (type_of[j] == type_of[i]) cohort += w(i, j);
    }
    if (cohort <= 0.0) {
      out.push_back(std::move(g));
      continue;
    }
    for (std::size_t l = 0; l < g.depth(); ++l) {
      auto* dst = std::get_if<LoraAdapter>(&g.layers[l]);
      if (!dst) continue;
      dst->a = Matrix(dst->a.rows(), dst->a.cols());
      dst->b = Matrix(dst->b.rows(), dst->b.cols());
      for (std::size_t j = 0; j < n; ++j) {
        if (type_of[j] != type_of[i]) continue;
        const auto& src = std::get<LoraAdapter>(locals[j].layers[l]);
        const double wj = w(i, j) / cohort;
        dst->a.axpy(wj, src.a);
        dst->b.axpy(wj, src.b);
      }
    }
    out.push_back(std::move(g));
  }
  return out;
}

/// Vanilla baseline (Table 7): aggregate with uniform weights.
inline std::vector<AdapterSet> aggregate_equal(const std::vector<AdapterSet>& locals,
                                               const std::vector<std::size_t>& type_of) {
  return aggregate(locals, uniform_weights(locals.size()), type_of);
}

/// Order-sensitive checksum of an adapter set, for round records.
inline std::uint64_t adapter_checksum(const AdapterSet& set) {
  std::uint64_t h = fnv1a("adapter-set");
  for (const auto& ad : set.layers) {
    std::visit(
        [&](const auto& a) {
          using T = std::decay_t<decltype(a)>;
          h = fnv1a_bytes(a.a.data(), h);
          h = fnv1a_bytes(a.b.data(), h);
          if constexpr (std::is_same_v<T, PqLoraAdapter>) {
            h = fnv1a_bytes(a.p.data(), h);
            h = fnv1a_bytes(a.q, h);
          }
        },
        ad);
  }
  return h;
}

}  // namespace hpfl
