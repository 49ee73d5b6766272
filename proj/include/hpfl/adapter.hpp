// Copyright (C) 2026 The hpfl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Low-rank adapters.
//
// A conventional LoRA layer adds B * A * h with both factors trainable.
// A PQ-LoRA layer adds B * (P * A * h + Q) with A (r x d_in) and B (d_out x r)
// frozen and orthonormal, and only the r x r matrix P and r-vector Q trained.
// P and Q do not depend on the hidden sizes, which is what lets models of
// different widths exchange them.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "hpfl/linalg.hpp"
#include "hpfl/model.hpp"
#include "hpfl/rng.hpp"

namespace hpfl {

struct LoraAdapter {
  Matrix a;  // r x d_in
  Matrix b;  // d_out x r

  std::size_t rank() const noexcept { return a.rows(); }
  friend bool operator==(const LoraAdapter&, const LoraAdapter&) = default;
};

struct PqLoraAdapter {
  Matrix a;  // r x d_in, frozen
  Matrix b;  // d_out x r, frozen
  Matrix p;  // r x r
  Vector q;  // r

  std::size_t rank() const noexcept { return a.rows(); }
  friend bool operator==(const PqLoraAdapter&, const PqLoraAdapter&) = default;
};

using LayerAdapter = std::variant<LoraAdapter, PqLoraAdapter>;

inline double sigmoid(double x) noexcept {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// Per-layer gate logits; the mixing weight of the global adapter is sigmoid(beta).
struct GateParams {
  Vector beta;

  static GateParams zeros(std::size_t depth) { return {Vector(depth, 0.0)}; }
  double mix(std::size_t layer) const { return sigmoid(beta.at(layer)); }
  friend bool operator==(const GateParams&, const GateParams&) = default;
};

/// Attachment layers (1-based) of the PQ-LoRA blocks:
/// I_k = k * floor(depth / n_blocks) for k < n_blocks, I_{n_blocks} = depth.
inline std::vector<std::size_t> block_indices(std::size_t depth, std::size_t n_blocks) {
  if (n_blocks == 0) throw std::invalid_argument("block_indices: n_blocks must be >= 1");
  if (n_blocks > depth) {
    throw std::invalid_argument("block_indices: n_blocks " + std::to_string(n_blocks) +
                                " exceeds depth " + std::to_string(depth));
  }
  const std::size_t stride = depth / n_blocks;
  std::vector<std::size_t> out;
  out.reserve(n_blocks);
  for (std::size_t k = 1; k < n_blocks; ++k) out.push_back(k * stride);
  out.push_back(depth);
  return out;
}

/// Per-layer adapters of one model plus the 1-based PQ-LoRA attachment layers.
struct AdapterSet {
  std::vector<LayerAdapter> layers;
  std::vector<std::size_t> pq_layers;

  std::size_t depth() const noexcept { return layers.size(); }
  std::size_t n_blocks() const noexcept { return pq_layers.size(); }

  bool is_pq(std::size_t layer0) const {
    return std::holds_alternative<PqLoraAdapter>(layers.at(layer0));
  }

  /// PQ adapter of block k (0-based ordinal).
  PqLoraAdapter& block(std::size_t k) { return std::get<PqLoraAdapter>(layers.at(pq_layers.at(k) - 1)); }
  const PqLoraAdapter& block(std::size_t k) const {
    return std::get<PqLoraAdapter>(layers.at(pq_layers.at(k) - 1));
  }

  void validate() const {
    if (pq_layers.empty()) throw std::invalid_argument("AdapterSet: no PQ-LoRA layers");
    for (std::size_t k = 0; k < pq_layers.size(); ++k) {
      if (k > 0 && pq_layers[k] <= pq_layers[k - 1]) {
        throw std::invalid_argument("AdapterSet: PQ layer indices must be strictly increasing");
      }
    }
    if (pq_layers.back() != layers.size()) {
      throw std::invalid_argument("AdapterSet: last PQ layer must be the final layer");
    }
    std::size_t pq_count = 0;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const bool listed =
          std::find(pq_layers.begin(), pq_layers.end(), l + 1) != pq_layers.end();
      if (listed != is_pq(l)) {
        throw std::invalid_argument("AdapterSet: layer " + std::to_string(l + 1) +
                                    " kind disagrees with pq_layers");
      }
      pq_count += is_pq(l) ? 1 : 0;
    }
    if (pq_count != pq_layers.size()) throw std::invalid_argument("AdapterSet: PQ count mismatch");
  }

  friend bool operator==(const AdapterSet&, const AdapterSet&) = default;
};

inline std::size_t adapter_rank(const LayerAdapter& ad) {
  return std::visit([](const auto& a) { return a.rank(); }, ad);
}

inline LayerShape adapter_shape(const LayerAdapter& ad) {
  return std::visit([](const auto& a) { return LayerShape{a.a.cols(), a.b.rows()}; }, ad);
}

/// Throws unless `a` and `b` have the same layer kinds and tensor shapes.
inline void require_compatible(const AdapterSet& a, const AdapterSet& b, const std::string& what) {
  if (a.depth() != b.depth() || a.pq_layers != b.pq_layers) {
    throw std::invalid_argument(what + ": adapter sets have different layouts");
  }
  for (std::size_t l = 0; l < a.depth(); ++l) {
    if (a.layers[l].index() != b.layers[l].index() ||
        !(adapter_shape(a.layers[l]) == adapter_shape(b.layers[l])) ||
        adapter_rank(a.layers[l]) != adapter_rank(b.layers[l])) {
      throw std::invalid_argument(what + ": layer " + std::to_string(l + 1) + " does not match");
    }
  }
}

/// Throws unless `set` can be attached to a model with `spec`.
inline void require_attachable(const AdapterSet& set, const ModelSpec& spec) {
  if (set.depth() != spec.depth()) {
    throw std::invalid_argument("adapter set depth " + std::to_string(set.depth()) +
                                " != model depth " + std::to_string(spec.depth()));
  }
  for (std::size_t l = 0; l < set.depth(); ++l) {
    const LayerShape s = adapter_shape(set.layers[l]);
    if (!(s == spec.layers[l])) {
      throw std::invalid_argument("adapter at layer " + std::to_string(l + 1) + " is " +
                                  std::to_string(s.d_out) + "x" + std::to_string(s.d_in) +
                                  " but the layer is " + std::to_string(spec.layers[l].d_out) +
                                  "x" + std::to_string(spec.layers[l].d_in));
    }
  }
}

// ---------------------------------------------------------------------------
// Initialisation
// ---------------------------------------------------------------------------

/// PQ-LoRA with orthonormal rows of A, orthonormal columns of B, and P = Q = 0.
inline PqLoraAdapter init_orthogonal(std::size_t r, std::size_t d_in, std::size_t d_out,
                                     std::uint64_t seed) {
  if (r == 0 || r > std::min(d_in, d_out)) {
    throw std::invalid_argument("init_orthogonal: rank " + std::to_string(r) +
                                " must be in [1, min(d_in=" + std::to_string(d_in) +
                                ", d_out=" + std::to_string(d_out) + ")]");
  }
  Rng rng(derive_seed(seed, "pq-lora-init"));
  PqLoraAdapter ad;
  ad.a = nearest_orthogonal(gaussian_matrix(r, d_in, 1.0, rng), Orientation::rows).matrix;
  ad.b = nearest_orthogonal(gaussian_matrix(d_out, r, 1.0, rng), Orientation::columns).matrix;
  ad.p = Matrix(r, r);
  ad.q = Vector(r, 0.0);
  return ad;
}

/// Conventional LoRA with A ~ N(0, 1/d_in) and B = 0 (zero initial update).
inline LoraAdapter init_lora(std::size_t r, std::size_t d_in, std::size_t d_out,
                             std::uint64_t seed) {
  if (r == 0 || r > std::min(d_in, d_out)) {
    throw std::invalid_argument("init_lora: rank " + std::to_string(r) + " too large for " +
                                std::to_string(d_out) + "x" + std::to_string(d_in));
  }
  Rng rng(derive_seed(seed, "lora-init"));
  return {gaussian_matrix(r, d_in, 1.0 / std::sqrt(double(d_in)), rng), Matrix(d_out, r)};
}

/// Adapters for every layer of `spec`: PQ-LoRA at the block attachment
/// layers, conventional LoRA elsewhere.
inline AdapterSet make_adapter_set(const ModelSpec& spec, std::size_t r, std::size_t n_blocks,
                                   std::uint64_t seed) {
  AdapterSet set;
  set.pq_layers = block_indices(spec.depth(), n_blocks);
  for (std::size_t l = 0; l < spec.depth(); ++l) {
    const auto& sh = spec.layers[l];
    const bool pq =
        std::find(set.pq_layers.begin(), set.pq_layers.end(), l + 1) != set.pq_layers.end();
    if (pq) {
      set.layers.emplace_back(init_orthogonal(r, sh.d_in, sh.d_out, derive_seed(seed, "layer", l)));
    } else {
      set.layers.emplace_back(init_lora(r, sh.d_in, sh.d_out, derive_seed(seed, "layer", l)));
    }
  }
  return set;
}

// ---------------------------------------------------------------------------
// Algebra
// ---------------------------------------------------------------------------

/// h_out = W_p h + B (P A h + Q)
inline Vector pq_forward(const Matrix& w_p, const PqLoraAdapter& ad, std::span<const double> h) {
  if (w_p.cols() != ad.a.cols() || w_p.rows() != ad.b.rows() || h.size() != w_p.cols() ||
      ad.p.rows() != ad.rank() || ad.p.cols() != ad.rank() || ad.q.size() != ad.rank() ||
      ad.b.cols() != ad.rank()) {
    throw std::invalid_argument("pq_forward: dimension mismatch");
  }
  Vector mid = matvec(ad.p, matvec(ad.a, h));
  for (std::size_t i = 0; i < mid.size(); ++i) mid[i] += ad.q[i];
  Vector out = matvec(w_p, h);
  const Vector delta = matvec(ad.b, mid);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += delta[i];
  return out;
}

/// base + (1 - sigmoid(beta)) h_local + sigmoid(beta) h_global, evaluated as
/// base + h_local + sigmoid(beta) (h_global - h_local) so equal inputs pass
/// through bit-exactly.
inline Vector gated_combine(std::span<const double> base, std::span<const double> h_local,
                            std::span<const double> h_global, double beta) {
  if (base.size() != h_local.size() || base.size() != h_global.size()) {
    throw std::invalid_argument("gated_combine: dimension mismatch");
  }
  const double g = sigmoid(beta);
  Vector out(base.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = base[i] + (h_local[i] + g * (h_global[i] - h_local[i]));
  }
  return out;
}

struct DeltaWeight {
  Matrix weight;  // B P A, d_out x d_in
  Vector bias;    // B Q
};

inline DeltaWeight delta_weight(const PqLoraAdapter& ad) {
  return {matmul(matmul(ad.b, ad.p), ad.a), matvec(ad.b, ad.q)};
}

inline Matrix delta_weight(const LoraAdapter& ad) { return matmul(ad.b, ad.a); }

/// Dimension of span{ b_i a_j^T : i, j < r }, the space of weight updates a
/// PQ-LoRA layer can express with A, B frozen. Numerical rank at tol 1e-8.
inline std::size_t span_dimension(const PqLoraAdapter& ad, double tol = 1e-8) {
  const std::size_t r = ad.rank();
  const std::size_t d_out = ad.b.rows();
  const std::size_t d_in = ad.a.cols();
  // One row per outer product so the SVD runs on the short side.
  Matrix outer(r * r, d_out * d_in);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < r; ++j) {
      auto row = outer.row(i * r + j);
      for (std::size_t o = 0; o < d_out; ++o)
        for (std::size_t c = 0; c < d_in; ++c) row[o * d_in + c] = ad.b(o, i) * ad.a(j, c);
    }
  }
  return numerical_rank(outer, tol);
}

}  // namespace hpfl
