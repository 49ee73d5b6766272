// Copyright (C) 2026 The hpfl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// One-shot pre-federation alignment of PQ-LoRA adapters across model types.
//
// The pivot (smallest model) is frozen. For every other type and every block
// ordinal k, the other model's PQ layer is matched to the pivot's:
//
//   A_j <- argmin mean ||A_i h_i - A_j h_j||^2 + lambda ||A_j A_j^T - I||_F^2
//          (minibatch gradient descent), then A_j <- U V^T          (App. D)
//   B_j <- pinv(Pi_j)^T Pi_i^T B_i with (Pi_i, Pi_j) = CCA(H_i, H_j) (§4.2.2)
//   P_j, Q_j <- P_i, Q_i                                  (shared initialisation)
//
// All features are captured with every adapter scaled to zero, matching
// Alg. 2's forward_with_lora_scaled(x, scale=0). H for the B step is the
// layer's frozen pre-activation output (the space B writes into); see the
// decisions ledger for why the literal B output cannot be used.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "hpfl/adapter.hpp"
#include "hpfl/linalg.hpp"
#include "hpfl/model.hpp"
#include "hpfl/network.hpp"
#include "hpfl/rng.hpp"

namespace hpfl {

struct AlignmentConfig {
  double lambda = 0.5;           // orthogonality-regularisation weight
  double lr = 0.05;              // step size of the A descent
  std::size_t epochs = 30;       // passes over D_p
  std::size_t batch_size = 64;   // public minibatch size; 0 = full batch
  double ridge_relative = 1e-6;  // CCA ridge as a fraction of the mean feature variance
  std::uint64_t seed = 0;        // minibatch order

  void validate() const {
    if (!(lambda >= 0.0)) throw std::invalid_argument("align.lambda must be >= 0");
    if (!(lr > 0.0)) throw std::invalid_argument("align.lr must be > 0");
    if (epochs == 0) throw std::invalid_argument("align.epochs must be >= 1");
    if (!(ridge_relative >= 0.0)) throw std::invalid_argument("align.ridge must be >= 0");
  }
};

/// Hook sites inside a layer.
enum class Capture {
  a_out,      // A h                  (m x r)
  b_out,      // B A h, P and Q bypassed (m x d_out)
  layer_out,  // W h + b, pre-activation (m x d_out)
};

/// Features at the 1-based PQ layer `layer` with all adapters scaled to zero.
inline Matrix capture_features(const FrozenModel& model, const AdapterSet& adapters,
                               const Matrix& x, Capture which, std::size_t layer) {
  if (layer == 0 || layer > adapters.depth() || !adapters.is_pq(layer - 1)) {
    throw std::invalid_argument("capture_features: layer " + std::to_string(layer) +
                                " is not a PQ-LoRA layer");
  }
  const ForwardResult fwd =
      forward(model, adapters, adapters, GateParams::zeros(model.depth()), x,
              ForwardMode::adapters_off);
  const LayerTape& lt = fwd.tape.layers[layer - 1];
  const PqLoraAdapter& ad = std::get<PqLoraAdapter>(adapters.layers[layer - 1]);
  switch (which) {
    case Capture::a_out: return lt.local.a_out;
    case Capture::b_out: return matmul_nt(lt.local.a_out, ad.b);
    case Capture::layer_out: return affine(lt.input, model.weight(layer - 1), model.bias(layer - 1));
  }
  throw std::logic_error("capture_features: unknown capture site");
}

/// Mean squared L2 distance between matched rows.
inline double mean_feature_gap(const Matrix& u, const Matrix& v) {
  if (u.rows() != v.rows() || u.cols() != v.cols() || u.rows() == 0) {
    throw std::invalid_argument("mean_feature_gap: shape mismatch");
  }
  double s = 0.0;
  const auto a = u.data();
  const auto b = v.data();
  for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  return s / static_cast<double>(u.rows());
}

/// Objective of the A step on (h_pivot, h_other): gap + lambda * penalty.
inline double a_alignment_loss(const Matrix& a_pivot, const Matrix& h_pivot, const Matrix& a_other,
                               const Matrix& h_other, double lambda) {
  const double gap = mean_feature_gap(matmul_nt(h_pivot, a_pivot), matmul_nt(h_other, a_other));
  return gap + lambda * std::pow(row_orthonormality_error(a_other), 2);
}

struct AAlignment {
  Matrix a;                   // aligned, not yet orthogonalised
  double initial_loss = 0.0;  // objective before the first step
  double final_loss = 0.0;    // objective after the last step
};

/// Gradient descent on the A objective. `h_pivot`/`h_other` are the layer
/// inputs of the pivot/other model on the same public samples.
inline AAlignment align_A(const PqLoraAdapter& pivot, const Matrix& h_pivot,
                          const PqLoraAdapter& other, const Matrix& h_other,
                          const AlignmentConfig& cfg) {
  cfg.validate();
  if (pivot.rank() != other.rank()) {
    throw std::invalid_argument("align_A: rank mismatch (" + std::to_string(pivot.rank()) + " vs " +
                                std::to_string(other.rank()) + ")");
  }
  if (h_pivot.rows() != h_other.rows() || h_pivot.cols() != pivot.a.cols() ||
      h_other.cols() != other.a.cols()) {
    throw std::invalid_argument("align_A: feature shapes do not match the adapters");
  }
  const std::size_t m = h_pivot.rows();
  const std::size_t bs = cfg.batch_size == 0 ? m : std::min(cfg.batch_size, m);
  const Matrix target = matmul_nt(h_pivot, pivot.a);  // m x r, fixed
  const Matrix eye = Matrix::identity(pivot.rank());

  AAlignment out{other.a, 0.0, 0.0};
  out.initial_loss = a_alignment_loss(pivot.a, h_pivot, out.a, h_other, cfg.lambda);
  Rng rng(derive_seed(cfg.seed, "align-batches"));
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < m; start += bs) {
      const std::size_t n = std::min(bs, m - start);
      Matrix hb(n, h_other.cols());
      Matrix tb(n, target.cols());
      for (std::size_t k = 0; k < n; ++k) {
        const auto src_h = h_other.row(order[start + k]);
        const auto src_t = target.row(order[start + k]);
        std::copy(src_h.begin(), src_h.end(), hb.row(k).begin());
        std::copy(src_t.begin(), src_t.end(), tb.row(k).begin());
      }
      // d/dA mean ||A h - t||^2 = (2/n) (U - T)^T H
      Matrix resid = matmul_nt(hb, out.a);
      resid -= tb;
      Matrix grad = matmul_tn(resid, hb);
      grad *= 2.0 / static_cast<double>(n);
      if (cfg.lambda > 0.0) {
        // d/dA ||A A^T - I||_F^2 = 4 (A A^T - I) A
        Matrix gram = matmul_nt(out.a, out.a);
        gram -= eye;
        grad.axpy(4.0 * cfg.lambda, matmul(gram, out.a));
      }
      out.a.axpy(-cfg.lr, grad);
      require_finite(out.a, "align_A (diverged; lower align.lr)");
    }
  }
  out.final_loss = a_alignment_loss(pivot.a, h_pivot, out.a, h_other, cfg.lambda);
  return out;
}

/// A <- U V^T (nearest matrix with orthonormal rows).
inline PqLoraAdapter orthogonalize_A(PqLoraAdapter ad) {
  ad.a = nearest_orthogonal(ad.a, Orientation::rows).matrix;
  return ad;
}

/// B_j = pinv(Pi_j)^T Pi_i^T B_i from the CCA of the two layers' output
/// features, projected back to orthonormal columns when it drifts > 1e-6.
inline Matrix align_B(const Matrix& pivot_b, const Matrix& h_pivot, const Matrix& h_other,
                      std::size_t r, double ridge) {
  if (pivot_b.rows() != h_pivot.cols() || pivot_b.cols() != r) {
    throw std::invalid_argument("align_B: pivot B is " + std::to_string(pivot_b.rows()) + "x" +
                                std::to_string(pivot_b.cols()) + " but features are " +
                                std::to_string(h_pivot.cols()) + "-dimensional with r=" +
                                std::to_string(r));
  }
  const CcaResult c = cca(h_pivot, h_other, r, ridge);
  Matrix b = matmul(transpose(pinv(c.proj_j)), matmul_tn(c.proj_i, pivot_b));
  if (column_orthonormality_error(b) > 1e-6) b = nearest_orthogonal(b, Orientation::columns).matrix;
  return b;
}

/// Index of the pivot: the model type with the fewest backbone parameters
/// (first on ties), per §E "we adopt the smallest model".
inline std::size_t select_pivot(const std::vector<FrozenModel>& models) {
  if (models.empty()) throw std::invalid_argument("select_pivot: no models");
  std::size_t best = 0;
  for (std::size_t k = 1; k < models.size(); ++k) {
    if (models[k].spec().parameter_count() < models[best].spec().parameter_count()) best = k;
  }
  return best;
}

/// Before/after measurements of one aligned layer pair.
struct LayerAlignReport {
  std::size_t type = 0;          // index of the non-pivot type
  std::size_t block = 0;         // 0-based block ordinal k
  std::size_t pivot_layer = 0;   // 1-based
  std::size_t other_layer = 0;   // 1-based
  double a_gap_before = 0.0;     // mean ||A_i h_i - A_j h_j||^2 over D_p
  double a_gap_after = 0.0;
  double a_loss_initial = 0.0;   // descent objective
  double a_loss_final = 0.0;
  double b_cka_before = 0.0;     // CKA of b_out features
  double b_cka_after = 0.0;
  double a_orth_error = 0.0;     // ||A A^T - I||_F after projection
  double b_orth_error = 0.0;     // ||B^T B - I||_F
  bool a_projection_unique = true;
};

struct AlignmentResult {
  std::size_t pivot = 0;
  std::vector<AdapterSet> sets;  // one per model type, same order as the input
  std::vector<LayerAlignReport> layers;
};

/// Aligns every non-pivot type's PQ layers to the pivot's, block by block.
/// `sets[t]` must be attachable to `models[t]`; all sets share r and N_B.
inline AlignmentResult align_all(const std::vector<FrozenModel>& models,
                                 std::vector<AdapterSet> sets, const Matrix& public_x,
                                 const AlignmentConfig& cfg) {
  cfg.validate();
  if (models.size() != sets.size()) {
    throw std::invalid_argument("align_all: " + std::to_string(models.size()) + " models but " +
                                std::to_string(sets.size()) + " adapter sets");
  }
  if (public_x.rows() == 0) throw std::invalid_argument("align_all: empty public dataset");
  for (std::size_t t = 0; t < models.size(); ++t) {
    require_attachable(sets[t], models[t].spec());
    sets[t].validate();
  }
  AlignmentResult out;
  out.pivot = select_pivot(models);
  const std::size_t p = out.pivot;
  const AdapterSet& piv = sets[p];
  const ForwardResult fp = forward(models[p], piv, piv, GateParams::zeros(models[p].depth()),
                                   public_x, ForwardMode::adapters_off);
  for (std::size_t t = 0; t < models.size(); ++t) {
    if (t == p) continue;
    if (sets[t].n_blocks() != piv.n_blocks()) {
      throw std::invalid_argument("align_all: model types disagree on N_B");
    }
    // Adapters are scaled to zero, so layer inputs do not depend on them.
    const ForwardResult fo =
        forward(models[t], sets[t], sets[t], GateParams::zeros(models[t].depth()), public_x,
                ForwardMode::adapters_off);
    for (std::size_t k = 0; k < piv.n_blocks(); ++k) {
      const std::size_t lp = piv.pq_layers[k];
      const std::size_t lo = sets[t].pq_layers[k];
      const PqLoraAdapter& pa = piv.block(k);
      PqLoraAdapter& oa = sets[t].block(k);
      if (pa.rank() != oa.rank()) throw std::invalid_argument("align_all: rank mismatch");

      const Matrix& hp = fp.tape.layers[lp - 1].input;
      const Matrix& ho = fo.tape.layers[lo - 1].input;

      LayerAlignReport rep;
      rep.type = t;
      rep.block = k;
      rep.pivot_layer = lp;
      rep.other_layer = lo;
      const Matrix up = matmul_nt(hp, pa.a);
      rep.a_gap_before = mean_feature_gap(up, matmul_nt(ho, oa.a));
      rep.b_cka_before = cka(matmul_nt(up, pa.b), matmul_nt(matmul_nt(ho, oa.a), oa.b));

      AlignmentConfig layer_cfg = cfg;
      layer_cfg.seed = derive_seed(cfg.seed, "align-layer", t * 1000 + k);
      const AAlignment fit = align_A(pa, hp, oa, ho, layer_cfg);
      rep.a_loss_initial = fit.initial_loss;
      rep.a_loss_final = fit.final_loss;
      const OrthogonalProjection proj = nearest_orthogonal(fit.a, Orientation::rows);
      oa.a = proj.matrix;
      rep.a_projection_unique = proj.unique;

      const Matrix zp = affine(hp, models[p].weight(lp - 1), models[p].bias(lp - 1));
      const Matrix zo = affine(ho, models[t].weight(lo - 1), models[t].bias(lo - 1));
      oa.b = align_B(pa.b, zp, zo, pa.rank(), default_cca_ridge(zp, zo, cfg.ridge_relative));
      oa.p = pa.p;
      oa.q = pa.q;

      const Matrix uo = matmul_nt(ho, oa.a);
      rep.a_gap_after = mean_feature_gap(up, uo);
      rep.b_cka_after = cka(matmul_nt(up, pa.b), matmul_nt(uo, oa.b));
      rep.a_orth_error = row_orthonormality_error(oa.a);
      rep.b_orth_error = column_orthonormality_error(oa.b);
      out.layers.push_back(rep);
    }
  }
  out.sets = std::move(sets);
  return out;
}

}  // namespace hpfl
