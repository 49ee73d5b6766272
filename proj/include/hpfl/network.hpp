// Copyright (C) 2026 The hpfl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Forward and backward passes of a frozen backbone carrying a local and a
// global adapter set. Per layer:
//
//   z = W h + b + c_L * o_L + c_G * o_G
//
// where o_* is the adapter output (B A h, or B (P A h + Q) at PQ layers) and
// (c_L, c_G) depend on the mode: (1, 0) local_only, (0, 1) global_only,
// (1 - s, s) gated_dual with s = sigmoid(beta_l), (0, 0) adapters_off.
// In adapters_off the local adapter is still evaluated so that its
// intermediate outputs are available to feature hooks.

#include <cstddef>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "hpfl/adapter.hpp"
#include "hpfl/data.hpp"
#include "hpfl/linalg.hpp"
#include "hpfl/model.hpp"

namespace hpfl {

enum class ForwardMode { local_only, global_only, gated_dual, adapters_off };

struct AdapterTrace {
  Matrix a_out;  // m x r, A h
  Matrix mid;    // m x r, P A h + Q (PQ layers only)
  Matrix b_out;  // m x d_out, the adapter's contribution before mixing
};

struct LayerTape {
  Matrix input;   // m x d_in
  Matrix output;  // m x d_out, post-activation (logits on the last layer)
  AdapterTrace local;
  AdapterTrace global;
  double mix = 0.0;  // sigmoid(beta) in gated_dual
};

struct ForwardTape {
  std::vector<LayerTape> layers;
};

struct ForwardResult {
  Matrix logits;
  ForwardTape tape;
};

struct LoraGrad {
  Matrix da;
  Matrix db;
};

struct PqGrad {
  Matrix dp;
  Vector dq;
};

using LayerGrad = std::variant<LoraGrad, PqGrad>;

/// Gradients of the trainable parameters: the local adapter set (P, Q at PQ
/// layers, A, B elsewhere) and the gate logits. Frozen tensors have no entry.
struct AdapterGrads {
  std::vector<LayerGrad> layers;
  Vector dbeta;
};

struct LossAndGrads {
  double loss = 0.0;
  AdapterGrads grads;
};

namespace detail {

inline AdapterTrace run_adapter(const LayerAdapter& ad, const Matrix& h) {
  AdapterTrace t;
  if (const auto* pq = std::get_if<PqLoraAdapter>(&ad)) {
    t.a_out = matmul_nt(h, pq->a);
    t.mid = matmul_nt(t.a_out, pq->p);
    for (std::size_t i = 0; i < t.mid.rows(); ++i)
      for (std::size_t j = 0; j < t.mid.cols(); ++j) t.mid(i, j) += pq->q[j];
    t.b_out = matmul_nt(t.mid, pq->b);
  } else {
    const auto& lo = std::get<LoraAdapter>(ad);
    t.a_out = matmul_nt(h, lo.a);
    t.b_out = matmul_nt(t.a_out, lo.b);
  }
  return t;
}

// Accumulates d(input) into dh given d(adapter output) = dout; returns the
// parameter gradient when `want_grad` is set.
inline LayerGrad adapter_backward(const LayerAdapter& ad, const AdapterTrace& t, const Matrix& h,
                                  const Matrix& dout, Matrix& dh, bool want_grad) {
  if (const auto* pq = std::get_if<PqLoraAdapter>(&ad)) {
    const Matrix dmid = matmul(dout, pq->b);  // m x r
    const Matrix da_out = matmul(dmid, pq->p);
    dh += matmul(da_out, pq->a);
    PqGrad g;
    if (want_grad) {
      g.dp = matmul_tn(dmid, t.a_out);
      g.dq.assign(pq->rank(), 0.0);
      for (std::size_t i = 0; i < dmid.rows(); ++i)
        for (std::size_t j = 0; j < dmid.cols(); ++j) g.dq[j] += dmid(i, j);
    }
    return g;
  }
  const auto& lo = std::get<LoraAdapter>(ad);
  const Matrix da_out = matmul(dout, lo.b);  // m x r
  dh += matmul(da_out, lo.a);
  LoraGrad g;
  if (want_grad) {
    g.db = matmul_tn(dout, t.a_out);
    g.da = matmul_tn(da_out, h);
  }
  return g;
}

inline LayerGrad zero_grad(const LayerAdapter& ad) {
  if (const auto* pq = std::get_if<PqLoraAdapter>(&ad)) {
    return PqGrad{Matrix(pq->rank(), pq->rank()), Vector(pq->rank(), 0.0)};
  }
  const auto& lo = std::get<LoraAdapter>(ad);
  return LoraGrad{Matrix(lo.a.rows(), lo.a.cols()), Matrix(lo.b.rows(), lo.b.cols())};
}

}  // namespace detail

inline ForwardResult forward(const FrozenModel& model, const AdapterSet& local,
                             const AdapterSet& global, const GateParams& gates, const Matrix& x,
                             ForwardMode mode) {
  const ModelSpec& spec = model.spec();
  if (x.cols() != spec.input_dim) {
    throw std::invalid_argument("forward: input width " + std::to_string(x.cols()) +
                                " != input_dim " + std::to_string(spec.input_dim));
  }
  require_attachable(local, spec);
  require_attachable(global, spec);
  if (gates.beta.size() != spec.depth()) {
    throw std::invalid_argument("forward: " + std::to_string(gates.beta.size()) +
                                " gate parameters for a depth-" + std::to_string(spec.depth()) +
                                " model");
  }

  const bool use_local = mode != ForwardMode::global_only;
  const bool use_global = mode == ForwardMode::global_only || mode == ForwardMode::gated_dual;

  ForwardResult res;
  res.tape.layers.resize(spec.depth());
  Matrix h = x;
  for (std::size_t l = 0; l < spec.depth(); ++l) {
    LayerTape& lt = res.tape.layers[l];
    Matrix z = affine(h, model.weight(l), model.bias(l));
    if (use_local) lt.local = detail::run_adapter(local.layers[l], h);
    if (use_global) lt.global = detail::run_adapter(global.layers[l], h);
    switch (mode) {
      case ForwardMode::local_only:
        z += lt.local.b_out;
        break;
      case ForwardMode::global_only:
        z += lt.global.b_out;
        break;
      case ForwardMode::gated_dual: {
        lt.mix = gates.mix(l);
        Matrix mixed = lt.global.b_out;
        mixed -= lt.local.b_out;
        mixed *= lt.mix;
        mixed += lt.local.b_out;
        z += mixed;
        break;
      }
      case ForwardMode::adapters_off:
        break;
    }
    if (l + 1 < spec.depth()) apply_activation(spec.activation, z);
    lt.input = std::move(h);
    lt.output = z;
    h = std::move(z);
  }
  res.logits = std::move(h);
  return res;
}

/// Mean cross-entropy of `batch` and its gradient w.r.t. every trainable
/// parameter. The global adapter set and the backbone are read-only.
inline LossAndGrads loss_and_grads(const FrozenModel& model, const AdapterSet& local,
                                   const AdapterSet& global, const GateParams& gates,
                                   const Batch& batch, ForwardMode mode) {
  if (batch.empty()) throw std::invalid_argument("loss_and_grads: empty batch");
  batch.validate(model.spec().input_dim, model.spec().output_dim);
  const ForwardResult fwd = forward(model, local, global, gates, batch.inputs, mode);
  CrossEntropy ce = softmax_cross_entropy(fwd.logits, batch.labels);

  const ModelSpec& spec = model.spec();
  LossAndGrads out;
  out.loss = ce.loss;
  out.grads.layers.reserve(spec.depth());
  for (const auto& ad : local.layers) out.grads.layers.push_back(detail::zero_grad(ad));
  out.grads.dbeta.assign(spec.depth(), 0.0);

  const bool local_trainable = mode == ForwardMode::local_only || mode == ForwardMode::gated_dual;
  Matrix delta = std::move(ce.dlogits);  // d loss / d z_l
  for (std::size_t l = spec.depth(); l-- > 0;) {
    const LayerTape& lt = fwd.tape.layers[l];
    Matrix dh = matmul(delta, model.weight(l));

    double c_local = 0.0;
    double c_global = 0.0;
    switch (mode) {
      case ForwardMode::local_only: c_local = 1.0; break;
      case ForwardMode::global_only: c_global = 1.0; break;
      case ForwardMode::gated_dual:
        c_local = 1.0 - lt.mix;
        c_global = lt.mix;
        break;
      case ForwardMode::adapters_off: break;
    }
    if (local_trainable) {
      Matrix dout = delta;
      dout *= c_local;
      out.grads.layers[l] =
          detail::adapter_backward(local.layers[l], lt.local, lt.input, dout, dh, true);
    }
    if (c_global != 0.0) {
      Matrix dout = delta;
      dout *= c_global;
      detail::adapter_backward(global.layers[l], lt.global, lt.input, dout, dh, false);
    }
    if (mode == ForwardMode::gated_dual) {
      double s = 0.0;
      const auto d = delta.data();
      const auto og = lt.global.b_out.data();
      const auto ol = lt.local.b_out.data();
      for (std::size_t k = 0; k < d.size(); ++k) s += d[k] * (og[k] - ol[k]);
      out.grads.dbeta[l] = s * lt.mix * (1.0 - lt.mix);
    }
    if (l == 0) break;
    activation_backward(spec.activation, fwd.tape.layers[l - 1].output, dh);
    delta = std::move(dh);
  }
  return out;
}

/// Logits only; convenience wrapper used by evaluation.
inline Matrix predict_logits(const FrozenModel& model, const AdapterSet& local,
                             const AdapterSet& global, const GateParams& gates, const Matrix& x,
                             ForwardMode mode = ForwardMode::gated_dual) {
  return forward(model, local, global, gates, x, mode).logits;
}

}  // namespace hpfl
