// Copyright (C) 2026 The hpfl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Frozen feed-forward backbones. Each model type is a dense MLP whose layers
// are h_l = act(W_l h_{l-1} + b_l), with the activation skipped on the last
// layer (logits). Weights are drawn once, optionally fitted on a shared
// synthetic pretraining task, and never touched again.

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "hpfl/data.hpp"
#include "hpfl/linalg.hpp"
#include "hpfl/rng.hpp"

namespace hpfl {

enum class Activation { tanh, linear };

inline std::string to_string(Activation a) { return a == Activation::tanh ? "tanh" : "linear"; }

inline Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "linear") return Activation::linear;
  throw std::invalid_argument("unknown activation '" + s + "' (expected tanh or linear)");
}

struct LayerShape {
  std::size_t d_in = 0;
  std::size_t d_out = 0;
  friend bool operator==(const LayerShape&, const LayerShape&) = default;
};

struct ModelSpec {
  std::string model_type_id;
  std::size_t input_dim = 0;
  std::size_t output_dim = 0;
  std::vector<LayerShape> layers;
  Activation activation = Activation::tanh;

  std::size_t depth() const noexcept { return layers.size(); }

  std::size_t parameter_count() const noexcept {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.d_in * l.d_out + l.d_out;
    return n;
  }

  /// `depth` layers: input_dim -> width -> ... -> width -> output_dim.
  static ModelSpec mlp(std::string id, std::size_t input_dim, std::size_t width, std::size_t depth,
                       std::size_t output_dim, Activation act = Activation::tanh) {
    ModelSpec s{std::move(id), input_dim, output_dim, {}, act};
    for (std::size_t l = 0; l < depth; ++l) {
      const std::size_t in = l == 0 ? input_dim : width;
      const std::size_t out = l + 1 == depth ? output_dim : width;
      s.layers.push_back({in, out});
    }
    return s;
  }

  void validate() const {
    const std::string where = "ModelSpec '" + model_type_id + "': ";
    if (layers.size() < 2 && !(layers.size() == 1 && activation == Activation::linear)) {
      // Single-layer linear nets are allowed for hand-checkable fixtures.
      throw std::invalid_argument(where + "depth must be >= 2");
    }
    if (layers.empty()) throw std::invalid_argument(where + "no layers");
    if (layers.front().d_in != input_dim) {
      throw std::invalid_argument(where + "first layer d_in != input_dim");
    }
    if (layers.back().d_out != output_dim) {
      throw std::invalid_argument(where + "last layer d_out != output_dim");
    }
    for (std::size_t l = 0; l < layers.size(); ++l) {
      if (layers[l].d_in == 0 || layers[l].d_out == 0) {
        throw std::invalid_argument(where + "layer " + std::to_string(l + 1) + " has a zero dim");
      }
      if (l + 1 < layers.size() && layers[l].d_out != layers[l + 1].d_in) {
        throw std::invalid_argument(where + "layer " + std::to_string(l + 1) + " d_out " +
                                    std::to_string(layers[l].d_out) + " does not chain into layer " +
                                    std::to_string(l + 2) + " d_in " +
                                    std::to_string(layers[l + 1].d_in));
      }
    }
  }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

/// Fixed scheme for fitting backbones before they are frozen.
struct PretrainConfig {
  std::size_t steps = 200;      // full-batch gradient steps; 0 leaves weights random
  double lr = 0.1;
  std::size_t samples = 256;
  double prototype_scale = 1.0;
  double noise = 1.0;
  std::uint64_t task_seed = 0x5eed'0f'9e7a11ULL;  // shared by every model type
};

class FrozenModel {
 public:
  FrozenModel(ModelSpec spec, std::vector<Matrix> weights, std::vector<Vector> biases,
              std::uint64_t seed)
      : spec_(std::move(spec)), weights_(std::move(weights)), biases_(std::move(biases)),
        seed_(seed) {
    spec_.validate();
    if (weights_.size() != spec_.depth() || biases_.size() != spec_.depth()) {
      throw std::invalid_argument("FrozenModel: parameter count does not match depth");
    }
    for (std::size_t l = 0; l < spec_.depth(); ++l) {
      const auto& sh = spec_.layers[l];
      if (weights_[l].rows() != sh.d_out || weights_[l].cols() != sh.d_in ||
          biases_[l].size() != sh.d_out) {
        throw std::invalid_argument("FrozenModel: layer " + std::to_string(l + 1) +
                                    " parameter shape mismatch");
      }
      require_finite(weights_[l], "FrozenModel");
    }
  }

  const ModelSpec& spec() const noexcept { return spec_; }
  std::size_t depth() const noexcept { return spec_.depth(); }
  /// 0-based layer access.
  const Matrix& weight(std::size_t l) const { return weights_.at(l); }
  const Vector& bias(std::size_t l) const { return biases_.at(l); }
  std::uint64_t seed() const noexcept { return seed_; }

 private:
  ModelSpec spec_;
  std::vector<Matrix> weights_;
  std::vector<Vector> biases_;
  std::uint64_t seed_;
};

// ---------------------------------------------------------------------------
// Shared kernels
// ---------------------------------------------------------------------------

inline void apply_activation(Activation act, Matrix& z) {
  if (act == Activation::linear) return;
  for (double& v : z.data()) v = std::tanh(v);
}

/// Multiplies `grad` in place by act'(z) given the post-activation values.
inline void activation_backward(Activation act, const Matrix& post, Matrix& grad) {
  if (act == Activation::linear) return;
  auto g = grad.data();
  auto p = post.data();
  for (std::size_t k = 0; k < g.size(); ++k) g[k] *= 1.0 - p[k] * p[k];
}

/// Z = H * W^T + 1 * b^T
inline Matrix affine(const Matrix& h, const Matrix& w, std::span<const double> b) {
  Matrix z = matmul_nt(h, w);
  for (std::size_t i = 0; i < z.rows(); ++i)
    for (std::size_t j = 0; j < z.cols(); ++j) z(i, j) += b[j];
  return z;
}

struct CrossEntropy {
  double loss = 0.0;
  Matrix dlogits;  // d(mean loss) / d logits
};

inline CrossEntropy softmax_cross_entropy(const Matrix& logits,
                                          std::span<const std::size_t> labels) {
  if (labels.empty()) throw std::invalid_argument("cross entropy: empty batch");
  if (logits.rows() != labels.size()) throw std::invalid_argument("cross entropy: label count");
  const double inv_m = 1.0 / static_cast<double>(labels.size());
  CrossEntropy out{0.0, Matrix(logits.rows(), logits.cols())};
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const auto z = logits.row(i);
    const double zmax = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (double v : z) sum += std::exp(v - zmax);
    const double log_sum = std::log(sum) + zmax;
    out.loss += (log_sum - z[labels[i]]) * inv_m;
    for (std::size_t j = 0; j < z.size(); ++j) {
      const double p = std::exp(z[j] - log_sum);
      out.dlogits(i, j) = (p - (j == labels[i] ? 1.0 : 0.0)) * inv_m;
    }
  }
  return out;
}

inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

/// Activations of the bare backbone: acts[0] = x, acts[l] = output of layer l
/// (post-activation; logits for the last layer).
inline std::vector<Matrix> backbone_activations(const FrozenModel& model, const Matrix& x) {
  if (x.cols() != model.spec().input_dim) {
    throw std::invalid_argument("backbone: input width " + std::to_string(x.cols()) +
                                " != input_dim " + std::to_string(model.spec().input_dim));
  }
  std::vector<Matrix> acts;
  acts.reserve(model.depth() + 1);
  acts.push_back(x);
  for (std::size_t l = 0; l < model.depth(); ++l) {
    Matrix z = affine(acts.back(), model.weight(l), model.bias(l));
    if (l + 1 < model.depth()) apply_activation(model.spec().activation, z);
    acts.push_back(std::move(z));
  }
  return acts;
}

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

namespace detail {

struct BackboneGrads {
  std::vector<Matrix> dw;
  std::vector<Vector> db;
  double loss = 0.0;
};

inline BackboneGrads backbone_grads(const ModelSpec& spec, const std::vector<Matrix>& w,
                                    const std::vector<Vector>& b, const Batch& batch) {
  std::vector<Matrix> acts;
  acts.push_back(batch.inputs);
  for (std::size_t l = 0; l < spec.depth(); ++l) {
    Matrix z = affine(acts.back(), w[l], b[l]);
    if (l + 1 < spec.depth()) apply_activation(spec.activation, z);
    acts.push_back(std::move(z));
  }
  CrossEntropy ce = softmax_cross_entropy(acts.back(), batch.labels);
  BackboneGrads g{std::vector<Matrix>(spec.depth()), std::vector<Vector>(spec.depth()), ce.loss};
  Matrix delta = std::move(ce.dlogits);
  for (std::size_t l = spec.depth(); l-- > 0;) {
    g.dw[l] = matmul_tn(delta, acts[l]);
    g.db[l] = column_means(delta);
    for (double& v : g.db[l]) v *= static_cast<double>(delta.rows());
    if (l == 0) break;
    Matrix dh = matmul(delta, w[l]);
    activation_backward(spec.activation, acts[l], dh);
    delta = std::move(dh);
  }
  return g;
}

}  // namespace detail

/// Prototypes of the shared pretraining task.
inline Matrix pretraining_prototypes(const ModelSpec& spec, const PretrainConfig& cfg) {
  Rng rng(derive_seed(cfg.task_seed, "pretrain-prototypes"));
  return gaussian_matrix(spec.output_dim, spec.input_dim, cfg.prototype_scale, rng);
}

/// Deterministic in (spec, seed, cfg). Weights are N(0, 1/d_in), biases 0,
/// then `cfg.steps` full-batch descent steps on the shared pretraining task.
inline FrozenModel build_frozen(const ModelSpec& spec, std::uint64_t seed,
                                const PretrainConfig& cfg = {}) {
  spec.validate();
  Rng rng(derive_seed(seed, "backbone-weights"));
  std::vector<Matrix> w;
  std::vector<Vector> b;
  for (const auto& sh : spec.layers) {
    w.push_back(gaussian_matrix(sh.d_out, sh.d_in, 1.0 / std::sqrt(double(sh.d_in)), rng));
    b.emplace_back(sh.d_out, 0.0);
  }
  if (cfg.steps > 0) {
    Rng data_rng(derive_seed(cfg.task_seed, "pretrain-data"));
    const Batch task =
        sample_mixture(pretraining_prototypes(spec, cfg), cfg.noise, cfg.samples, data_rng);
    for (std::size_t step = 0; step < cfg.steps; ++step) {
      const auto g = detail::backbone_grads(spec, w, b, task);
      for (std::size_t l = 0; l < spec.depth(); ++l) {
        w[l].axpy(-cfg.lr, g.dw[l]);
        for (std::size_t j = 0; j < b[l].size(); ++j) b[l][j] -= cfg.lr * g.db[l][j];
      }
    }
  }
  return FrozenModel(spec, std::move(w), std::move(b), seed);
}

/// Mean cross-entropy gradient w.r.t. the final weight matrix of `probe`,
/// flattened row-major (d_out * d_in entries). The probe is not modified.
inline Vector last_layer_gradient(const FrozenModel& probe, const Batch& batch) {
  if (batch.empty()) throw std::invalid_argument("last_layer_gradient: empty batch");
  batch.validate(probe.spec().input_dim, probe.spec().output_dim);
  const auto acts = backbone_activations(probe, batch.inputs);
  const CrossEntropy ce = softmax_cross_entropy(acts.back(), batch.labels);
  const Matrix g = matmul_tn(ce.dlogits, acts[acts.size() - 2]);
  return g.values();
}

}  // namespace hpfl
