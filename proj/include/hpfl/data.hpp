// Copyright (C) 2026 The hpfl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hpfl/linalg.hpp"
#include "hpfl/rng.hpp"

namespace hpfl {

/// A labelled mini-batch: one sample per row of `inputs`.
struct Batch {
  Matrix inputs;
  std::vector<std::size_t> labels;

  std::size_t size() const noexcept { return labels.size(); }
  bool empty() const noexcept { return labels.empty(); }

  void validate(std::size_t input_dim, std::size_t n_classes) const {
    if (inputs.rows() != labels.size()) {
      throw std::invalid_argument("Batch: " + std::to_string(inputs.rows()) + " rows but " +
                                  std::to_string(labels.size()) + " labels");
    }
    if (!empty() && inputs.cols() != input_dim) {
      throw std::invalid_argument("Batch: input width " + std::to_string(inputs.cols()) +
                                  " != model input_dim " + std::to_string(input_dim));
    }
    for (std::size_t y : labels) {
      if (y >= n_classes) {
        throw std::invalid_argument("Batch: label " + std::to_string(y) + " >= class count " +
                                    std::to_string(n_classes));
      }
    }
  }

  friend bool operator==(const Batch&, const Batch&) = default;
};

inline Batch select_rows(const Batch& b, std::span<const std::size_t> idx) {
  Batch out{Matrix(idx.size(), b.inputs.cols()), {}};
  out.labels.reserve(idx.size());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const auto src = b.inputs.row(idx[k]);
    std::copy(src.begin(), src.end(), out.inputs.row(k).begin());
    out.labels.push_back(b.labels[idx[k]]);
  }
  return out;
}

inline Batch concat(std::span<const Batch> parts) {
  std::size_t n = 0;
  std::size_t d = 0;
  for (const Batch& p : parts) {
    n += p.size();
    if (!p.empty()) d = p.inputs.cols();
  }
  Batch out{Matrix(n, d), {}};
  out.labels.reserve(n);
  std::size_t row = 0;
  for (const Batch& p : parts) {
    for (std::size_t i = 0; i < p.size(); ++i, ++row) {
      const auto src = p.inputs.row(i);
      std::copy(src.begin(), src.end(), out.inputs.row(row).begin());
      out.labels.push_back(p.labels[i]);
    }
  }
  return out;
}

/// Balanced draw from an isotropic Gaussian mixture: class k = i mod C,
/// x = prototypes.row(k) + noise * N(0, I). Rows are then shuffled.
inline Batch sample_mixture(const Matrix& prototypes, double noise, std::size_t n, Rng& rng) {
  const std::size_t classes = prototypes.rows();
  const std::size_t dim = prototypes.cols();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::normal_distribution<double> dist(0.0, noise);
  Batch out{Matrix(n, dim), std::vector<std::size_t>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = order[i] % classes;
    out.labels[i] = k;
    for (std::size_t j = 0; j < dim; ++j) out.inputs(i, j) = prototypes(k, j) + dist(rng);
  }
  return out;
}

}  // namespace hpfl
