// Copyright (C) 2026 The hpfl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>

#include "hpfl/linalg.hpp"
#include "hpfl/rng.hpp"

namespace hpfl::testing {

inline Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed, double sd = 1.0) {
  Rng rng(seed);
  return gaussian_matrix(r, c, sd, rng);
}

/// Classical Gram-Schmidt on the rows (rows <= cols). Independent of the SVD
/// path so it can serve as an oracle.
inline Matrix gram_schmidt_rows(Matrix m) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t k = 0; k < i; ++k) {
        double p = 0.0;
        for (std::size_t j = 0; j < m.cols(); ++j) p += m(i, j) * m(k, j);
        for (std::size_t j = 0; j < m.cols(); ++j) m(i, j) -= p * m(k, j);
      }
    }
    double n = 0.0;
    for (std::size_t j = 0; j < m.cols(); ++j) n += m(i, j) * m(i, j);
    n = std::sqrt(n);
    for (std::size_t j = 0; j < m.cols(); ++j) m(i, j) /= n;
  }
  return m;
}

inline Matrix random_row_orthonormal(std::size_t r, std::size_t c, std::uint64_t seed) {
  return gram_schmidt_rows(random_matrix(r, c, seed));
}

inline Matrix random_orthogonal(std::size_t n, std::uint64_t seed) {
  return random_row_orthonormal(n, n, seed);
}

inline double relative_error(const Matrix& got, const Matrix& want) {
  const double n = frobenius_norm(want);
  return frobenius_distance(got, want) / (n == 0.0 ? 1.0 : n);
}

/// Pearson correlation of two sample vectors.
inline double pearson(std::span<const double> a, std::span<const double> b) {
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= double(a.size());
  mb /= double(b.size());
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

}  // namespace hpfl::testing
