// Copyright (C) 2026 The hpfl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Dense, deterministic linear algebra used throughout hpfl.
//
// Matrices are row-major doubles. Nothing here allocates hidden state or
// touches global data, so every function is safe to call concurrently.
//
//   svd()                -- thin SVD by one-sided Jacobi (Hestenes)
//   pinv()               -- Moore-Penrose pseudo-inverse with relative cutoff
//   nearest_orthogonal() -- U * Vt projection onto (semi-)orthogonal matrices
//   cca()                -- ridge-regularised canonical correlation analysis
//   cka()                -- linear centered kernel alignment
//   cosine()             -- cosine similarity with an explicit degenerate flag

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace hpfl {

using Vector = std::vector<double>;

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw std::invalid_argument("Matrix: data length " + std::to_string(data_.size()) +
                                  " does not match " + std::to_string(rows_) + "x" +
                                  std::to_string(cols_));
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static Matrix diagonal(std::span<const double> d) {
    Matrix m(d.size(), d.size());
    for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
    return m;
  }

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    Matrix m(r, c);
    std::size_t i = 0;
    for (const auto& row : rows) {
      if (row.size() != c) throw std::invalid_argument("Matrix::from_rows: ragged rows");
      std::copy(row.begin(), row.end(), m.data_.begin() + static_cast<std::ptrdiff_t>(i * c));
      ++i;
    }
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const noexcept { return data_[i * cols_ + j]; }

  std::span<double> row(std::size_t i) noexcept { return {data_.data() + i * cols_, cols_}; }
  std::span<const double> row(std::size_t i) const noexcept {
    return {data_.data() + i * cols_, cols_};
  }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

  Matrix& operator+=(const Matrix& o) {
    check_same(o, "+=");
    for (std::size_t k = 0; k < data_.size(); ++k) data_[k] += o.data_[k];
    return *this;
  }
  Matrix& operator-=(const Matrix& o) {
    check_same(o, "-=");
    for (std::size_t k = 0; k < data_.size(); ++k) data_[k] -= o.data_[k];
    return *this;
  }
  Matrix& operator*=(double s) noexcept {
    for (double& v : data_) v *= s;
    return *this;
  }

  /// Appends the rows of `o` (amortised O(rows of o)). An empty 0x0 matrix
  /// adopts the column count of `o`.
  void append_rows(const Matrix& o) {
    if (rows_ == 0 && cols_ == 0) cols_ = o.cols_;
    if (o.rows_ > 0 && o.cols_ != cols_) {
      throw std::invalid_argument("Matrix append_rows: width " + std::to_string(o.cols_) +
                                  " != " + std::to_string(cols_));
    }
    data_.insert(data_.end(), o.data_.begin(), o.data_.end());
    rows_ += o.rows_;
  }

  /// this += s * o
  void axpy(double s, const Matrix& o) {
    check_same(o, "axpy");
    for (std::size_t k = 0; k < data_.size(); ++k) data_[k] += s * o.data_[k];
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  void check_same(const Matrix& o, const char* op) const {
    if (!same_shape(o)) {
      throw std::invalid_argument(std::string("Matrix ") + op + ": shape mismatch " +
                                  std::to_string(rows_) + "x" + std::to_string(cols_) + " vs " +
                                  std::to_string(o.rows_) + "x" + std::to_string(o.cols_));
    }
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
inline Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
inline Matrix operator*(double s, Matrix a) { return a *= s; }

// ---------------------------------------------------------------------------
// Elementary kernels
// ---------------------------------------------------------------------------

inline bool all_finite(std::span<const double> v) noexcept {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

inline void require_finite(const Matrix& m, const char* where) {
  if (!all_finite(m.data())) {
    throw std::invalid_argument(std::string(where) + ": matrix has non-finite entries");
  }
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

/// A * B
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: inner dimensions " + std::to_string(a.cols()) + " vs " +
                                std::to_string(b.rows()));
  }
  Matrix out(a.rows(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* o = out.row(i).data();
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double s = a(i, k);
      if (s == 0.0) continue;
      const double* br = b.row(k).data();
      for (std::size_t j = 0; j < n; ++j) o[j] += s * br[j];
    }
  }
  return out;
}

/// A * B^T
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw std::invalid_argument("matmul_nt: inner dimensions " + std::to_string(a.cols()) +
                                " vs " + std::to_string(b.cols()));
  }
  Matrix out(a.rows(), b.rows());
  const std::size_t k = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* ar = a.row(i).data();
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const double* br = b.row(j).data();
      double s = 0.0;
      for (std::size_t t = 0; t < k; ++t) s += ar[t] * br[t];
      out(i, j) = s;
    }
  }
  return out;
}

/// A^T * B
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw std::invalid_argument("matmul_tn: row counts " + std::to_string(a.rows()) + " vs " +
                                std::to_string(b.rows()));
  }
  Matrix out(a.cols(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t t = 0; t < a.rows(); ++t) {
    const double* ar = a.row(t).data();
    const double* br = b.row(t).data();
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double s = ar[i];
      if (s == 0.0) continue;
      double* o = out.row(i).data();
      for (std::size_t j = 0; j < n; ++j) o[j] += s * br[j];
    }
  }
  return out;
}

inline Vector matvec(const Matrix& a, std::span<const double> x) {
  if (a.cols() != x.size()) {
    throw std::invalid_argument("matvec: " + std::to_string(a.cols()) + " columns vs vector of " +
                                std::to_string(x.size()));
  }
  Vector y(a.rows(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* ar = a.row(i).data();
    double s = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) s += ar[j] * x[j];
    y[i] = s;
  }
  return y;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline double frobenius_norm(const Matrix& a) { return norm2(a.data()); }

inline double frobenius_distance(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("frobenius_distance: shape mismatch");
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double d = a.data()[k] - b.data()[k];
    s += d * d;
  }
  return std::sqrt(s);
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("max_abs_diff: length mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Column means of a (rows are samples).
inline Vector column_means(const Matrix& a) {
  Vector mu(a.cols(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) mu[j] += a(i, j);
  for (double& v : mu) v /= static_cast<double>(a.rows());
  return mu;
}

inline Matrix center_columns(const Matrix& a) {
  const Vector mu = column_means(a);
  Matrix c = a;
  for (std::size_t i = 0; i < c.rows(); ++i)
    for (std::size_t j = 0; j < c.cols(); ++j) c(i, j) -= mu[j];
  return c;
}

/// Columns [0, k) of a.
inline Matrix leading_columns(const Matrix& a, std::size_t k) {
  Matrix out(a.rows(), k);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < k; ++j) out(i, j) = a(i, j);
  return out;
}

/// ||A * A^T - I||_F, the deviation of the rows of A from an orthonormal set.
inline double row_orthonormality_error(const Matrix& a) {
  Matrix g = matmul_nt(a, a);
  g -= Matrix::identity(a.rows());
  return frobenius_norm(g);
}

/// ||A^T * A - I||_F, the deviation of the columns of A from an orthonormal set.
inline double column_orthonormality_error(const Matrix& a) {
  Matrix g = matmul_tn(a, a);
  g -= Matrix::identity(a.cols());
  return frobenius_norm(g);
}

// ---------------------------------------------------------------------------
// SVD
// ---------------------------------------------------------------------------

/// Thin SVD, M = U * diag(S) * Vt with k = min(rows, cols):
/// U is rows x k, S has k non-increasing entries, Vt is k x cols.
struct Svd {
  Matrix u;
  Vector s;
  Matrix vt;
};

namespace detail {

// Replaces rows of `basis` flagged in `missing` by unit vectors orthogonal to
// every other row. Used when Jacobi leaves a zero column behind.
inline void complete_orthonormal_rows(Matrix& basis, const std::vector<bool>& missing) {
  const std::size_t n = basis.cols();
  std::vector<bool> done(basis.rows());
  for (std::size_t p = 0; p < basis.rows(); ++p) done[p] = !missing[p];
  for (std::size_t p = 0; p < basis.rows(); ++p) {
    if (!missing[p]) continue;
    Vector best;
    double best_norm = -1.0;
    for (std::size_t e = 0; e < n; ++e) {
      Vector cand(n, 0.0);
      cand[e] = 1.0;
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t q = 0; q < basis.rows(); ++q) {
          if (!done[q]) continue;
          const double proj = dot(cand, basis.row(q));
          for (std::size_t j = 0; j < n; ++j) cand[j] -= proj * basis(q, j);
        }
      }
      const double nrm = norm2(cand);
      if (nrm > best_norm) {
        best_norm = nrm;
        best = std::move(cand);
      }
    }
    for (std::size_t j = 0; j < n; ++j) basis(p, j) = best[j] / best_norm;
    done[p] = true;
  }
}

// One-sided Jacobi for rows >= cols. Works on the transpose so that the
// columns being rotated are contiguous rows.
inline Svd svd_tall(const Matrix& m) {
  const std::size_t rows = m.rows();
  const std::size_t n = m.cols();
  Matrix w = transpose(m);           // n x rows, row p is column p of M
  Matrix v = Matrix::identity(n);    // row p is column p of V
  constexpr double kEps = std::numeric_limits<double>::epsilon();

  for (int sweep = 0; sweep < 80; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double* wp = w.row(p).data();
        double* wq = w.row(q).data();
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < rows; ++i) {
          alpha += wp[i] * wp[i];
          beta += wq[i] * wq[i];
          gamma += wp[i] * wq[i];
        }
        if (alpha == 0.0 || beta == 0.0) continue;
        if (std::abs(gamma) <= kEps * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < rows; ++i) {
          const double a = wp[i];
          const double b = wq[i];
          wp[i] = c * a - s * b;
          wq[i] = s * a + c * b;
        }
        double* vp = v.row(p).data();
        double* vq = v.row(q).data();
        for (std::size_t i = 0; i < n; ++i) {
          const double a = vp[i];
          const double b = vq[i];
          vp[i] = c * a - s * b;
          vq[i] = s * a + c * b;
        }
      }
    }
    if (!rotated) break;
  }

  Vector sv(n);
  for (std::size_t p = 0; p < n; ++p) sv[p] = norm2(w.row(p));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return sv[a] > sv[b]; });

  const double smax = n == 0 ? 0.0 : sv[order[0]];
  const double cutoff = smax * kEps * static_cast<double>(std::max(rows, n));
  Matrix ut(n, rows);  // rows are left singular vectors
  Svd out{Matrix(rows, n), Vector(n), Matrix(n, n)};
  std::vector<bool> missing(n, false);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t p = order[k];
    out.s[k] = sv[p];
    if (sv[p] <= cutoff || sv[p] == 0.0) {
      missing[k] = true;
    } else {
      for (std::size_t i = 0; i < rows; ++i) ut(k, i) = w(p, i) / sv[p];
    }
    for (std::size_t j = 0; j < n; ++j) out.vt(k, j) = v(p, j);
  }
  if (std::any_of(missing.begin(), missing.end(), [](bool b) { return b; })) {
    complete_orthonormal_rows(ut, missing);
  }
  out.u = transpose(ut);
  return out;
}

}  // namespace detail

inline Svd svd(const Matrix& m) {
  if (m.size() == 0) throw std::invalid_argument("svd: empty matrix");
  require_finite(m, "svd");
  if (m.rows() >= m.cols()) return detail::svd_tall(m);
  Svd t = detail::svd_tall(transpose(m));
  return {transpose(t.vt), std::move(t.s), transpose(t.u)};
}

/// U * diag(S) * Vt
inline Matrix reconstruct(const Svd& d) {
  Matrix us = d.u;
  for (std::size_t i = 0; i < us.rows(); ++i)
    for (std::size_t k = 0; k < us.cols(); ++k) us(i, k) *= d.s[k];
  return matmul(us, d.vt);
}

/// Number of singular values above tol * max singular value.
inline std::size_t numerical_rank(const Matrix& m, double tol) {
  const Svd d = svd(m);
  if (d.s.empty() || d.s.front() == 0.0) return 0;
  const double cut = tol * d.s.front();
  return static_cast<std::size_t>(
      std::count_if(d.s.begin(), d.s.end(), [cut](double s) { return s > cut; }));
}

inline constexpr double kDefaultPinvTol = 1e-12;

/// Moore-Penrose pseudo-inverse; singular values below tol * max(S) are
/// treated as zero. The zero matrix maps to the zero matrix (transposed shape).
inline Matrix pinv(const Matrix& m, double tol = kDefaultPinvTol) {
  const Svd d = svd(m);
  const double smax = d.s.empty() ? 0.0 : d.s.front();
  Matrix out(m.cols(), m.rows());
  if (smax == 0.0) return out;
  // pinv = V * diag(1/s) * U^T
  for (std::size_t k = 0; k < d.s.size(); ++k) {
    if (d.s[k] <= tol * smax) continue;
    const double inv = 1.0 / d.s[k];
    for (std::size_t i = 0; i < out.rows(); ++i) {
      const double vik = d.vt(k, i) * inv;
      if (vik == 0.0) continue;
      for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += vik * d.u(j, k);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Orthogonal projection
// ---------------------------------------------------------------------------

enum class Orientation {
  rows,     // rows <= cols, target R * R^T = I
  columns,  // cols <= rows, target R^T * R = I
};

struct OrthogonalProjection {
  Matrix matrix;
  // False when A had a (numerically) zero singular value, in which case the
  // closest orthogonal matrix is not unique and U * Vt is one of them.
  bool unique = true;
};

/// Closest matrix with orthonormal rows (or columns) in Frobenius norm: U * Vt.
inline OrthogonalProjection nearest_orthogonal(const Matrix& a, Orientation orientation) {
  if (orientation == Orientation::rows && a.rows() > a.cols()) {
    throw std::invalid_argument("nearest_orthogonal: row orientation needs rows <= cols, got " +
                                std::to_string(a.rows()) + "x" + std::to_string(a.cols()));
  }
  if (orientation == Orientation::columns && a.cols() > a.rows()) {
    throw std::invalid_argument("nearest_orthogonal: column orientation needs cols <= rows, got " +
                                std::to_string(a.rows()) + "x" + std::to_string(a.cols()));
  }
  const Svd d = svd(a);
  OrthogonalProjection out{matmul(d.u, d.vt), true};
  const double smax = d.s.empty() ? 0.0 : d.s.front();
  const double cut = smax * 1e-12;
  out.unique = smax > 0.0 && d.s.back() > cut;
  return out;
}

// ---------------------------------------------------------------------------
// Representation similarity
// ---------------------------------------------------------------------------

struct CcaResult {
  Matrix proj_i;  // d_i x r
  Matrix proj_j;  // d_j x r
  Vector corrs;   // r canonical correlations, non-increasing
};

namespace detail {

// Symmetric inverse square root of an SPD matrix via its SVD (U == V).
inline Matrix inverse_sqrt_spd(const Matrix& c) {
  const Svd d = svd(c);
  Matrix out(c.rows(), c.cols());
  for (std::size_t k = 0; k < d.s.size(); ++k) {
    const double w = 1.0 / std::sqrt(d.s[k]);
    for (std::size_t i = 0; i < c.rows(); ++i) {
      const double uik = d.u(i, k) * w;
      for (std::size_t j = 0; j < c.cols(); ++j) out(i, j) += uik * d.u(j, k);
    }
  }
  return out;
}

inline Matrix covariance(const Matrix& a, const Matrix& b) {
  Matrix c = matmul_tn(a, b);
  c *= 1.0 / static_cast<double>(a.rows() - 1);
  return c;
}

inline double mean_diagonal(const Matrix& c) {
  double t = 0.0;
  for (std::size_t i = 0; i < c.rows(); ++i) t += c(i, i);
  return t / static_cast<double>(c.rows());
}

}  // namespace detail

/// Ridge scale used when the caller does not pin one: 1e-6 times the mean
/// per-feature variance of both inputs.
inline double default_cca_ridge(const Matrix& hi, const Matrix& hj, double relative = 1e-6) {
  const Matrix ci = center_columns(hi);
  const Matrix cj = center_columns(hj);
  const double si = detail::mean_diagonal(detail::covariance(ci, ci));
  const double sj = detail::mean_diagonal(detail::covariance(cj, cj));
  return relative * 0.5 * (si + sj);
}

/// Canonical correlation analysis of two views of the same m samples.
/// Columns are centered here; `ridge` * I is added to both auto-covariances
/// before whitening. Returns projections maximising the correlation of
/// hi * proj_i with hj * proj_j, column by column.
inline CcaResult cca(const Matrix& hi, const Matrix& hj, std::size_t r, double ridge) {
  if (hi.rows() != hj.rows()) {
    throw std::invalid_argument("cca: sample counts differ (" + std::to_string(hi.rows()) +
                                " vs " + std::to_string(hj.rows()) + ")");
  }
  const std::size_t m = hi.rows();
  if (m <= r) {
    throw std::invalid_argument("cca: need more samples than components (m=" + std::to_string(m) +
                                ", r=" + std::to_string(r) + ")");
  }
  if (r == 0 || r > std::min(hi.cols(), hj.cols())) {
    throw std::invalid_argument("cca: r=" + std::to_string(r) + " must be in [1, min(d_i, d_j)]");
  }
  if (ridge < 0.0) throw std::invalid_argument("cca: ridge must be non-negative");
  require_finite(hi, "cca");
  require_finite(hj, "cca");

  const Matrix xi = center_columns(hi);
  const Matrix xj = center_columns(hj);
  Matrix cii = detail::covariance(xi, xi);
  Matrix cjj = detail::covariance(xj, xj);
  const Matrix cij = detail::covariance(xi, xj);

  if (ridge == 0.0) {
    for (const Matrix* c : {&cii, &cjj}) {
      const Svd d = svd(*c);
      if (d.s.front() == 0.0 || d.s.back() <= 1e-12 * d.s.front()) {
        throw std::invalid_argument(
            "cca: covariance is singular without regularisation; raise the ridge above 0");
      }
    }
  }
  for (std::size_t i = 0; i < cii.rows(); ++i) cii(i, i) += ridge;
  for (std::size_t i = 0; i < cjj.rows(); ++i) cjj(i, i) += ridge;

  const Matrix wi = detail::inverse_sqrt_spd(cii);
  const Matrix wj = detail::inverse_sqrt_spd(cjj);
  const Matrix t = matmul(matmul(wi, cij), wj);
  const Svd d = svd(t);

  CcaResult out;
  out.proj_i = matmul(wi, leading_columns(d.u, r));
  out.proj_j = matmul(wj, leading_columns(transpose(d.vt), r));
  out.corrs.assign(d.s.begin(), d.s.begin() + static_cast<std::ptrdiff_t>(r));
  return out;
}

/// Linear CKA between two representations of the same m samples.
inline double cka(const Matrix& x, const Matrix& y) {
  if (x.rows() != y.rows()) throw std::invalid_argument("cka: sample counts differ");
  if (x.rows() < 2) throw std::invalid_argument("cka: need at least two samples");
  const Matrix xc = center_columns(x);
  const Matrix yc = center_columns(y);
  const double nx = frobenius_norm(matmul_tn(xc, xc));
  const double ny = frobenius_norm(matmul_tn(yc, yc));
  if (nx == 0.0 || ny == 0.0) throw std::invalid_argument("cka: zero-variance representation");
  const double cross = frobenius_norm(matmul_tn(xc, yc));
  return std::clamp((cross * cross) / (nx * ny), 0.0, 1.0);
}

struct CosineResult {
  double value = 0.0;
  // Set when either vector is zero; value is then 0 ("no evidence").
  bool degenerate = false;
};

inline CosineResult cosine(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) {
    throw std::invalid_argument("cosine: dimension mismatch " + std::to_string(u.size()) + " vs " +
                                std::to_string(v.size()));
  }
  const double nu = norm2(u);
  const double nv = norm2(v);
  if (nu == 0.0 || nv == 0.0) return {0.0, true};
  return {std::clamp(dot(u, v) / (nu * nv), -1.0, 1.0), false};
}

}  // namespace hpfl
