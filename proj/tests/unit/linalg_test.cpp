// Copyright (C) 2026 The hpfl Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "hpfl/linalg.hpp"
#include "test_util.hpp"

using namespace hpfl;
using hpfl::testing::random_matrix;
using hpfl::testing::random_orthogonal;
using hpfl::testing::random_row_orthonormal;
using hpfl::testing::relative_error;

// ---------------------------------------------------------------------------
// svd
// ---------------------------------------------------------------------------

TEST(Svd, DiagonalIsItsOwnDecomposition) {
  const Svd d = svd(Matrix::from_rows({{3, 0}, {0, 2}}));
  EXPECT_EQ(d.u, Matrix::identity(2));
  EXPECT_EQ(d.vt, Matrix::identity(2));
  EXPECT_DOUBLE_EQ(d.s[0], 3.0);
  EXPECT_DOUBLE_EQ(d.s[1], 2.0);
}

TEST(Svd, IdentityHasUnitSingularValues) {
  const Svd d = svd(Matrix::identity(3));
  ASSERT_EQ(d.s.size(), 3u);
  for (double s : d.s) EXPECT_DOUBLE_EQ(s, 1.0);
}

TEST(Svd, RandomTallMatrixReconstructs) {
  const Matrix m = random_matrix(5, 3, 11);
  const Svd d = svd(m);
  EXPECT_LT(relative_error(reconstruct(d), m), 1e-8);
  EXPECT_LT(column_orthonormality_error(d.u), 1e-10);
  EXPECT_LT(row_orthonormality_error(d.vt), 1e-10);
}

TEST(Svd, ReconstructionPropertyUpTo64) {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    Rng rng(seed);
    std::uniform_int_distribution<std::size_t> dim(1, 64);
    const std::size_t r = dim(rng), c = dim(rng);
    const Matrix m = random_matrix(r, c, seed + 1000, 3.0);
    const Svd d = svd(m);
    ASSERT_EQ(d.s.size(), std::min(r, c));
    EXPECT_LT(relative_error(reconstruct(d), m), 1e-8) << r << "x" << c;
    for (std::size_t k = 0; k + 1 < d.s.size(); ++k) EXPECT_GE(d.s[k], d.s[k + 1]);
    for (double s : d.s) EXPECT_GE(s, 0.0);
    EXPECT_LT(column_orthonormality_error(d.u), 1e-9);
    EXPECT_LT(row_orthonormality_error(d.vt), 1e-9);
  }
}

TEST(Svd, RankDeficientStillHasOrthonormalFactors) {
  // Two identical columns and a zero column.
  Matrix m = random_matrix(6, 4, 3);
  for (std::size_t i = 0; i < 6; ++i) {
    m(i, 1) = m(i, 0);
    m(i, 3) = 0.0;
  }
  const Svd d = svd(m);
  EXPECT_LT(relative_error(reconstruct(d), m), 1e-10);
  EXPECT_LT(column_orthonormality_error(d.u), 1e-10);
  EXPECT_NEAR(d.s[3], 0.0, 1e-12);
  EXPECT_NEAR(d.s[2], 0.0, 1e-12);
}

TEST(Svd, WideMatrix) {
  const Matrix m = random_matrix(3, 7, 5);
  const Svd d = svd(m);
  EXPECT_EQ(d.u.rows(), 3u);
  EXPECT_EQ(d.vt.cols(), 7u);
  EXPECT_LT(relative_error(reconstruct(d), m), 1e-10);
}

TEST(Svd, RejectsNonFinite) {
  Matrix m = Matrix::identity(2);
  m(0, 1) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(svd(m), std::invalid_argument);
  m(0, 1) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(svd(m), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// pinv
// ---------------------------------------------------------------------------

TEST(Pinv, DiagonalInverse) {
  const Matrix p = pinv(Matrix::from_rows({{2, 0}, {0, 4}}));
  EXPECT_NEAR(p(0, 0), 0.5, 1e-15);
  EXPECT_NEAR(p(1, 1), 0.25, 1e-15);
  EXPECT_NEAR(p(0, 1), 0.0, 1e-15);
}

TEST(Pinv, ZeroMapsToZero) {
  const Matrix p = pinv(Matrix(3, 2));
  EXPECT_EQ(p.rows(), 2u);
  EXPECT_EQ(p.cols(), 3u);
  for (double v : p.data()) EXPECT_EQ(v, 0.0);
}

TEST(Pinv, FullRankSquareIsInverse) {
  const Matrix m = random_matrix(4, 4, 21);
  const Matrix prod = matmul(m, pinv(m));
  EXPECT_LT(frobenius_distance(prod, Matrix::identity(4)), 1e-6);
}

TEST(Pinv, MoorePenroseIdentities) {
  std::vector<Matrix> cases = {random_matrix(5, 3, 1), random_matrix(3, 6, 2)};
  // rank 2, 5x4
  cases.push_back(matmul(random_matrix(5, 2, 3), random_matrix(2, 4, 4)));
  for (const Matrix& a : cases) {
    const Matrix x = pinv(a, 1e-10);
    EXPECT_LT(frobenius_distance(matmul(matmul(a, x), a), a), 1e-6);
    EXPECT_LT(frobenius_distance(matmul(matmul(x, a), x), x), 1e-6);
    const Matrix ax = matmul(a, x);
    const Matrix xa = matmul(x, a);
    EXPECT_LT(frobenius_distance(ax, transpose(ax)), 1e-6);
    EXPECT_LT(frobenius_distance(xa, transpose(xa)), 1e-6);
  }
}

// ---------------------------------------------------------------------------
// nearest_orthogonal
// ---------------------------------------------------------------------------

TEST(NearestOrthogonal, OrthonormalRowsAreFixed) {
  const Matrix a = random_row_orthonormal(3, 8, 9);
  const auto r = nearest_orthogonal(a, Orientation::rows);
  EXPECT_LT(frobenius_distance(r.matrix, a), 1e-10);
  EXPECT_TRUE(r.unique);
}

TEST(NearestOrthogonal, PositiveDiagonalGoesToIdentity) {
  const auto r = nearest_orthogonal(Matrix::from_rows({{2, 0}, {0, 3}}), Orientation::rows);
  EXPECT_LT(frobenius_distance(r.matrix, Matrix::identity(2)), 1e-12);
}

TEST(NearestOrthogonal, BeatsSampledOrthonormalMatrices) {
  const Matrix a = random_matrix(2, 5, 77);
  const auto r = nearest_orthogonal(a, Orientation::rows);
  EXPECT_LT(row_orthonormality_error(r.matrix), 1e-6);
  const double best = frobenius_distance(a, r.matrix);
  for (std::uint64_t s = 0; s < 1000; ++s) {
    const Matrix cand = random_row_orthonormal(2, 5, 5000 + s);
    ASSERT_LE(best, frobenius_distance(a, cand) + 1e-12) << "sample " << s;
  }
}

TEST(NearestOrthogonal, Idempotent) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Matrix a = random_matrix(4, 9, seed);
    const Matrix once = nearest_orthogonal(a, Orientation::rows).matrix;
    const Matrix twice = nearest_orthogonal(once, Orientation::rows).matrix;
    EXPECT_LT(frobenius_distance(once, twice), 1e-10);
    const Matrix b = random_matrix(9, 4, seed + 50);
    const Matrix c1 = nearest_orthogonal(b, Orientation::columns).matrix;
    EXPECT_LT(column_orthonormality_error(c1), 1e-10);
    EXPECT_LT(frobenius_distance(c1, nearest_orthogonal(c1, Orientation::columns).matrix), 1e-10);
  }
}

TEST(NearestOrthogonal, RankDeficientFlagsNonUniqueness) {
  Matrix a = random_matrix(3, 6, 4);
  for (std::size_t j = 0; j < 6; ++j) a(2, j) = a(1, j);
  const auto r = nearest_orthogonal(a, Orientation::rows);
  EXPECT_FALSE(r.unique);
  EXPECT_LT(row_orthonormality_error(r.matrix), 1e-10);
}

TEST(NearestOrthogonal, OrientationIsChecked) {
  EXPECT_THROW(nearest_orthogonal(Matrix(5, 2), Orientation::rows), std::invalid_argument);
  EXPECT_THROW(nearest_orthogonal(Matrix(2, 5), Orientation::columns), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// cca
// ---------------------------------------------------------------------------

TEST(Cca, RotatedCopyIsPerfectlyCorrelated) {
  const Matrix hi = random_matrix(300, 6, 100);
  const Matrix hj = matmul(hi, random_orthogonal(6, 101));
  const CcaResult res = cca(hi, hj, 6, 1e-12);
  for (double c : res.corrs) EXPECT_NEAR(c, 1.0, 1e-6);
}

TEST(Cca, IndependentFeaturesAreWeaklyCorrelated) {
  const Matrix hi = random_matrix(500, 8, 200);
  const Matrix hj = random_matrix(500, 8, 201);
  const CcaResult res = cca(hi, hj, 8, default_cca_ridge(hi, hj));
  EXPECT_LT(res.corrs.front(), 0.3);
  for (std::size_t k = 0; k + 1 < res.corrs.size(); ++k) EXPECT_GE(res.corrs[k], res.corrs[k + 1]);
  for (double c : res.corrs) {
    EXPECT_GE(c, 0.0);
    EXPECT_LE(c, 1.0 + 1e-9);
  }
}

TEST(Cca, FirstPairBeatsRandomProjections) {
  // Partially related views: hj mixes a linear image of hi with noise.
  const Matrix hi = random_matrix(400, 5, 300);
  Matrix hj = matmul(hi, random_matrix(5, 4, 301));
  hj += random_matrix(400, 4, 302, 2.0);
  const CcaResult res = cca(hi, hj, 3, default_cca_ridge(hi, hj));
  const Matrix zi = matmul(hi, res.proj_i);
  const Matrix zj = matmul(hj, res.proj_j);
  Vector ci(400), cj(400);
  for (std::size_t t = 0; t < 400; ++t) {
    ci[t] = zi(t, 0);
    cj[t] = zj(t, 0);
  }
  const double first = hpfl::testing::pearson(ci, cj);
  EXPECT_NEAR(first, res.corrs[0], 1e-4);  // ridge shrinks slightly
  for (std::uint64_t s = 0; s < 1000; ++s) {
    const Matrix a = random_matrix(5, 1, 9000 + 2 * s);
    const Matrix b = random_matrix(4, 1, 9001 + 2 * s);
    const Matrix pa = matmul(hi, a);
    const Matrix pb = matmul(hj, b);
    ASSERT_LE(std::abs(hpfl::testing::pearson(pa.data(), pb.data())), res.corrs[0] + 1e-9);
  }
}

TEST(Cca, InvariantUnderInvertibleTransforms) {
  const Matrix hi = random_matrix(400, 5, 400);
  Matrix hj = matmul(hi, random_matrix(5, 6, 401));
  hj += random_matrix(400, 6, 402);
  const CcaResult base = cca(hi, hj, 4, 1e-10);
  Matrix ti = random_matrix(5, 5, 403);
  for (std::size_t k = 0; k < 5; ++k) ti(k, k) += 3.0;  // well conditioned
  Matrix tj = random_matrix(6, 6, 404);
  for (std::size_t k = 0; k < 6; ++k) tj(k, k) += 3.0;
  const CcaResult moved = cca(matmul(hi, ti), matmul(hj, tj), 4, 1e-10);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(base.corrs[k], moved.corrs[k], 1e-5);
}

TEST(Cca, RejectsTooFewSamples) {
  EXPECT_THROW(cca(random_matrix(4, 4, 1), random_matrix(4, 4, 2), 4, 1e-6),
               std::invalid_argument);
}

TEST(Cca, SingularCovarianceNeedsRidge) {
  Matrix hi = random_matrix(50, 4, 1);
  for (std::size_t i = 0; i < 50; ++i) hi(i, 3) = hi(i, 0);
  const Matrix hj = random_matrix(50, 4, 2);
  EXPECT_THROW(cca(hi, hj, 2, 0.0), std::invalid_argument);
  EXPECT_NO_THROW(cca(hi, hj, 2, 1e-6));
}

// ---------------------------------------------------------------------------
// cka
// ---------------------------------------------------------------------------

TEST(Cka, SelfSimilarityIsOne) {
  const Matrix x = random_matrix(100, 6, 1);
  EXPECT_NEAR(cka(x, x), 1.0, 1e-12);
}

TEST(Cka, OrthogonalInvariance) {
  const Matrix x = random_matrix(100, 6, 2);
  EXPECT_NEAR(cka(x, matmul(x, random_orthogonal(6, 3))), 1.0, 1e-9);
}

TEST(Cka, IndependentIsLow) {
  EXPECT_LT(cka(random_matrix(200, 8, 4), random_matrix(200, 8, 5)), 0.3);
}

TEST(Cka, Symmetric) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const Matrix x = random_matrix(50, 4, 10 + s);
    const Matrix y = random_matrix(50, 7, 30 + s);
    EXPECT_NEAR(cka(x, y), cka(y, x), 1e-12);
    const double v = cka(x, y);
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Cka, RejectsZeroVariance) {
  Matrix flat(10, 3, 2.5);
  EXPECT_THROW(cka(flat, random_matrix(10, 3, 1)), std::invalid_argument);
  EXPECT_THROW(cka(Matrix(1, 3, 1.0), Matrix(1, 3, 1.0)), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// cosine
// ---------------------------------------------------------------------------

TEST(Cosine, Examples) {
  const Vector u{1.0, 2.0, -3.0};
  EXPECT_DOUBLE_EQ(cosine(u, u).value, 1.0);
  EXPECT_DOUBLE_EQ(cosine(Vector{1, 0, 0}, Vector{0, 1, 0}).value, 0.0);
  EXPECT_NEAR(cosine(u, Vector{3.0, 6.0, -9.0}).value, 1.0, 1e-15);
}

TEST(Cosine, ZeroVectorsAreDegenerate) {
  const auto c = cosine(Vector{0, 0}, Vector{0, 0});
  EXPECT_EQ(c.value, 0.0);
  EXPECT_TRUE(c.degenerate);
  EXPECT_TRUE(cosine(Vector{0, 0}, Vector{1, 0}).degenerate);
  EXPECT_FALSE(cosine(Vector{1, 0}, Vector{1, 0}).degenerate);
}

TEST(Cosine, PositiveScaleInvariance) {
  Rng rng(5);
  for (int t = 0; t < 100; ++t) {
    const Vector u = gaussian_vector(12, 1.0, rng);
    const Vector v = gaussian_vector(12, 1.0, rng);
    std::uniform_real_distribution<double> scale(0.01, 100.0);
    const double a = scale(rng), b = scale(rng);
    Vector au = u, bv = v;
    for (double& x : au) x *= a;
    for (double& x : bv) x *= b;
    const double c = cosine(u, v).value;
    EXPECT_NEAR(cosine(au, bv).value, c, 1e-14);
    EXPECT_GE(c, -1.0);
    EXPECT_LE(c, 1.0);
  }
}

TEST(Cosine, DimensionMismatchThrows) {
  EXPECT_THROW(cosine(Vector{1, 2}, Vector{1, 2, 3}), std::invalid_argument);
}
