// Copyright (C) 2026 The hpfl Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "hpfl/gradcheck.hpp"
#include "hpfl/server.hpp"
#include "test_util.hpp"

using namespace hpfl;
using hpfl::testing::random_matrix;

namespace {

std::vector<AdapterSet> random_locals(const std::vector<ModelSpec>& specs,
                                      const std::vector<std::size_t>& type_of, std::uint64_t seed) {
  // Shared frozen A, B per type (as after alignment); P, Q, LoRA random.
  std::vector<AdapterSet> base;
  for (std::size_t t = 0; t < specs.size(); ++t) {
    base.push_back(make_adapter_set(specs[t], 3, 2, seed + 100 * t));
  }
  std::vector<AdapterSet> out;
  for (std::size_t i = 0; i < type_of.size(); ++i) {
    AdapterSet s = base[type_of[i]];
    GateParams g = GateParams::zeros(s.depth());
    Rng rng(seed + i);
    randomize_adapters(s, g, 0.5, rng);
    out.push_back(std::move(s));
  }
  return out;
}

const std::vector<ModelSpec> kSpecs = {ModelSpec::mlp("s", 6, 8, 4, 3),
                                       ModelSpec::mlp("l", 6, 12, 6, 3)};

}  // namespace

TEST(RelevanceMatrix, IdenticalGradientsAllOnes) {
  const Vector g{1.0, -2.0, 0.5};
  const Matrix s = relevance_matrix({g, g, g});
  for (double v : s.data()) EXPECT_NEAR(v, 1.0, 1e-15);
}

TEST(RelevanceMatrix, OrthogonalGroupsGiveBlocks) {
  const Vector a{1, 0, 0, 0}, b{0, 0, 1, 0};
  const Matrix s = relevance_matrix({a, a, b, b});
  const Matrix want = Matrix::from_rows({{1, 1, 0, 0}, {1, 1, 0, 0}, {0, 0, 1, 1}, {0, 0, 1, 1}});
  EXPECT_LT(max_abs_diff(s.data(), want.data()), 1e-15);
}

TEST(RelevanceMatrix, ScaleInvariantAndSymmetric) {
  std::vector<Vector> g;
  for (std::uint64_t i = 0; i < 5; ++i) g.push_back(random_matrix(1, 9, i).values());
  const Matrix s = relevance_matrix(g);
  auto scaled = g;
  for (std::size_t i = 0; i < 5; ++i)
    for (double& v : scaled[i]) v *= 0.1 + 3.0 * i;
  EXPECT_LT(max_abs_diff(s.data(), relevance_matrix(scaled).data()), 1e-15);
  EXPECT_EQ(s, transpose(s));
}

TEST(RelevanceMatrix, DegenerateRowsAndErrors) {
  std::vector<bool> deg;
  const Matrix s = relevance_matrix({{1.0, 0.0}, {0.0, 0.0}, {1.0, 1.0}}, &deg);
  EXPECT_EQ(deg, (std::vector<bool>{false, true, false}));
  EXPECT_EQ(s(1, 1), 1.0);
  EXPECT_EQ(s(1, 0), 0.0);
  EXPECT_EQ(s(2, 1), 0.0);
  EXPECT_THROW(relevance_matrix({{1.0}, {1.0, 2.0}}), std::invalid_argument);
}

TEST(AggregationWeights, ClosedFormTwoClients) {
  const Matrix w = aggregation_weights(Matrix::identity(2), 0.5);
  const double e2 = std::exp(2.0);
  EXPECT_NEAR(w(0, 0), e2 / (e2 + 1.0), 1e-12);
  EXPECT_NEAR(w(0, 0), 0.880797, 1e-6);
  EXPECT_LT(row_stochastic_error(w), 1e-12);
}

TEST(AggregationWeights, UniformCases) {
  const Matrix ones(4, 4, 1.0);
  for (double tau : {0.01, 0.5, 10.0}) {
    const Matrix w = aggregation_weights(ones, tau);
    for (double v : w.data()) EXPECT_NEAR(v, 0.25, 1e-15);
  }
  const Matrix s = relevance_matrix({{1, 0}, {0, 1}, {1, 1}});
  const Matrix hot = aggregation_weights(s, 1e3);
  for (double v : hot.data()) EXPECT_NEAR(v, 1.0 / 3, 1e-3);
  EXPECT_THROW(aggregation_weights(s, 0.0), std::invalid_argument);
  EXPECT_THROW(aggregation_weights(s, -1.0), std::invalid_argument);
}

TEST(AggregationWeights, MonotoneAndDegenerateUniform) {
  std::vector<Vector> g;
  for (std::uint64_t i = 0; i < 6; ++i) g.push_back(random_matrix(1, 5, 40 + i).values());
  g.push_back(Vector(5, 0.0));
  const RelevanceState st = compute_relevance(g, 0.5);
  EXPECT_LT(row_stochastic_error(st.w), 1e-9);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 7; ++j)
      for (std::size_t k = 0; k < 7; ++k)
        if (st.s(i, j) > st.s(i, k)) {
          EXPECT_GT(st.w(i, j), st.w(i, k));
        }
  for (std::size_t j = 0; j < 7; ++j) EXPECT_DOUBLE_EQ(st.w(6, j), 1.0 / 7);
}

TEST(Aggregate, SingletonIsIdentity) {
  const auto locals = random_locals(kSpecs, {0}, 1);
  const auto g = aggregate(locals, Matrix::identity(1), {0});
  EXPECT_EQ(g[0], locals[0]);
}

TEST(Aggregate, EqualWeightsHomogeneousIsMean) {
  const auto locals = random_locals(kSpecs, {1, 1, 1}, 2);
  const auto g = aggregate_equal(locals, {1, 1, 1});
  for (std::size_t l = 0; l < locals[0].depth(); ++l) {
    if (const auto* pq = std::get_if<PqLoraAdapter>(&g[0].layers[l])) {
      Matrix mean(pq->p.rows(), pq->p.cols());
      for (const auto& s : locals) mean.axpy(1.0 / 3, std::get<PqLoraAdapter>(s.layers[l]).p);
      EXPECT_LT(frobenius_distance(pq->p, mean), 1e-14);
    } else {
      Matrix mean = Matrix(std::get<LoraAdapter>(g[0].layers[l]).a.rows(),
                           std::get<LoraAdapter>(g[0].layers[l]).a.cols());
      for (const auto& s : locals) mean.axpy(1.0 / 3, std::get<LoraAdapter>(s.layers[l]).a);
      EXPECT_LT(frobenius_distance(std::get<LoraAdapter>(g[0].layers[l]).a, mean), 1e-14);
    }
  }
  EXPECT_EQ(g[0], g[1]);
  EXPECT_EQ(g[1], g[2]);
}

TEST(Aggregate, HeterogeneousRulesAndTheorem2) {
  const std::vector<std::size_t> type_of{0, 1, 0, 1, 1};
  const auto locals = random_locals(kSpecs, type_of, 3);
  std::vector<Vector> grads;
  for (std::uint64_t i = 0; i < 5; ++i) grads.push_back(random_matrix(1, 7, 70 + i).values());
  const Matrix w = compute_relevance(grads, 0.5).w;
  const auto g = aggregate(locals, w, type_of);
  for (std::size_t i = 0; i < 5; ++i) {
    require_compatible(g[i], locals[i], "dispatch");
    for (std::size_t k = 0; k < 2; ++k) {
      // Own frozen A, B retained.
      EXPECT_EQ(g[i].block(k).a, locals[i].block(k).a);
      EXPECT_EQ(g[i].block(k).b, locals[i].block(k).b);
      // P over all clients; Theorem 2 for same-type sources.
      Matrix p(3, 3);
      for (std::size_t j = 0; j < 5; ++j) p.axpy(w(i, j), locals[j].block(k).p);
      EXPECT_LT(frobenius_distance(g[i].block(k).p, p), 1e-14);
      PqLoraAdapter gq = g[i].block(k);
      std::fill(gq.q.begin(), gq.q.end(), 0.0);
      Matrix ideal(gq.b.rows(), gq.a.cols());
      for (std::size_t j = 0; j < 5; ++j) {
        PqLoraAdapter lj = locals[i].block(k);  // i's frozen factors, j's P
        lj.p = locals[j].block(k).p;
        ideal.axpy(w(i, j), delta_weight(lj).weight);
      }
      EXPECT_LT(frobenius_distance(delta_weight(gq).weight, ideal), 1e-10);
    }
    // Conventional layers: cohort-renormalised.
    double cohort = 0.0;
    for (std::size_t j = 0; j < 5; ++j) cohort += type_of[j] == type_of[i] ? w(i, j) : 0.0;
    const auto& lo = std::get<LoraAdapter>(g[i].layers[0]);
    Matrix want(lo.b.rows(), lo.b.cols());
    for (std::size_t j = 0; j < 5; ++j) {
      if (type_of[j] == type_of[i]) want.axpy(w(i, j) / cohort, std::get<LoraAdapter>(locals[j].layers[0]).b);
    }
    EXPECT_LT(frobenius_distance(lo.b, want), 1e-14);
  }
}

TEST(Aggregate, PermutationEquivariance) {
  const std::vector<std::size_t> type_of{0, 1, 0, 1};
  const auto locals = random_locals(kSpecs, type_of, 4);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  std::vector<AdapterSet> pl;
  std::vector<std::size_t> pt;
  for (std::size_t i : perm) {
    pl.push_back(locals[i]);
    pt.push_back(type_of[i]);
  }
  const auto g = aggregate_equal(locals, type_of);
  const auto gp = aggregate_equal(pl, pt);
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_LT(frobenius_distance(gp[k].block(0).p, g[perm[k]].block(0).p), 1e-14);
  }
}

TEST(Aggregate, RejectsBadInputs) {
  const auto locals = random_locals(kSpecs, {0, 1}, 5);
  EXPECT_THROW(aggregate(locals, Matrix(2, 2, 0.3), {0, 1}), std::invalid_argument);
  EXPECT_THROW(aggregate(locals, Matrix::identity(3), {0, 1}), std::invalid_argument);
  EXPECT_THROW(aggregate(locals, Matrix::identity(2), {0, 0}), std::invalid_argument);
}

TEST(AdapterChecksum, DetectsChanges) {
  auto locals = random_locals(kSpecs, {0}, 6);
  const auto h = adapter_checksum(locals[0]);
  EXPECT_EQ(h, adapter_checksum(locals[0]));
  locals[0].block(0).q[0] += 1e-12;
  EXPECT_NE(h, adapter_checksum(locals[0]));
}
