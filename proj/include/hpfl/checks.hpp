// Copyright (C) 2026 The hpfl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Self-contained property suites behind `hpfl check --suite NAME` and the
// acceptance criteria 1-7 and 12. Every fixture is seeded from `seed`, so a
// report is reproducible bit for bit.
//
//   theorem1   span{b_i a_j^T} has dimension r^2 for orthonormal A, B
//   theorem2   zero aggregation error with shared frozen A, B (Appendix A)
//   gradients  analytic adapter gradients vs central finite differences
//   alignment  A-feature gap reduction, orthonormality, CCA sanity
//   rela       weight algebra, EMA order sensitivity, sanitization contract

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "hpfl/adapter.hpp"
#include "hpfl/align.hpp"
#include "hpfl/bench.hpp"
#include "hpfl/client.hpp"
#include "hpfl/gradcheck.hpp"
#include "hpfl/linalg.hpp"
#include "hpfl/server.hpp"

namespace hpfl {

struct PropertyResult {
  std::string name;
  bool passed = false;
  std::string detail;  // "key=value ..." measurements
};

struct SuiteReport {
  std::string suite;
  std::uint64_t seed = 0;
  std::vector<PropertyResult> properties;

  bool passed() const {
    return std::all_of(properties.begin(), properties.end(),
                       [](const PropertyResult& p) { return p.passed; });
  }
  const PropertyResult& at(const std::string& name) const {
    for (const auto& p : properties) {
      if (p.name == name) return p;
    }
    throw std::out_of_range("SuiteReport: no property '" + name + "'");
  }
};

inline const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names{"theorem1", "theorem2", "gradients", "alignment",
                                              "rela"};
  return names;
}

namespace detail {

inline std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

class Detail {
 public:
  template <class T>
  Detail& operator()(const std::string& key, const T& value) {
    if (!out_.empty()) out_ += ' ';
    out_ += key + '=';
    if constexpr (std::is_floating_point_v<T>) {
      out_ += sci(value);
    } else if constexpr (std::is_convertible_v<T, std::string>) {
      out_ += std::string(value);
    } else {
      out_ += std::to_string(value);
    }
    return *this;
  }
  std::string str() const { return out_; }

 private:
  std::string out_;
};

inline std::size_t pick(std::initializer_list<std::size_t> options, Rng& rng) {
  std::uniform_int_distribution<std::size_t> u(0, options.size() - 1);
  return *(options.begin() + u(rng));
}

inline Matrix softmax_rows(const Matrix& z) {
  Matrix w(z.rows(), z.cols());
  for (std::size_t i = 0; i < z.rows(); ++i) {
    const auto row = z.row(i);
    const double m = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (std::size_t j = 0; j < z.cols(); ++j) sum += w(i, j) = std::exp(row[j] - m);
    for (std::size_t j = 0; j < z.cols(); ++j) w(i, j) /= sum;
  }
  return w;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Theorem 1 (criterion 2)
// ---------------------------------------------------------------------------

inline SuiteReport check_theorem1(std::uint64_t seed = 0) {
  constexpr std::size_t kSeeds = 50;
  std::size_t full = 0, deficient_detected = 0;
  std::string first_failure;
  for (std::size_t s = 0; s < kSeeds; ++s) {
    Rng rng = make_rng(seed, "check-theorem1", s);
    const std::size_t r = 2 + s % 3;
    std::uniform_int_distribution<std::size_t> dim(r, 16);
    const std::size_t d_in = dim(rng), d_out = dim(rng);
    PqLoraAdapter ad = init_orthogonal(r, d_in, d_out, derive_seed(seed, "theorem1-init", s));
    const std::size_t got = span_dimension(ad);
    if (got == r * r) {
      ++full;
    } else if (first_failure.empty()) {
      first_failure = "r=" + std::to_string(r) + " rank=" + std::to_string(got);
    }
    // Rank-deficient A: the last row duplicates the first.
    for (std::size_t c = 0; c < d_in; ++c) ad.a(r - 1, c) = ad.a(0, c);
    if (span_dimension(ad) < r * r) ++deficient_detected;
  }
  SuiteReport rep{"theorem1", seed, {}};
  rep.properties.push_back({"span_dimension_is_r_squared", full == kSeeds,
                            detail::Detail()("full_rank", full)("seeds", kSeeds)("tol", 1e-8)
                                .str() + (first_failure.empty() ? "" : " first_failure=" + first_failure)});
  rep.properties.push_back({"rank_deficient_A_loses_rank", deficient_detected == kSeeds,
                            detail::Detail()("detected", deficient_detected)("seeds", kSeeds).str()});
  return rep;
}

// ---------------------------------------------------------------------------
// Theorem 2 (criterion 1)
// ---------------------------------------------------------------------------

/// Aggregation error of one random configuration, computed through the
/// production `aggregate` path: || sum_j w_j B P_j A - B (sum_j w_j P_j) A ||_F.
inline double theorem2_delta(std::uint64_t seed, std::size_t* clients = nullptr) {
  Rng rng = make_rng(seed, "check-theorem2");
  std::uniform_int_distribution<std::size_t> nc(2, 8);
  const std::size_t n = nc(rng);
  const std::size_t r = detail::pick({2, 4, 8}, rng);
  const std::size_t d_in = detail::pick({8, 16, 32}, rng);
  const std::size_t d_out = detail::pick({8, 16, 32}, rng);
  if (clients) *clients = n;
  const PqLoraAdapter shared = init_orthogonal(std::min({r, d_in, d_out}), d_in, d_out, seed);
  std::vector<AdapterSet> locals;
  for (std::size_t j = 0; j < n; ++j) {
    PqLoraAdapter ad = shared;
    ad.p = gaussian_matrix(ad.rank(), ad.rank(), 1.0, rng);  // Q stays 0
    locals.push_back(AdapterSet{{ad}, {1}});
  }
  const Matrix w = detail::softmax_rows(gaussian_matrix(n, n, 2.0, rng));
  const auto dispatch = aggregate(locals, w, std::vector<std::size_t>(n, 0));
  double worst = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    Matrix ideal(d_out, d_in);
    for (std::size_t j = 0; j < n; ++j) ideal.axpy(w(i, j), delta_weight(locals[j].block(0)).weight);
    worst = std::max(worst, frobenius_distance(delta_weight(dispatch[i].block(0)).weight, ideal));
  }
  return worst;
}

inline SuiteReport check_theorem2(std::uint64_t seed = 0) {
  constexpr std::size_t kConfigs = 100;
  constexpr double kTol = 1e-10;
  double worst = 0.0;
  std::size_t min_n = 99, max_n = 0;
  for (std::size_t c = 0; c < kConfigs; ++c) {
    std::size_t n = 0;
    worst = std::max(worst, theorem2_delta(derive_seed(seed, "theorem2-config", c), &n));
    min_n = std::min(min_n, n);
    max_n = std::max(max_n, n);
  }
  SuiteReport rep{"theorem2", seed, {}};
  rep.properties.push_back({"zero_aggregation_error", worst <= kTol,
                            detail::Detail()("max_delta", worst)("threshold", kTol)(
                                "configs", kConfigs)("clients", std::to_string(min_n) + ".." +
                                                                    std::to_string(max_n))
                                .str()});
  return rep;
}

// ---------------------------------------------------------------------------
// Gradients (criterion 3)
// ---------------------------------------------------------------------------

inline SuiteReport check_gradients_suite(std::uint64_t seed = 0) {
  constexpr std::size_t kPoints = 20;
  constexpr double kTol = 1e-4;
  const ModelSpec spec = ModelSpec::mlp("gradcheck", 16, 16, 4, 8);
  const FrozenModel model =
      build_frozen(spec, derive_seed(seed, "gradcheck-backbone"), PretrainConfig{.steps = 0});
  double worst = 0.0;
  std::string worst_tensor;
  std::size_t tensors = 0;
  for (std::size_t k = 0; k < kPoints; ++k) {
    Rng rng = make_rng(seed, "check-gradients", k);
    AdapterSet local = make_adapter_set(spec, 4, 2, derive_seed(seed, "gradcheck-local", k));
    AdapterSet global = local;
    GateParams gates = GateParams::zeros(spec.depth());
    GateParams unused = gates;
    randomize_adapters(local, gates, 0.5, rng);
    randomize_adapters(global, unused, 0.5, rng);
    Batch batch = sample_mixture(gaussian_matrix(8, 16, 1.0, rng), 1.0, 12, rng);
    const GradCheckReport r =
        check_gradients(model, local, global, gates, batch, ForwardMode::gated_dual);
    for (const auto& t : r.tensors) {
      ++tensors;
      if (t.rel_error > worst) {
        worst = t.rel_error;
        worst_tensor = t.name;
      }
    }
  }
  SuiteReport rep{"gradients", seed, {}};
  rep.properties.push_back({"finite_difference_agreement", worst <= kTol,
                            detail::Detail()("max_rel_error", worst)("threshold", kTol)(
                                "worst_tensor", worst_tensor)("points", kPoints)("tensors", tensors)
                                .str()});
  return rep;
}

// ---------------------------------------------------------------------------
// Alignment and CCA (criteria 6, 7)
// ---------------------------------------------------------------------------

inline SuiteReport check_alignment(std::uint64_t seed = 0) {
  SuiteReport rep{"alignment", seed, {}};
  ScenarioConfig cfg;  // default two-type toy pair: 16x8 vs 32x12, N_B = 4
  cfg.seed = seed;
  const Scenario sc = generate_scenario(cfg);
  const Backbones bb = build_backbones(sc);
  const AlignmentResult res = align_scenario(sc, bb);
  double worst_ratio = 0.0, worst_orth = 0.0;
  std::string ratios;
  for (const auto& l : res.layers) {
    const double ratio = l.a_gap_after / l.a_gap_before;
    worst_ratio = std::max(worst_ratio, ratio);
    worst_orth = std::max(worst_orth, l.a_orth_error);
    ratios += (ratios.empty() ? "" : ",") + detail::sci(ratio);
  }
  rep.properties.push_back({"a_gap_halved_every_layer", !res.layers.empty() && worst_ratio <= 0.5,
                            detail::Detail()("max_gap_ratio", worst_ratio)("threshold", 0.5)(
                                "layers", res.layers.size())("ratios", ratios)
                                .str()});
  rep.properties.push_back({"aligned_A_row_orthonormal", worst_orth <= 1e-6,
                            detail::Detail()("max_AAt_minus_I", worst_orth)("threshold", 1e-6).str()});

  // CCA sanity: a rotated copy is perfectly correlated, independent
  // features are not (m = 500, d = 8).
  Rng rng = make_rng(seed, "check-cca");
  const Matrix h = gaussian_matrix(500, 8, 1.0, rng);
  const Matrix rot = nearest_orthogonal(gaussian_matrix(8, 8, 1.0, rng), Orientation::rows).matrix;
  const CcaResult same = cca(h, matmul(h, rot), 8, default_cca_ridge(h, h));
  const double min_corr = *std::min_element(same.corrs.begin(), same.corrs.end());
  rep.properties.push_back({"cca_rotated_copy", min_corr >= 0.999,
                            detail::Detail()("min_corr", min_corr)("threshold", 0.999).str()});
  const Matrix other = gaussian_matrix(500, 8, 1.0, rng);
  const CcaResult indep = cca(h, other, 8, default_cca_ridge(h, other));
  rep.properties.push_back({"cca_independent", indep.corrs.front() < 0.3,
                            detail::Detail()("first_corr", indep.corrs.front())("threshold", 0.3).str()});
  return rep;
}

// ---------------------------------------------------------------------------
// RELA (criteria 4, 5, 12)
// ---------------------------------------------------------------------------

/// Small fedmosaic run used by the row-stochasticity and shared-mask checks.
inline RunResult rela_fixture_run(std::uint64_t seed) {
  ScenarioConfig cfg;
  cfg.seed = seed;
  cfg.rounds = 4;
  cfg.local_steps = 20;
  cfg.eval_every = 4;
  const Scenario sc = generate_scenario(cfg);
  const Backbones bb = build_backbones(sc);
  const AlignmentResult al = align_scenario(sc, bb);
  RunOptions opt;
  opt.fast_adaptation = false;
  return run(sc, bb, al.sets, Method::fedmosaic, opt);
}

inline SuiteReport check_rela(std::uint64_t seed = 0) {
  SuiteReport rep{"rela", seed, {}};
  using detail::Detail;

  // Closed form: N = 2, S = I, tau = 0.5.
  {
    const Matrix w = aggregation_weights(Matrix::identity(2), 0.5);
    const double want = std::exp(2.0) / (std::exp(2.0) + 1.0);
    const double err = std::abs(w(0, 0) - want);
    rep.properties.push_back({"closed_form_two_clients", err <= 1e-9,
                              Detail()("w11", w(0, 0))("expected", want)("abs_error", err).str()});
  }

  // Row-stochastic every round of a real run, and on random fixtures.
  const RunResult fixture = rela_fixture_run(seed);
  {
    double worst = 0.0;
    for (const auto& rec : fixture.rounds) worst = std::max(worst, row_stochastic_error(rec.w));
    for (std::size_t k = 0; k < 50; ++k) {
      Rng rng = make_rng(seed, "check-rela-rows", k);
      std::vector<Vector> g;
      for (std::size_t i = 0; i < 2 + k % 10; ++i) g.push_back(gaussian_vector(32, 1.0, rng));
      worst = std::max(worst, row_stochastic_error(compute_relevance(g, 0.05 + 0.2 * (k % 5)).w));
    }
    rep.properties.push_back({"row_stochastic_every_round", worst <= 1e-9,
                              Detail()("max_row_error", worst)("threshold", 1e-9)(
                                  "run_rounds", fixture.rounds.size())
                                  .str()});
  }

  // Cosine scale invariance: bit-identical W under power-of-two rescaling
  // (exact in floating point), 1e-15 under arbitrary positive rescaling.
  {
    bool exact = true;
    double worst = 0.0;
    for (std::size_t k = 0; k < 20; ++k) {
      Rng rng = make_rng(seed, "check-rela-scale", k);
      std::vector<Vector> g;
      for (std::size_t i = 0; i < 6; ++i) g.push_back(gaussian_vector(128, 1.0, rng));
      const Matrix w = compute_relevance(g, 0.5).w;
      auto pow2 = g, any = g;
      std::uniform_real_distribution<double> scale(1e-3, 1e3);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double p = std::ldexp(1.0, static_cast<int>(i * 7 % 13) - 6);
        const double a = scale(rng);
        for (double& v : pow2[i]) v *= p;
        for (double& v : any[i]) v *= a;
      }
      exact = exact && compute_relevance(pow2, 0.5).w == w;
      worst = std::max(worst, max_abs_diff(compute_relevance(any, 0.5).w.data(), w.data()));
    }
    rep.properties.push_back({"scale_invariance", exact && worst <= 1e-15,
                              Detail()("pow2_bit_identical", exact ? "yes" : "no")(
                                  "max_diff_arbitrary", worst)
                                  .str()});
  }

  // Monotone in S within each row.
  {
    std::size_t violations = 0, pairs = 0;
    for (std::size_t k = 0; k < 20; ++k) {
      Rng rng = make_rng(seed, "check-rela-monotone", k);
      std::vector<Vector> g;
      for (std::size_t i = 0; i < 7; ++i) g.push_back(gaussian_vector(16, 1.0, rng));
      const RelevanceState st = compute_relevance(g, 0.5);
      for (std::size_t i = 0; i < 7; ++i)
        for (std::size_t j = 0; j < 7; ++j)
          for (std::size_t l = 0; l < 7; ++l) {
            if (st.s(i, j) > st.s(i, l)) {
              ++pairs;
              violations += st.w(i, j) > st.w(i, l) ? 0 : 1;
            }
          }
    }
    rep.properties.push_back({"monotone_in_similarity", violations == 0,
                              Detail()("violations", violations)("pairs", pairs).str()});
  }

  // EMA order sensitivity: two probe-gradient streams with the same
  // multiset of batch gradients in opposite task order.
  {
    ScenarioConfig cfg;
    cfg.seed = seed;
    const Scenario sc = generate_scenario(cfg);
    const FrozenModel probe =
        build_frozen(sc.probe, derive_seed(seed, "init-probe"), cfg.pretrain);
    const auto stream = [&](const Batch& b) {
      std::vector<Vector> out;
      for (const Batch& part : detail::split_rows(b, 4)) out.push_back(last_layer_gradient(probe, part));
      return out;
    };
    // Tasks of different clusters: different labellings of similar inputs.
    const auto ga = stream(sc.clients.front().train.front());
    const auto gb = stream(sc.clients.back().train.front());
    std::vector<Vector> ab = ga, ba = gb;
    ab.insert(ab.end(), gb.begin(), gb.end());
    ba.insert(ba.end(), ga.begin(), ga.end());
    const std::size_t dim = ga.front().size();
    Vector mean_ab(dim, 0.0), mean_ba(dim, 0.0), ema_ab(dim, 0.0), ema_ba(dim, 0.0);
    for (std::size_t t = 0; t < ab.size(); ++t) {
      for (std::size_t k = 0; k < dim; ++k) {
        mean_ab[k] += ab[t][k] / static_cast<double>(ab.size());
        mean_ba[k] += ba[t][k] / static_cast<double>(ba.size());
      }
      ema_ab = update_ema(ema_ab, ab[t], 0.5);
      ema_ba = update_ema(ema_ba, ba[t], 0.5);
    }
    const double mean_diff = max_abs_diff(mean_ab, mean_ba);
    Vector diff(dim);
    for (std::size_t k = 0; k < dim; ++k) diff[k] = ema_ab[k] - ema_ba[k];
    const double ema_diff = norm2(diff);
    rep.properties.push_back({"ema_order_sensitivity", mean_diff < 1e-12 && ema_diff > 0.1,
                              Detail()("plain_mean_max_diff", mean_diff)("ema_l2_diff", ema_diff)(
                                  "alpha", 0.5)("stream_len", ab.size())
                                  .str()});
  }

  // Sanitization contract.
  {
    const SanitizationSpec spec = SanitizationSpec::make(128, 0.4, 1e-4, derive_seed(seed, "mask"));
    Rng rng = make_rng(seed, "check-sanitize");
    const Vector g = gaussian_vector(128, 1.0, rng);
    bool masked_zero = true;
    double sum = 0.0, sq = 0.0;
    std::size_t draws = 0;
    while (draws < 100000) {
      const Vector out = sanitize(g, spec, rng);
      for (std::size_t k = 0; k < out.size(); ++k) {
        if (!spec.mask[k]) {
          masked_zero = masked_zero && out[k] == 0.0 && !std::signbit(out[k]);
        } else if (draws < 100000) {
          const double e = out[k] - g[k];
          sum += e;
          sq += e * e;
          ++draws;
        }
      }
    }
    const double mean = sum / static_cast<double>(draws);
    const double sd = std::sqrt(sq / static_cast<double>(draws) - mean * mean);
    const double rel = std::abs(sd - spec.mu) / spec.mu;
    rep.properties.push_back({"masked_dimensions_exactly_zero", masked_zero,
                              Detail()("kept", spec.popcount())("dim", spec.dim()).str()});
    rep.properties.push_back({"noise_std_matches_mu", rel <= 0.02,
                              Detail()("empirical_std", sd)("mu", spec.mu)("rel_error", rel)(
                                  "draws", draws)
                                  .str()});

    // Shared mask: every transmitted vector of the fixture run has exactly
    // the same support, and it is the run's mask.
    bool shared = true;
    std::size_t vectors = 0;
    std::vector<std::uint8_t> support0;
    for (const auto& rec : fixture.rounds) {
      for (const Vector& t : rec.transmitted) {
        std::vector<std::uint8_t> support(t.size());
        for (std::size_t k = 0; k < t.size(); ++k) support[k] = t[k] != 0.0;
        if (support0.empty()) support0 = support;
        shared = shared && support == support0;
        ++vectors;
      }
    }
    const std::size_t want = static_cast<std::size_t>(std::llround(0.4 * 128));
    const auto nnz = static_cast<std::size_t>(std::count(support0.begin(), support0.end(), 1));
    rep.properties.push_back({"mask_identical_across_clients", shared && vectors > 0 && nnz == want,
                              Detail()("vectors", vectors)("support", nnz)("expected_support", want)
                                  .str()});
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Dispatch and reporting
// ---------------------------------------------------------------------------

inline SuiteReport run_suite(const std::string& name, std::uint64_t seed = 0) {
  if (name == "theorem1") return check_theorem1(seed);
  if (name == "theorem2") return check_theorem2(seed);
  if (name == "gradients") return check_gradients_suite(seed);
  if (name == "alignment") return check_alignment(seed);
  if (name == "rela") return check_rela(seed);
  throw std::invalid_argument("unknown suite '" + name +
                              "' (expected theorem1|theorem2|gradients|alignment|rela)");
}

/// Plain-text report: one "suite property PASS|FAIL key=value..." line per
/// property, then a summary line.
inline std::string format_report(const SuiteReport& rep) {
  std::ostringstream os;
  os << "# hpfl check report\n# suite: " << rep.suite << "\n# seed: " << rep.seed << "\n";
  std::size_t ok = 0;
  for (const auto& p : rep.properties) {
    os << rep.suite << ' ' << p.name << ' ' << (p.passed ? "PASS" : "FAIL") << ' ' << p.detail
       << '\n';
    ok += p.passed ? 1 : 0;
  }
  os << "summary " << rep.suite << ' ' << ok << '/' << rep.properties.size() << ' '
     << (rep.passed() ? "PASS" : "FAIL") << '\n';
  return os.str();
}

}  // namespace hpfl
