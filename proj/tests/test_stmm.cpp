#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "stmn/finite_diff.hpp"
#include "stmn/stmm.hpp"
#include "test_util.hpp"

namespace stmn {
namespace {

using testing::append_step_kinks;
using testing::cell_step_oracle;
using testing::max_abs_diff;
using testing::probe_dot;
using testing::random_tensor;

TEST(BnStar, ConstantInputSaturates) {
  const auto r = bn_star(Tensor<double>::filled({3, 3, 2}, 0.7));
  EXPECT_DOUBLE_EQ(r.stats.sigma[0], 0.0);
  EXPECT_DOUBLE_EQ(r.stats.threshold(0), 0.7);
  for (double v : r.gate.values()) EXPECT_EQ(v, 1.0);
}

TEST(BnStar, ZeroInputIsDegenerate) {
  const Tensor<double> x({2, 2, 3});
  const auto r = bn_star(x);
  for (double v : r.gate.values()) EXPECT_EQ(v, 0.0);
  const auto g = bn_star_backward(x, r.stats, Tensor<double>::filled(x.dims(), 1.0));
  for (double v : g.values()) EXPECT_EQ(v, 0.0);
}

TEST(BnStar, HandComputedRamp) {
  const Tensor<double> x({4}, {0, 1, 2, 3});
  const auto r = bn_star(x);
  const double thr = 1.5 + 3.0 * std::sqrt(1.25);
  EXPECT_NEAR(r.stats.mu[0], 1.5, 1e-15);
  EXPECT_NEAR(r.stats.sigma[0], std::sqrt(1.25), 1e-15);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(r.gate[i], std::min(i / thr, 1.0), 1e-15);
}

TEST(BnStar, NegativeInputIsContractError) {
  EXPECT_THROW(bn_star(Tensor<double>({2}, {1.0, -0.5})), ContractError);
}

TEST(BnStar, PerChannelUsesSeparateStatistics) {
  Tensor<double> x({1, 2, 2}, {1.0, 10.0, 3.0, 30.0});
  const auto r = bn_star(x, BnScope::per_channel);
  ASSERT_EQ(r.stats.mu.size(), 2u);
  EXPECT_DOUBLE_EQ(r.stats.mu[0], 2.0);
  EXPECT_DOUBLE_EQ(r.stats.mu[1], 20.0);
  // Channel-wise scaling leaves per-channel gates unchanged.
  EXPECT_NEAR(r.gate[0], r.gate[1], 1e-15);
  EXPECT_NEAR(r.gate[2], r.gate[3], 1e-15);
}

TEST(BnStar, ScopeParsing) {
  EXPECT_EQ(parse_bn_scope("per_channel"), BnScope::per_channel);
  EXPECT_EQ(to_string(BnScope::pooled), "pooled");
  EXPECT_THROW(parse_bn_scope("layer"), ConfigError);
  EXPECT_THROW(parse_cell_kind("lstm"), ConfigError);
}

TEST(BnStar, OutputRangeOnRandomInputs) {
  Rng rng(11);
  std::uniform_int_distribution<int> kind(0, 3);
  for (int trial = 0; trial < 2000; ++trial) {
    const Shape dims{1 + static_cast<std::size_t>(trial % 4), 3, 2};
    Tensor<double> x = random_tensor<double>(dims, rng, 0.0, 5.0);
    switch (kind(rng)) {
      case 0: for (auto& v : x.values()) v = v < 2.5 ? 0.0 : v; break;
      case 1: for (auto& v : x.values()) v = 1.25; break;
      case 2: x.values()[0] = 1e6; break;
      default: break;
    }
    for (auto scope : {BnScope::pooled, BnScope::per_channel}) {
      const auto r = bn_star(x, scope);
      for (double v : r.gate.values()) {
        ASSERT_GE(v, 0.0);
        ASSERT_LE(v, 1.0);
      }
    }
  }
}

TEST(BnStar, BackwardMatchesFiniteDifferences) {
  Rng rng(12);
  for (auto scope : {BnScope::pooled, BnScope::per_channel}) {
    for (int trial = 0; trial < 20; ++trial) {
      Tensor<double> x = random_tensor<double>({4, 3, 3}, rng, 0.05, 1.0);
      x.values()[static_cast<std::size_t>(trial) % x.size()] = 8.0;  // force a clipped entry
      const auto c = random_tensor<double>(x.dims(), rng);
      const auto fwd = bn_star(x, scope);
      const auto analytic = bn_star_backward(x, fwd.stats, c, scope);
      const auto fd = finite_diff<double>(
          [&](const Tensor<double>& t) { return probe_dot(bn_star(t, scope).gate, c); }, x, 1e-3,
          [&](const Tensor<double>& t) {
            const auto r = bn_star(t, scope);
            std::vector<double> k;
            for (std::size_t i = 0; i < t.size(); ++i) {
              k.push_back(r.stats.threshold(scope == BnScope::pooled ? 0 : i % 3) - t[i]);
            }
            return k;
          });
      EXPECT_GT(fd.accepted_count(), x.size() / 2);
      EXPECT_LT(max_relative_error(analytic, fd.grad, fd.accepted), 1e-6);
    }
  }
}

StmmParams<double> small_params(Rng& rng, std::size_t df, std::size_t dm, double amp = 0.5) {
  StmmParams<double> p;
  auto k = [&](std::size_t cin) { return ConvParams<double>(random_tensor<double>({3, 3, cin, dm}, rng, -amp, amp)); };
  p.wz = k(df);
  p.uz = k(dm);
  p.wr = k(df);
  p.ur = k(dm);
  p.w = k(df);
  p.u = k(dm);
  return p;
}

TEST(StmmStep, ZeroMemoryGivesGatedCandidate) {
  Rng rng(21);
  const auto p = small_params(rng, 3, 2);
  const auto f = random_tensor<double>({5, 4, 3}, rng);
  const Tensor<double> m0({5, 4, 2});
  const auto c = stmm_step_cached(f, m0, p);
  const auto expected_cand = relu(conv2d(f, p.w));
  EXPECT_LT(max_abs_diff(c.cand, expected_cand), 1e-15);
  EXPECT_LT(max_abs_diff(c.memory, mul(c.z, expected_cand)), 1e-15);
}

TEST(StmmStep, ZeroUpdateGateCopiesMemory) {
  Rng rng(22);
  auto p = small_params(rng, 3, 2);
  p.wz = ConvParams<double>::zeros(3, 3, 3, 2);
  p.uz = ConvParams<double>::zeros(3, 3, 2, 2);
  const auto f = random_tensor<double>({4, 4, 3}, rng);
  const auto m = random_tensor<double>({4, 4, 2}, rng, 0.0, 2.0);
  const auto c = stmm_step_cached(f, m, p);
  for (double v : c.z.values()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(c.memory, m);

  const auto g = random_tensor<double>(m.dims(), rng);
  const auto grads = stmm_step_backward(c, p, g);
  EXPECT_LT(max_abs_diff(grads.grad_m_prev, g), 1e-15);
  for (double v : grads.grad_f.values()) EXPECT_EQ(v, 0.0);
}

TEST(StmmStep, ZeroCotangentGivesZeroGradients) {
  Rng rng(23);
  const auto p = small_params(rng, 2, 3);
  const auto c = stmm_step_cached(random_tensor<double>({4, 5, 2}, rng),
                                  random_tensor<double>({4, 5, 3}, rng, 0.0, 1.0), p);
  const auto g = stmm_step_backward(c, p, Tensor<double>({4, 5, 3}));
  for (double v : g.grad_f.values()) EXPECT_EQ(v, 0.0);
  for (double v : g.grad_m_prev.values()) EXPECT_EQ(v, 0.0);
  g.grad_params.for_each([](const char*, const ConvParams<double>& k) {
    for (double v : k.kernel.values()) EXPECT_EQ(v, 0.0);
  });
}

TEST(StmmStep, MatchesScalarReimplementation) {
  Rng rng(24);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t df = 1 + static_cast<std::size_t>(trial) % 3;
    const std::size_t dm = 1 + static_cast<std::size_t>(trial) % 4;
    const auto p = small_params(rng, df, dm);
    const auto f = random_tensor<double>({5, 6, df}, rng);
    const auto m = random_tensor<double>({5, 6, dm}, rng, 0.0, 1.5);
    EXPECT_LT(max_abs_diff(stmm_step(f, m, p), cell_step_oracle(true, f, m, p)), 1e-12);
    EXPECT_LT(max_abs_diff(convgru_step(f, m, p), cell_step_oracle(false, f, m, p)), 1e-12);
  }
}

TEST(StmmStep, NonnegativeAndConvex) {
  Rng rng(25);
  for (int trial = 0; trial < 200; ++trial) {
    const auto p = small_params(rng, 2, 3, 1.0);
    const auto f = random_tensor<double>({4, 4, 2}, rng, -2.0, 2.0);
    const auto m = random_tensor<double>({4, 4, 3}, rng, 0.0, 3.0);
    const auto c = stmm_step_cached(f, m, p, trial % 2 ? BnScope::per_channel : BnScope::pooled);
    for (std::size_t i = 0; i < m.size(); ++i) {
      ASSERT_GE(c.memory[i], 0.0);
      ASSERT_GE(c.z[i], 0.0);
      ASSERT_LE(c.z[i], 1.0);
      ASSERT_GE(c.r[i], 0.0);
      ASSERT_LE(c.r[i], 1.0);
      ASSERT_GE(c.memory[i], std::min(m[i], c.cand[i]) - 1e-15);
      ASSERT_LE(c.memory[i], std::max(m[i], c.cand[i]) + 1e-15);
    }
  }
}

TEST(StmmStep, ShapeErrors) {
  Rng rng(26);
  const auto p = small_params(rng, 3, 2);
  EXPECT_THROW(stmm_step(Tensor<double>({4, 4, 2}), Tensor<double>({4, 4, 2}), p), ShapeError);
  EXPECT_THROW(stmm_step(Tensor<double>({4, 4, 3}), Tensor<double>({4, 4, 3}), p), ShapeError);
  EXPECT_THROW(stmm_step(Tensor<double>({4, 4, 3}), Tensor<double>({4, 5, 2}), p), ShapeError);
}

TEST(StmmStep, MissingCacheIsUsageError) {
  Rng rng(27);
  const auto p = small_params(rng, 1, 1);
  EXPECT_THROW(stmm_step_backward(StepCache<double>{}, p, Tensor<double>({2, 2, 1})), UsageError);
  const auto gru = convgru_step_cached(Tensor<double>({2, 2, 1}), Tensor<double>({2, 2, 1}), p);
  EXPECT_THROW(stmm_step_backward(gru, p, Tensor<double>({2, 2, 1})), UsageError);
}

// Loss = sum M_t^2, checked against every input and kernel.
void check_step_gradients(CellKind cell, BnScope scope, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t df = 3, dm = 2;
  const auto p = small_params(rng, df, dm);
  const auto f = random_tensor<double>({5, 5, df}, rng);
  const auto m = random_tensor<double>({5, 5, dm}, rng, cell == CellKind::stmm ? 0.0 : -1.0, 1.0);

  const auto cache = cell_step_cached(cell, f, m, p, scope);
  const auto grads = cell_step_backward(cache, p, scale(cache.memory, 2.0));

  auto loss = [&](const Tensor<double>& ff, const Tensor<double>& mm, const StmmParams<double>& pp) {
    return sum_of_squares(cell_step_cached(cell, ff, mm, pp, scope).memory);
  };
  auto kinks = [&](const Tensor<double>& ff, const Tensor<double>& mm, const StmmParams<double>& pp) {
    std::vector<double> k;
    append_step_kinks(cell_step_cached(cell, ff, mm, pp, scope), k);
    return k;
  };
  const double eps = 1e-3;
  const double tol = 1e-5;

  const auto nf = finite_diff<double>([&](const Tensor<double>& t) { return loss(t, m, p); }, f, eps,
                                      [&](const Tensor<double>& t) { return kinks(t, m, p); }, FdScheme::richardson);
  EXPECT_LT(max_relative_error(grads.grad_f, nf.grad, nf.accepted), tol) << "grad F";
  EXPECT_GT(nf.accepted_count(), 0u);

  // Memory perturbations may cross zero for the STMM; the cell itself does not require M >= 0.
  const auto nm = finite_diff<double>([&](const Tensor<double>& t) { return loss(f, t, p); }, m, eps,
                                      [&](const Tensor<double>& t) { return kinks(f, t, p); }, FdScheme::richardson);
  EXPECT_LT(max_relative_error(grads.grad_m_prev, nm.grad, nm.accepted), tol) << "grad M_prev";

  StmmParams<double> pp = p;
  pp.for_each([&](const char* name, ConvParams<double>& k) {
    const Tensor<double> orig = k.kernel;
    const auto nk = finite_diff<double>(
        [&](const Tensor<double>& t) { k.kernel = t; const double v = loss(f, m, pp); k.kernel = orig; return v; },
        orig, eps,
        [&](const Tensor<double>& t) { k.kernel = t; auto v = kinks(f, m, pp); k.kernel = orig; return v; },
        FdScheme::richardson);
    const ConvParams<double>* analytic = nullptr;
    grads.grad_params.for_each([&](const char* n2, const ConvParams<double>& g) {
      if (std::string_view(n2) == name) analytic = &g;
    });
    EXPECT_LT(max_relative_error(analytic->kernel, nk.grad, nk.accepted), tol) << "kernel " << name;
  });
}

TEST(StmmStepBackward, MatchesFiniteDifferencesPooled) {
  for (std::uint64_t s = 0; s < 6; ++s) check_step_gradients(CellKind::stmm, BnScope::pooled, 100 + s);
}

TEST(StmmStepBackward, MatchesFiniteDifferencesPerChannel) {
  for (std::uint64_t s = 0; s < 3; ++s) check_step_gradients(CellKind::stmm, BnScope::per_channel, 200 + s);
}

TEST(ConvGruStep, MatchesFiniteDifferences) {
  for (std::uint64_t s = 0; s < 4; ++s) check_step_gradients(CellKind::convgru, BnScope::pooled, 300 + s);
}

TEST(ConvGruStep, ZeroParamsHalveMemory) {
  const auto p = StmmParams<double>::zeros(3, 3, 2, 2);
  Rng rng(31);
  const auto m = random_tensor<double>({3, 4, 2}, rng);
  const auto c = convgru_step_cached(random_tensor<double>({3, 4, 2}, rng), m, p);
  for (double v : c.z.values()) EXPECT_EQ(v, 0.5);
  for (double v : c.r.values()) EXPECT_EQ(v, 0.5);
  for (double v : c.cand.values()) EXPECT_EQ(v, 0.0);
  EXPECT_LT(max_abs_diff(c.memory, scale(m, 0.5)), 1e-15);
}

TEST(ConvGruStep, ZeroMemoryZeroCandidate) {
  Rng rng(32);
  auto p = small_params(rng, 2, 2);
  p.w = ConvParams<double>::zeros(3, 3, 2, 2);
  const auto out = convgru_step(random_tensor<double>({3, 3, 2}, rng), Tensor<double>({3, 3, 2}), p);
  for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(ConvGruStep, OutputBounded) {
  Rng rng(33);
  for (int trial = 0; trial < 100; ++trial) {
    const auto p = small_params(rng, 2, 2, 3.0);
    const auto out = convgru_step(random_tensor<double>({4, 4, 2}, rng, -3, 3),
                                  random_tensor<double>({4, 4, 2}, rng), p);
    for (double v : out.values()) {
      ASSERT_GE(v, -1.0);
      ASSERT_LE(v, 1.0);
    }
  }
}

TEST(TransferWeights, CandidateEqualsStaticFeaturesExactly) {
  Rng rng(41);
  const ConvParams<float> stat(random_tensor<float>({3, 3, 4, 6}, rng));
  const auto p = transfer_weights(stat, 6, 7);
  EXPECT_EQ(p.w, stat);
  EXPECT_EQ(p.wz, stat);
  EXPECT_EQ(p.wr, stat);
  const auto f = random_tensor<float>({6, 7, 4}, rng);
  const auto c = stmm_step_cached(f, Tensor<float>({6, 7, 6}), p);
  const auto expected = relu(conv2d(f, stat));
  for (std::size_t i = 0; i < expected.size(); ++i) ASSERT_EQ(c.cand[i], expected[i]);
}

TEST(TransferWeights, DeterministicAndSmall) {
  Rng rng(42);
  const ConvParams<double> stat(random_tensor<double>({3, 3, 2, 4}, rng));
  const auto a = transfer_weights(stat, 4, 99);
  const auto b = transfer_weights(stat, 4, 99);
  const auto c = transfer_weights(stat, 4, 100);
  EXPECT_EQ(a, b);
  EXPECT_NE(a.u, c.u);
  const double rms_w = std::sqrt(sum_of_squares(stat.kernel) / static_cast<double>(stat.kernel.size()));
  const double bound = 0.1 * std::sqrt(3.0) * rms_w;
  for (const auto* k : {&a.uz, &a.ur, &a.u}) {
    for (double v : k->kernel.values()) EXPECT_LE(std::abs(v), bound);
  }
}

TEST(TransferWeights, MemoryWidthMismatchIsConfigError) {
  const auto stat = ConvParams<double>::zeros(3, 3, 2, 4);
  EXPECT_THROW(transfer_weights(stat, 8, 1), ConfigError);
}

}  // namespace
}  // namespace stmn
