#include <gtest/gtest.h>

#include <cmath>

#include "mfbsde/forward.hpp"
#include "mfbsde/parallel.hpp"
#include "mfbsde/stats.hpp"
#include "test_util.hpp"

using namespace mfbsde;
using mfbsde::testing::catalog;
using mfbsde::testing::decoupled_model;

namespace {

constexpr double kEulerMean = 2.697344952565099;  // (1 + 1/64)^64

PicardOptions picard(int cloud) {
  PicardOptions p;
  p.cloud_size = cloud;
  return p;
}

std::vector<double> plain_euler(const ModelSpec& m, const TimeGrid& g, std::span<const double> dw) {
  std::vector<double> x(g.nodes());
  x[0] = m.x0[0];
  double b, s;
  for (int i = 0; i < g.steps; ++i) {
    m.drift(CSpan(&x[i], 1), CSpan(&x[i], 1), MSpan(&b, 1));
    m.diffusion(CSpan(&x[i], 1), CSpan(&x[i], 1), MSpan(&s, 1));
    x[i + 1] = x[i] + b * g.h() + s * dw[i];
  }
  return x;
}

}  // namespace

TEST(Forward, CloudOfBrownianMotionHasUnitVariance) {
  auto m = catalog("constant", {{"b0", 0.0}, {"s", 1.0}}, {0.0});
  const int M = 4096;
  PathEnsemble cloud = solve_classical_system(*m, M, TimeGrid(1.0, 16), StreamKey(1));
  double v = cloud.sample_variance(16)[0];
  EXPECT_NEAR(v, 1.0, 3 * std::sqrt(2.0 / M));
  for (int r = 0; r < M; ++r) EXPECT_EQ(cloud.value(r, 0, 0), 0.0);
}

TEST(Forward, OuCloudMeanMatchesClosedForm) {
  auto m = catalog("ou_mean_field", {{"beta", 1.0}, {"s", 1.0}});
  m = mfbsde::testing::scaled_drift(*m, 1.0);  // no closed form: forces the particle cloud
  const int M = 2048;
  TimeGrid g(1.0, 64);
  LawFlow law = solve_limit_forward(*m, g, M, StreamKey(2));
  EXPECT_EQ(law.kind(), LawFlow::Kind::cloud);
  // The cloud mean obeys the discretized mean recursion driven by the averaged noise.
  double var_mean = 0.0;
  for (int i = 0; i < 64; ++i) var_mean += g.h() * std::pow(1.0 + g.h(), 2 * (63 - i));
  EXPECT_NEAR(law.mean(64)[0], kEulerMean, 4 * std::sqrt(var_mean / M));
  EXPECT_NEAR(law.variance(64)[0], 1.0, 0.1);
}

TEST(Forward, TwoParticleConstantModelIsExact) {
  auto m = catalog("constant", {{"b0", 0.3}, {"s", 1.0}}, {0.5});
  TimeGrid g(1.0, 8);
  StreamKey key(3);
  PathEnsemble p = solve_classical_system(*m, 2, g, key);
  for (int i = 0; i < 2; ++i) {
    auto dw = brownian_increments(derive_key(key, Role::particle, i), g, 1);
    auto x = plain_euler(*m, g, dw);
    for (int n = 0; n <= 8; ++n) EXPECT_EQ(p.value(i, n, 0), x[n]);
  }
}

TEST(Forward, DecoupledCollapseIsBitExact) {
  auto m = decoupled_model();
  TimeGrid g(1.0, 32);
  LawFlow init = solve_limit_forward(*m, g, 64, StreamKey(4));
  StreamKey root(5);
  StreamKey wk = derive_key(root, Role::replication, 0), ek = derive_key(root, Role::environment, 0);
  SdeNResult a = solve_sde_n(*m, 4, g, init, picard(64), wk, ek, 20);
  SdeNResult b = solve_sde_n(*m, 128, g, init, picard(64), wk, ek, 20);
  PathEnsemble lp = limit_paths(*m, init, a.paths);
  for (int r = 0; r < 20; ++r) {
    auto x = plain_euler(*m, g, a.paths.increments_of(r));
    for (int n = 0; n <= 32; ++n) {
      EXPECT_EQ(a.paths.value(r, n, 0), x[n]);
      EXPECT_EQ(b.paths.value(r, n, 0), x[n]);
      EXPECT_EQ(lp.value(r, n, 0), x[n]);
    }
  }
  PathEnsemble cls = solve_classical_system(*m, 10, g, StreamKey(6));
  for (int i = 0; i < 10; ++i) {
    auto x = plain_euler(*m, g, brownian_increments(derive_key(StreamKey(6), Role::particle, i), g, 1));
    for (int n = 0; n <= 32; ++n) EXPECT_EQ(cls.value(i, n, 0), x[n]);
  }
}

TEST(Forward, SingleParticleConstantModel) {
  auto m = catalog("constant", {{"b0", -0.4}, {"s", 0.7}}, {1.0});
  TimeGrid g(1.0, 16);
  LawFlow init = LawFlow::closed_form(*m, g, 64, StreamKey(7));
  StreamKey root(8);
  SdeNResult r = solve_sde_n(*m, 1, g, init, picard(64), derive_key(root, Role::replication, 0),
                             derive_key(root, Role::environment, 0), 5);
  for (int rep = 0; rep < 5; ++rep) {
    auto dw = r.paths.increments_of(rep);
    double w = 0.0;
    for (int n = 1; n <= 16; ++n) {
      w += dw[n - 1];
      EXPECT_NEAR(r.paths.value(rep, n, 0), 1.0 - 0.4 * g.t(n) + 0.7 * w, 1e-13);
    }
  }
}

TEST(Forward, SdeNMeanNearClosedForm) {
  auto m = catalog("ou_mean_field", {{"beta", 1.0}, {"s", 0.5}});
  TimeGrid g(1.0, 64);
  StreamKey root(9);
  StreamKey ek = derive_key(root, Role::environment, 0);
  LawFlow init = LawFlow::closed_form(*m, g, 4096, ek);
  SdeNResult r = solve_sde_n(*m, 32, g, init, picard(4096), derive_key(root, Role::replication, 0), ek, 2000);
  std::vector<double> x1(2000);
  for (int i = 0; i < 2000; ++i) x1[i] = r.paths.value(i, 64, 0);
  Summary s = summarize(x1);
  EXPECT_NEAR(s.mean, kEulerMean, 4 * s.se);
  EXPECT_TRUE(r.converged);
  EXPECT_GE(r.iterations, 1);
}

TEST(Forward, ClassicalSystemMean) {
  auto m = catalog("ou_mean_field", {{"beta", 1.0}, {"s", 0.5}});
  TimeGrid g(1.0, 64);
  PathEnsemble p = solve_classical_system(*m, 512, g, StreamKey(10));
  double var_mean = 0.0;
  for (int i = 0; i < 64; ++i) var_mean += 0.25 * g.h() * std::pow(1.0 + g.h(), 2 * (63 - i));
  EXPECT_NEAR(p.sample_mean(64)[0], kEulerMean, 4 * std::sqrt(var_mean / 512.0));
  EXPECT_NEAR(p.sample_variance(64)[0], 0.25, 0.05);
}

TEST(Forward, ErrorVanishesWhenDecoupled) {
  auto m = catalog("constant", {{"b0", 0.2}, {"s", 1.0}});
  StreamKey root(11);
  ErrorEstimate e = forward_error(*m, 16, TimeGrid(1.0, 16), 50, derive_key(root, Role::replication, 0),
                                  derive_key(root, Role::environment, 0), picard(64));
  EXPECT_EQ(e.mean, 0.0);
}

TEST(Forward, ErrorRatioAcrossN) {
  auto m = catalog("ou_mean_field", {{"beta", 1.0}, {"s", 0.5}});
  TimeGrid g(1.0, 64);
  StreamKey root(12);
  auto err = [&](int n) {
    return forward_error(*m, n, g, 2000, derive_key(root, Role::replication, n), derive_key(root, Role::environment, n),
                         picard(4096))
        .mean;
  };
  double e1 = err(1), e4 = err(4), e16 = err(16), e64 = err(64);
  EXPECT_TRUE(std::isfinite(e1));
  EXPECT_LT(e4, e1);
  double ratio = e64 / e16;
  EXPECT_GE(ratio, 0.125);
  EXPECT_LE(ratio, 0.5);
}

TEST(Forward, KeysAreDisjointAndCoupled) {
  auto m = catalog("ou_mean_field", {{"beta", 1.0}, {"s", 0.5}});
  TimeGrid g(1.0, 8);
  StreamKey root(13);
  StreamKey wk = derive_key(root, Role::replication, 0), ek = derive_key(root, Role::environment, 0);
  EXPECT_THROW(solve_sde_n(*m, 4, g, LawFlow::closed_form(*m, g, 64, ek), picard(64), root, ek, 4),
               std::invalid_argument);
  SdeNResult r = solve_sde_n(*m, 4, g, LawFlow::closed_form(*m, g, 64, ek), picard(64), wk, ek, 4);
  for (int i = 0; i < 4; ++i) {
    EXPECT_TRUE(keys_disjoint(r.environments[i].key, r.paths.key_of(i)));
    EXPECT_EQ(r.paths.increments_of(i), brownian_increments(r.paths.key_of(i), g, 1));
    EXPECT_EQ(r.environments[i].indices.size(), 4u);
  }
}

TEST(Forward, ThreadCountDoesNotChangeResults) {
  auto m = catalog("tanh_bounded", {{"a", 1.0}, {"s", 0.5}});
  TimeGrid g(1.0, 16);
  auto run = [&](int threads) {
    set_default_threads(threads);
    StreamKey root(14);
    StreamKey ek = derive_key(root, Role::environment, 0);
    LawFlow init = solve_limit_forward(*m, g, 128, derive_key(root, Role::law, 0));
    SdeNResult r = solve_sde_n(*m, 8, g, init, picard(256), derive_key(root, Role::replication, 0), ek, 50);
    std::vector<double> out;
    for (int i = 0; i < 50; ++i) {
      auto p = r.paths.path_of(i);
      out.insert(out.end(), p.begin(), p.end());
    }
    return out;
  };
  auto a = run(1), b = run(3);
  set_default_threads(0);
  EXPECT_EQ(a, b);
}

TEST(Forward, DivergenceAborts) {
  auto m = catalog("ou_mean_field", {{"beta", 1.0}, {"s", 0.5}});
  m = mfbsde::testing::scaled_drift(*m, 1e7);
  EXPECT_THROW(solve_classical_system(*m, 8, TimeGrid(1.0, 16), StreamKey(15)), DivergenceError);
}
