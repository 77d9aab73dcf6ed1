#include <gtest/gtest.h>

#include <cmath>

#include "mfbsde/backward.hpp"
#include "mfbsde/stats.hpp"
#include "test_util.hpp"

using namespace mfbsde;
using mfbsde::testing::catalog;
using mfbsde::testing::decoupled_model;

namespace {

PathEnsemble driving(const TimeGrid& g, int dim, int reps, const StreamKey& root) {
  PathEnsemble p(g, dim, reps, true);
  p.key_root = root;
  for (int r = 0; r < reps; ++r) p.set_increments(r, brownian_increments(p.key_of(r), g, dim));
  return p;
}

struct Coupled {
  LawFlow law;
  SdeNResult sde;
  PathEnsemble xl;
  BsdeSolution lim;
};

Coupled coupled(const ModelSpec& m, int n, const TimeGrid& g, int reps, const RegressionOptions& ro, std::uint64_t seed,
                int cloud = 1024) {
  Coupled c;
  StreamKey root(seed);
  StreamKey ek = derive_key(root, Role::environment, n);
  c.law = m.closed_form ? LawFlow::closed_form(m, g, cloud, ek) : solve_limit_forward(m, g, cloud, ek);
  PicardOptions p;
  p.cloud_size = cloud;
  c.sde = solve_sde_n(m, n, g, c.law, p, derive_key(root, Role::replication, n), ek, reps);
  c.xl = limit_paths(m, c.law, c.sde.paths);
  c.lim = solve_mfbsde(m, c.law, c.xl, ro);
  return c;
}

}  // namespace

TEST(Backward, ConstantTerminalNoDriver) {
  auto m = catalog("constant", {{"phi0", 1.0}, {"f0", 0.0}, {"s", 1.0}});
  TimeGrid g(1.0, 16);
  LawFlow law = LawFlow::closed_form(*m, g, 128, StreamKey(1));
  BsdeSolution s = solve_mfbsde(*m, law, limit_paths(*m, law, driving(g, 1, 200, StreamKey(2))), RegressionOptions{});
  for (double y : s.y) EXPECT_NEAR(y, 1.0, 1e-12);
  for (double z : s.z) EXPECT_NEAR(z, 0.0, 1e-12);
}

TEST(Backward, ConstantDriverIntegrates) {
  const double c = 0.7;
  auto m = catalog("constant", {{"phi0", 0.0}, {"f0", c}, {"s", 1.0}});
  TimeGrid g(1.0, 16);
  LawFlow law = LawFlow::closed_form(*m, g, 128, StreamKey(1));
  BsdeSolution s = solve_mfbsde(*m, law, limit_paths(*m, law, driving(g, 1, 200, StreamKey(3))), RegressionOptions{});
  for (int r = 0; r < 200; ++r)
    for (int i = 0; i <= 16; ++i) EXPECT_NEAR(s.y_at(r, i), c * (1.0 - g.t(i)), 1e-12);
}

TEST(Backward, LinearMeanFieldBsdeMatchesClosedForm) {
  auto m = catalog("mf_bsde_linear", {{"beta", 1.0}, {"s", 1.0}});
  TimeGrid g(1.0, 64);
  LawFlow law = LawFlow::closed_form(*m, g, 4096, StreamKey(4));
  PathEnsemble xl = limit_paths(*m, law, driving(g, 1, 4096, StreamKey(5)));
  BsdeSolution s = solve_mfbsde(*m, law, xl, RegressionOptions{});
  EXPECT_NEAR(s.y_at(0, 0), 5.43656365691809, 0.02 * 5.43656365691809);
  double ss = 0.0;
  for (double z : s.z) ss += (z - 1.0) * (z - 1.0);
  EXPECT_LE(std::sqrt(ss / s.z.size()), 0.05);
  // Terminal node is the exact terminal functional x + E[X_T].
  double mean_t = law.mean(64)[0];
  for (int r = 0; r < 4096; r += 97) EXPECT_NEAR(s.y_at(r, 64), xl.value(r, 64, 0) + mean_t, 1e-12);
}

TEST(Backward, MartingaleWithoutDriver) {
  auto m = catalog("mf_bsde_linear", {{"beta", 1.0}, {"s", 0.5}});
  TimeGrid g(1.0, 32);
  LawFlow law = LawFlow::closed_form(*m, g, 1024, StreamKey(6));
  BsdeSolution s = solve_mfbsde(*m, law, limit_paths(*m, law, driving(g, 1, 2000, StreamKey(7))), RegressionOptions{});
  std::vector<double> y0(2000);
  for (int r = 0; r < 2000; ++r) y0[r] = s.y_at(r, 32);
  Summary terminal = summarize(y0);
  for (int i = 0; i < 32; i += 4) {
    std::vector<double> yi(2000);
    for (int r = 0; r < 2000; ++r) yi[r] = s.y_at(r, i);
    EXPECT_NEAR(summarize(yi).mean, terminal.mean, 3 * terminal.se);
  }
}

TEST(Backward, BsdeNWithConstantDataIsConstant) {
  auto m = catalog("constant", {{"phi0", 1.0}, {"s", 1.0}});
  TimeGrid g(1.0, 8);
  RegressionOptions ro;
  ro.inner_paths = 16;
  Coupled c = coupled(*m, 4, g, 40, ro, 8, 64);
  BsdeSolution yn = solve_bsde_n(*m, 4, c.sde, LimitInputs{&c.law, &c.xl, &c.lim}, ro, StreamKey(9));
  for (double y : yn.y) EXPECT_NEAR(y, 1.0, 1e-12);
  for (double z : yn.z) EXPECT_NEAR(z, 0.0, 1e-12);
}

TEST(Backward, DecoupledBsdeNEqualsLimitBitExactly) {
  auto m = decoupled_model();
  TimeGrid g(1.0, 16);
  RegressionOptions ro;
  ro.inner_paths = 32;
  Coupled c = coupled(*m, 8, g, 300, ro, 10, 64);
  BsdeSolution yn = solve_bsde_n(*m, 8, c.sde, LimitInputs{&c.law, &c.xl, &c.lim}, ro, StreamKey(11));
  ASSERT_EQ(yn.y.size(), c.lim.y.size());
  EXPECT_EQ(yn.y, c.lim.y);
  EXPECT_EQ(yn.z, c.lim.z);
}

TEST(Backward, YErrorRatioAcrossN) {
  auto m = catalog("mf_bsde_linear", {{"beta", 1.0}, {"s", 0.5}});
  TimeGrid g(1.0, 32);
  RegressionOptions ro;
  ro.inner_paths = 32;
  auto err = [&](int n) {
    Coupled c = coupled(*m, n, g, 2000, ro, 12, 4096);
    BsdeSolution yn = solve_bsde_n(*m, n, c.sde, LimitInputs{&c.law, &c.xl, &c.lim}, ro, StreamKey(13 + n));
    double acc = 0.0;
    for (int r = 0; r < 2000; ++r) {
      double worst = 0.0;
      for (int i = 0; i <= 32; ++i) worst = std::max(worst, std::pow(yn.y_at(r, i) - c.lim.y_at(r, i), 2));
      acc += worst;
    }
    return acc / 2000;
  };
  double ratio = err(64) / err(16);
  EXPECT_GE(ratio, 0.125);
  EXPECT_LE(ratio, 0.5);
}

TEST(Backward, LinearLimitBsdeZeroForcing) {
  TimeGrid g(1.0, 8);
  const int P = 64;
  LinearBsdeProblem p;
  p.grid = g;
  p.paths = P;
  p.dim = 1;
  p.feature_count = 1;
  auto u = standard_normals(StreamKey(14), static_cast<std::size_t>(9) * P);
  p.features = u;
  p.dw = std::vector<double>(u.begin(), u.begin() + 8 * P);
  p.terminal.assign(P, 0.0);
  p.alpha.assign(8 * P, 0.0);
  p.beta.assign(8 * P, -0.3);
  p.gamma.assign(8 * P, 0.1);
  LinearBsdeResult r = solve_linear_limit_bsde(p, 2);
  for (double y : r.y) EXPECT_EQ(y, 0.0);
  for (double z : r.z) EXPECT_EQ(z, 0.0);
}

TEST(Backward, ComparisonExamples) {
  TimeGrid g(1.0, 16);
  auto m = catalog("constant", {{"s", 1.0}}, {0.0});
  LawFlow law = LawFlow::closed_form(*m, g, 64, StreamKey(15));
  PathEnsemble x = limit_paths(*m, law, driving(g, 1, 1000, StreamKey(16)));
  RegressionOptions ro;
  PlainBsdeData base{[](CSpan x) { return std::tanh(x[0]); },
                     [](double, CSpan x, double y, CSpan z) { return 0.2 * x[0] - 0.3 * y + 0.1 * z[0]; }};
  ComparisonResult same = check_comparison(x, base, base, ro);
  EXPECT_TRUE(same.pass);
  EXPECT_NEAR(same.margin, 0.0, 1e-12);

  PlainBsdeData shifted{[](CSpan x) { return std::tanh(x[0]) + 1.0; },
                        [](double, CSpan x, double, CSpan z) { return 0.2 * x[0] + 0.1 * z[0]; }};
  PlainBsdeData unshifted{[](CSpan x) { return std::tanh(x[0]); },
                          [](double, CSpan x, double, CSpan z) { return 0.2 * x[0] + 0.1 * z[0]; }};
  ComparisonResult plus_one = check_comparison(x, shifted, unshifted, ro);
  EXPECT_TRUE(plus_one.pass);
  for (int r = 0; r < 1000; r += 50)
    for (int i = 0; i <= 16; ++i)
      EXPECT_NEAR(plus_one.first.y_at(r, i) - plus_one.second.y_at(r, i), 1.0, plus_one.tolerance);

  PlainBsdeData more_driver{unshifted.terminal,
                            [](double, CSpan x, double, CSpan z) { return 0.2 * x[0] + 0.1 * z[0] + 0.5; }};
  ComparisonResult half = check_comparison(x, more_driver, unshifted, ro);
  EXPECT_TRUE(half.pass);
  EXPECT_NEAR(half.first.y_at(0, 0) - half.second.y_at(0, 0), 0.5, half.tolerance);

  EXPECT_THROW(check_comparison(x, unshifted, shifted, ro), std::invalid_argument);
}

TEST(Backward, HolderSlopeOfBrownianY) {
  auto m = catalog("mf_bsde_linear", {{"beta", 1.0}, {"s", 0.5}});
  TimeGrid g(1.0, 64);
  LawFlow law = LawFlow::closed_form(*m, g, 1024, StreamKey(17));
  BsdeSolution s = solve_mfbsde(*m, law, limit_paths(*m, law, driving(g, 1, 2000, StreamKey(18))), RegressionOptions{});
  HolderFit h = holder_exponent(s);
  EXPECT_GE(h.slope, 0.9);
  EXPECT_LE(h.slope, 1.1);
}

TEST(Backward, ZBoundFlagsWithoutClamping) {
  auto m = catalog("mf_bsde_linear", {{"beta", 1.0}, {"s", 1.0}});
  TimeGrid g(1.0, 16);
  LawFlow law = LawFlow::closed_form(*m, g, 256, StreamKey(19));
  PathEnsemble x = limit_paths(*m, law, driving(g, 1, 500, StreamKey(20)));
  RegressionOptions loose, tight;
  tight.z_bound = 0.5;
  BsdeSolution a = solve_mfbsde(*m, law, x, loose), b = solve_mfbsde(*m, law, x, tight);
  EXPECT_FALSE(a.z_bound_exceeded);
  EXPECT_TRUE(b.z_bound_exceeded);
  EXPECT_EQ(a.z, b.z);
  EXPECT_GT(b.max_abs_z, 0.5);
}

TEST(Backward, TooFewPathsRejected) {
  auto m = catalog("mf_bsde_linear", {});
  TimeGrid g(1.0, 4);
  LawFlow law = LawFlow::closed_form(*m, g, 64, StreamKey(21));
  EXPECT_THROW(solve_mfbsde(*m, law, limit_paths(*m, law, driving(g, 1, 10, StreamKey(22))), RegressionOptions{}),
               std::invalid_argument);
}
