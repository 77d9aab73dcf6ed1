#include <gtest/gtest.h>

#include <cmath>

#include "mfbsde/noise.hpp"
#include "mfbsde/regression.hpp"
#include "mfbsde/stats.hpp"

using namespace mfbsde;

TEST(Stats, Summary) {
  std::vector<double> v{1, 2, 3, 4};
  Summary s = summarize(v);
  EXPECT_DOUBLE_EQ(s.mean, 2.5);
  EXPECT_DOUBLE_EQ(s.variance, 5.0 / 3.0);
  EXPECT_DOUBLE_EQ(s.se, std::sqrt(5.0 / 3.0 / 4.0));
}

TEST(Stats, KolmogorovTail) {
  EXPECT_NEAR(kolmogorov_tail(1.0), 0.26999967167735456, 1e-10);
  EXPECT_NEAR(kolmogorov_tail(0.5), 0.9639452436648751, 1e-10);
}

TEST(Stats, KsSameAndShifted) {
  auto a = standard_normals(StreamKey(1), 2000), b = standard_normals(StreamKey(2), 2000);
  KsResult same = ks_two_sample(a, a);
  EXPECT_EQ(same.statistic, 0.0);
  EXPECT_EQ(same.p_value, 1.0);
  EXPECT_GT(ks_two_sample(a, b).p_value, 0.001);
  for (double& x : b) x += 0.5;
  EXPECT_LT(ks_two_sample(a, b).p_value, 1e-10);
}

TEST(Stats, SlopeSelfTest) {
  std::vector<double> n{8, 16, 32, 64, 128, 256}, e, se;
  auto noise = standard_normals(StreamKey(99), n.size());
  for (std::size_t i = 0; i < n.size(); ++i) {
    e.push_back(3.0 / n[i] * (1.0 + 0.05 * noise[i]));
    se.push_back(0.05 * 3.0 / n[i]);
  }
  SlopeFit f = fit_log_slope(n, e, se);
  EXPECT_FALSE(f.degraded);
  EXPECT_GE(f.slope, -1.1);
  EXPECT_LE(f.slope, -0.9);
  EXPECT_LE(f.ci_low, f.slope);
  EXPECT_GE(f.ci_high, f.slope);
  EXPECT_EQ(f.points, 6u);
}

TEST(Stats, SlopeDegradedWithFewPoints) {
  std::vector<double> n{8, 16, 32}, e{0.1, 0.0, 0.02}, se{0.01, 0.01, 0.01};
  EXPECT_TRUE(fit_log_slope(n, e, se).degraded);
}

TEST(Stats, VarianceErrorMatchesGaussianFormula) {
  auto v = standard_normals(StreamKey(3), 100000);
  VarianceEstimate e = variance_with_error(v);
  EXPECT_NEAR(e.value, 1.0, 0.02);
  EXPECT_NEAR(e.se, std::sqrt(2.0 / 100000), 0.0005);
}

TEST(Regression, BasisSize) {
  EXPECT_EQ(basis_size(1, 2), 3u);
  EXPECT_EQ(basis_size(2, 2), 6u);
  EXPECT_EQ(monomial_exponents(2, 1).size(), 3u);
}

TEST(Regression, RecoversQuadratic) {
  const int n = 200;
  auto u = standard_normals(StreamKey(4), 2 * n);
  Eigen::MatrixXd x(n, 2), y(n, 1);
  for (int i = 0; i < n; ++i) {
    x(i, 0) = u[2 * i];
    x(i, 1) = u[2 * i + 1];
    y(i, 0) = 1.0 + 2.0 * x(i, 0) - x(i, 1) + 0.5 * x(i, 0) * x(i, 1) + 0.25 * x(i, 1) * x(i, 1);
  }
  RegressionFit f = fit_regression(x, y, 2);
  EXPECT_EQ(f.degree, 2);
  EXPECT_LE(f.residual_rms, 1e-10);
  std::vector<double> p{0.3, -1.2};
  EXPECT_NEAR(f.evaluate(p), 1.0 + 0.6 + 1.2 - 0.18 + 0.36, 1e-10);
}

TEST(Regression, ConstantFeatureFallsBackToMean) {
  Eigen::MatrixXd x = Eigen::MatrixXd::Constant(50, 1, 2.0), y(50, 1);
  for (int i = 0; i < 50; ++i) y(i, 0) = i;
  RegressionFit f = fit_regression(x, y, 2);
  EXPECT_TRUE(f.features.empty());
  std::vector<double> p{2.0};
  EXPECT_NEAR(f.evaluate(p), 24.5, 1e-12);
}
