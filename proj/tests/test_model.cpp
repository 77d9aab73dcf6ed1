#include <gtest/gtest.h>

#include <cmath>

#include "mfbsde/model.hpp"
#include "test_util.hpp"

using namespace mfbsde;
using mfbsde::testing::catalog;

TEST(Model, OuClosedFormMean) {
  auto m = catalog("ou_mean_field", {{"beta", 1.0}, {"s", 1.0}});
  ASSERT_TRUE(m->closed_form);
  EXPECT_NEAR(m->closed_form->mean(1.0)[0], 2.718281828459045, 1e-12);
}

TEST(Model, LinearBsdeClosedForm) {
  auto m = catalog("mf_bsde_linear", {{"beta", 1.0}, {"s", 1.0}});
  ASSERT_TRUE(m->closed_form && m->closed_form->y0);
  EXPECT_NEAR(*m->closed_form->y0, 5.43656365691809, 1e-12);
  TimeGrid g(1.0, 8);
  std::vector<double> dw = brownian_increments(StreamKey(4), g, 1), y(9), z(8);
  m->closed_form->grid_bsde(g, dw, y, z);
  for (double v : z) EXPECT_NEAR(v, 1.0, 1e-14);
}

TEST(Model, ConstantModelIsBrownianMotion) {
  auto m = catalog("constant", {{"b0", 0.0}, {"s", 1.0}}, {0.0});
  ASSERT_TRUE(m->closed_form);
  TimeGrid g(1.0, 16);
  auto dw = brownian_increments(StreamKey(8), g, 1);
  std::vector<double> path(17);
  m->closed_form->path(g, dw, path);
  double w = 0.0;
  for (int i = 0; i < 16; ++i) {
    w += dw[i];
    EXPECT_NEAR(path[i + 1], w, 1e-14);
  }
  EXPECT_FALSE(m->partner.any());
}

TEST(Model, GradientsPassOnCatalog) {
  for (const auto& name : catalog_names()) {
    for (Vec x0 : {Vec{1.0}, Vec{0.5, -0.3}}) {
      auto m = catalog(name, {}, x0);
      GradientReport rep = check_gradients(*m, random_probes(*m, StreamKey(21), 100));
      EXPECT_TRUE(rep.pass) << name << " worst " << rep.worst;
      EXPECT_LE(rep.worst, kGradientTolerance) << name;
    }
  }
}

TEST(Model, ExactGradientsAreExact) {
  auto c = catalog("constant", {{"b0", 0.3}, {"s", 1.2}});
  GradientReport rc = check_gradients(*c, random_probes(*c, StreamKey(1), 20));
  EXPECT_EQ(rc.worst, 0.0);
  auto ou = catalog("ou_mean_field", {{"beta", 1.5}, {"s", 1.0}});
  GradientReport ro = check_gradients(*ou, random_probes(*ou, StreamKey(2), 20));
  ASSERT_TRUE(ro.max_error.count("drift_dxp"));
  EXPECT_LE(ro.max_error.at("drift_dxp"), 1e-9);
}

TEST(Model, TanhDriftPartnerGradient) {
  auto m = catalog("tanh_bounded", {{"a", 1.0}, {"s", 1.0}});
  Vec x{0.1}, xp{0.3}, g(1), b1(1), b2(1);
  m->drift_dxp(x, xp, g);
  EXPECT_NEAR(g[0], 0.915136961826629, 1e-12);
  double e = 1e-5;
  m->drift(x, Vec{0.3 + e}, b1);
  m->drift(x, Vec{0.3 - e}, b2);
  EXPECT_NEAR((b1[0] - b2[0]) / (2 * e), g[0], 1e-6);
}

TEST(Model, MeanFieldAverages) {
  auto c = catalog("constant", {{"s", 1.0}});
  Vec sig = evaluate_mean_field(*c, Coefficient::diffusion, Vec{0.7}, {{1.0}, {-4.0}});
  EXPECT_EQ(sig[0], 1.0);
  auto ou = catalog("ou_mean_field", {{"beta", 1.0}});
  EXPECT_EQ(evaluate_mean_field(*ou, Coefficient::drift, Vec{9.0}, {{0.0}, {2.0}, {4.0}})[0], 2.0);
  auto lin = catalog("mf_bsde_linear", {});
  EXPECT_EQ(evaluate_mean_field(*lin, Coefficient::terminal, Vec{1.0}, {{1.0}, {3.0}})[0], 3.0);
  EXPECT_THROW(evaluate_mean_field(*lin, Coefficient::terminal, Vec{1.0}, {}), std::invalid_argument);
}

TEST(Model, RejectsBadInput) {
  EXPECT_THROW(catalog("nope", {}), std::invalid_argument);
  EXPECT_THROW(catalog("ou_mean_field", {{"beta", NAN}}), std::invalid_argument);
  EXPECT_THROW(catalog("ou_mean_field", {{"gamma", 1.0}}), std::invalid_argument);
  EXPECT_THROW(catalog("ou_mean_field", {}, {INFINITY}), std::invalid_argument);
}

// The closed-form continuous path satisfies the Euler recursion with an O(h) residual.
TEST(Model, ClosedFormResidualShrinksWithStep) {
  auto m = catalog("ou_mean_field", {{"beta", 1.0}, {"s", 0.5}});
  auto residual = [&](int steps) {
    TimeGrid g(1.0, steps);
    auto dw = brownian_increments(StreamKey(13), g, 1);
    std::vector<double> path(steps + 1);
    m->closed_form->path(g, dw, path);
    double worst = 0.0;
    for (int i = 0; i < steps; ++i) {
      double mean = m->closed_form->mean(g.t(i))[0];
      double euler = path[i] + mean * g.h() + 0.5 * dw[i];
      worst = std::max(worst, std::fabs(path[i + 1] - euler));
    }
    return worst;
  };
  double r64 = residual(64), r256 = residual(256);
  EXPECT_LE(r64, 3.0 / 64);
  EXPECT_LE(r256, 3.0 / 256);
  EXPECT_LT(r256, r64);
}

TEST(Model, DriverIgnoresPartnerZ) {
  // The partner type carries only (x', y'); this compiles only if no z' slot exists.
  static_assert(sizeof(Partner) == sizeof(CSpan) + sizeof(double));
  auto m = catalog("tanh_bounded", {});
  Vec x{0.2}, z{0.1}, xp{-0.4};
  double f = m->driver(Lambda{x, 0.3, z}, Partner{xp, 0.5});
  EXPECT_TRUE(std::isfinite(f));
}
