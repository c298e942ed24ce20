#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "cfdistill/cf_core.hpp"
#include "cfdistill/rng.hpp"

using namespace cfdistill;

namespace {

// Independent scalar IDM used as an oracle.
double idm_reference(double v, double s, double dv) {
  const double v0 = 30, T = 1.5, s0 = 2, a = 1, b = 1.5;
  double star = s0 + v * T + v * dv / (2.0 * std::sqrt(a * b));
  if (star < s0) star = s0;
  return a * (1.0 - std::pow(v / v0, 4) - std::pow(star / s, 2));
}

}  // namespace

TEST(BallisticStep, UnitAcceleration) {
  const auto k = ballistic_step(10.0, 0.0, 1.0, 0.1);
  EXPECT_NEAR(k.v, 10.1, 1e-12);
  EXPECT_NEAR(k.x, 1.005, 1e-12);
}

TEST(BallisticStep, ZeroAccelerationIsExact) {
  const auto k = ballistic_step(5.0, 0.0, 0.0, 0.1);
  EXPECT_EQ(k.v, 5.0);
  EXPECT_NEAR(k.x, 0.5, 1e-15);
}

TEST(BallisticStep, TruncatedStop) {
  const auto k = ballistic_step(0.2, 0.0, -5.0, 0.1);
  EXPECT_EQ(k.v, 0.0);
  EXPECT_NEAR(k.x, 0.2 * 0.04 - 0.5 * 5.0 * 0.04 * 0.04, 1e-15);
  EXPECT_NEAR(k.x, 0.004, 1e-15);
}

TEST(BallisticStep, StopMidStepLongerDt) {
  const auto k = ballistic_step(1.0, 0.0, -5.0, 0.5);
  EXPECT_EQ(k.v, 0.0);
  EXPECT_NEAR(k.x, 0.1, 1e-15);
}

TEST(BallisticStep, RejectsNonFinite) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(ballistic_step(nan, 0, 0, 0.1), std::invalid_argument);
  EXPECT_THROW(ballistic_step(1, 0, std::numeric_limits<double>::infinity(), 0.1),
               std::invalid_argument);
}

TEST(BallisticStep, SpeedNeverNegative) {
  Rng rng(5);
  for (int i = 0; i < 10000; ++i) {
    const double v = rng.uniform(0, 40);
    const double a = rng.uniform(-5, 5);
    const double dt = rng.uniform(0.01, 1.0);
    const auto k = ballistic_step(v, 3.0, a, dt);
    EXPECT_GE(k.v, 0.0);
    EXPECT_GE(k.x, 3.0 - 1e-12);
  }
}

TEST(Idm, ZeroAtClosedFormEquilibrium) {
  const IdmParams p;
  const double s_e = 24.5 / std::sqrt(0.9375);
  EXPECT_NEAR(s_e, 25.3035, 1e-4);
  EXPECT_LT(std::abs(idm_accel(p, {15.0, s_e, 0.0})), 1e-6);
}

TEST(Idm, FreeRoadLimit) {
  EXPECT_NEAR(idm_accel(IdmParams{}, {0.0, 1e12, 0.0}), 1.0, 1e-12);
}

TEST(Idm, ClosingInHandEvaluation) {
  const double a = idm_accel(IdmParams{}, {15.0, 10.0, 3.0});
  EXPECT_LT(a, 0.0);
  EXPECT_NEAR(a, idm_reference(15, 10, 3), 1e-12);
  // 1 - 1/16 - ((24.5 + 45/(2 sqrt 1.5)) / 10)^2
  EXPECT_NEAR(a, -17.44191, 1e-4);
}

TEST(Idm, MatchesReferenceEverywhere) {
  Rng rng(11);
  for (int i = 0; i < 2000; ++i) {
    const double v = rng.uniform(0, 40), s = rng.uniform(0.1, 100), dv = rng.uniform(-5, 5);
    EXPECT_NEAR(idm_accel(IdmParams{}, {v, s, dv}), idm_reference(v, s, dv),
                1e-9 * (1.0 + std::abs(idm_reference(v, s, dv))));
  }
}

TEST(Idm, RejectsInvalidState) {
  EXPECT_THROW(idm_accel(IdmParams{}, {-1.0, 10.0, 0.0}), std::invalid_argument);
  EXPECT_THROW(idm_accel(IdmParams{}, {1.0, 0.0, 0.0}), std::invalid_argument);
}

TEST(IdmEquilibrium, ClosedFormValues) {
  const IdmParams p;
  // 24.5 / sqrt(0.9375) = 25.30349...
  EXPECT_NEAR(idm_equilibrium_spacing(p, 15.0), 24.5 / std::sqrt(0.9375), 1e-12);
  EXPECT_NEAR(idm_equilibrium_spacing(p, 15.0), 25.3035, 1e-4);
  EXPECT_DOUBLE_EQ(idm_equilibrium_spacing(p, 0.0), 2.0);
  EXPECT_THROW(idm_equilibrium_spacing(p, 30.0), NoEquilibriumError);
}

TEST(IdmEquilibrium, AccelVanishesOnGrid) {
  const IdmParams p;
  for (double v = 0.0; v <= 0.99 * p.v0; v += 0.297) {
    const double s = idm_equilibrium_spacing(p, v);
    EXPECT_LT(std::abs(idm_accel(p, {v, s, 0.0})), 1e-9) << "v=" << v;
  }
}

TEST(Idm, MonotoneByFiniteDifferences) {
  const IdmParams p;
  Rng rng(3);
  const double h = 1e-6;
  for (int i = 0; i < 1000; ++i) {
    const CfState st{rng.uniform(0.01, 40), rng.uniform(0.5, 100), rng.uniform(-5, 5)};
    const double dv_slope = (idm_accel(p, {st.v + h, st.s, st.dv}) - idm_accel(p, {st.v, st.s, st.dv})) / h;
    const double s_slope = (idm_accel(p, {st.v, st.s + h, st.dv}) - idm_accel(p, {st.v, st.s, st.dv})) / h;
    const double rel_slope =
        (idm_accel(p, {st.v, st.s, st.dv + h}) - idm_accel(p, {st.v, st.s, st.dv})) / h;
    EXPECT_LE(dv_slope, 1e-6);
    EXPECT_GE(s_slope, -1e-6);
    EXPECT_LE(rel_slope, 1e-6);
  }
}

TEST(Idm, AnalyticGradientMatchesFiniteDifferences) {
  const IdmParams p;
  Rng rng(8);
  const double h = 1e-5;
  for (int i = 0; i < 500; ++i) {
    const CfState st{rng.uniform(1, 39), rng.uniform(2, 99), rng.uniform(-1, 5)};
    const InputGrad g = idm_input_grad(p, st);
    const auto fd = [&](CfState a, CfState b) { return (idm_accel(p, a) - idm_accel(p, b)) / (2 * h); };
    EXPECT_NEAR(g.da_dv, fd({st.v + h, st.s, st.dv}, {st.v - h, st.s, st.dv}), 1e-5);
    EXPECT_NEAR(g.da_ds, fd({st.v, st.s + h, st.dv}, {st.v, st.s - h, st.dv}), 1e-5);
    EXPECT_NEAR(g.da_ddv, fd({st.v, st.s, st.dv + h}, {st.v, st.s, st.dv - h}), 1e-5);
  }
}

TEST(Clamp, Bounds) {
  EXPECT_EQ(clamp_accel(7.0), 5.0);
  EXPECT_EQ(clamp_accel(-9.0), -5.0);
  EXPECT_EQ(clamp_accel(0.3), 0.3);
}

TEST(IdmParams, Validation) {
  IdmParams p;
  p.T = 0.0;
  EXPECT_THROW(p.validate(), std::invalid_argument);
  EXPECT_THROW(IdmModel{p}, std::invalid_argument);
}
