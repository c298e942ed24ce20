#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "cfdistill/stability.hpp"
#include "cfdistill/traffic_sim.hpp"

using namespace cfdistill;

namespace {

class ConstantModel final : public CarFollowingModel {
 public:
  explicit ConstantModel(double a) : a_(a) {}
  double accel(const CfState&) const override { return a_; }
  InputGrad input_grad(const CfState&) const override { return {}; }

 private:
  double a_;
};

// Follower driven by `model` from (x=0, v0) behind a constant-speed leader.
Trajectory constant_leader(double gap, double v_leader, double v_follower, std::size_t n,
                           double dt) {
  Trajectory t;
  t.dt = dt;
  for (std::size_t k = 0; k < n; ++k) {
    t.leader_x.push_back(gap + v_leader * static_cast<double>(k) * dt);
    t.leader_v.push_back(v_leader);
    t.follower_x.push_back(v_follower * static_cast<double>(k) * dt);
    t.follower_v.push_back(v_follower);
  }
  return t;
}

// Trajectory whose recorded spacing is `spacing` at every step.
Trajectory recorded(const std::vector<double>& spacing) {
  Trajectory t;
  for (double s : spacing) {
    t.leader_x.push_back(s);
    t.leader_v.push_back(0.0);
    t.follower_x.push_back(0.0);
    t.follower_v.push_back(0.0);
  }
  return t;
}

}  // namespace

TEST(Replay, SelfConsistentIdm) {
  const IdmParams p;
  const IdmModel idm(p);
  Trajectory t;
  t.dt = 0.1;
  t.leader_length = 4.5;
  double xl = 40.0, vl = 12.0, xf = 0.0, vf = 14.0;
  for (int k = 0; k < 600; ++k) {
    t.leader_x.push_back(xl);
    t.leader_v.push_back(vl);
    t.follower_x.push_back(xf);
    t.follower_v.push_back(vf);
    const double al = 0.8 * std::sin(0.05 * k);
    const double af = clamp_accel(idm.accel({vf, xl - xf - t.leader_length, vf - vl}));
    const auto nl = ballistic_step(vl, xl, al, t.dt);
    const auto nf = ballistic_step(vf, xf, af, t.dt);
    xl = nl.x, vl = nl.v, xf = nf.x, vf = nf.v;
  }
  const SimResult r = replay_simulate(idm, t);
  EXPECT_FALSE(r.collided);
  const std::vector<SimResult> rs{r};
  const std::vector<Trajectory> ts{t};
  EXPECT_LT(evaluate_rmse(rs, ts), 1e-9);
}

TEST(Replay, ZeroAccelerationKeepsSpacing) {
  const auto t = constant_leader(25.0, 10.0, 10.0, 200, 0.1);
  const auto r = replay_simulate(ConstantModel(0.0), t);
  for (double s : r.spacing) EXPECT_NEAR(s, 25.0, 1e-9);
}

TEST(Replay, CollisionAtInterceptStep) {
  // gap(t) = 21 - 5 t - 2.5 t^2 hits zero at t* = (-5 + sqrt(235)) / 5.
  const double t_star = (-5.0 + std::sqrt(235.0)) / 5.0;
  const double dt = 0.1;
  const auto t = constant_leader(21.0, 5.0, 10.0, 100, dt);
  const auto r = replay_simulate(ConstantModel(5.0), t);
  ASSERT_TRUE(r.collided);
  const long step = static_cast<long>(std::ceil(t_star / dt));
  EXPECT_EQ(step, 21);
  EXPECT_NEAR(*r.collision_time, step * dt, 1e-12);
  EXPECT_EQ(r.spacing.size(), static_cast<std::size_t>(step));

  // Halving dt moves the detected collision by at most one coarse step.
  const auto fine = replay_simulate(ConstantModel(5.0), constant_leader(21.0, 5.0, 10.0, 200, dt / 2));
  ASSERT_TRUE(fine.collided);
  EXPECT_LE(std::abs(*fine.collision_time - *r.collision_time), dt + 1e-12);
}

TEST(Replay, Deterministic) {
  const IdmModel idm(IdmParams{});
  const auto t = constant_leader(15.0, 8.0, 12.0, 300, 0.1);
  const auto a = replay_simulate(idm, t);
  const auto b = replay_simulate(idm, t);
  EXPECT_EQ(a.spacing, b.spacing);
  EXPECT_EQ(a.speed, b.speed);
}

TEST(Replay, ClampLimitsSpeedChange) {
  const auto t = constant_leader(30.0, 10.0, 10.0, 100, 0.1);
  const auto r = replay_simulate(ConstantModel(-40.0), t);
  for (std::size_t k = 1; k < r.speed.size(); ++k) {
    EXPECT_LE(std::abs(r.speed[k] - r.speed[k - 1]), 0.5 + 1e-12);
  }
}

TEST(Rmse, ZeroAndConstantOffset) {
  const auto t = recorded({10, 11, 12});
  SimResult same;
  same.spacing = {10, 11, 12};
  SimResult shifted;
  shifted.spacing = {11, 12, 13};
  const std::vector<Trajectory> ts{t};
  EXPECT_EQ(evaluate_rmse(std::vector<SimResult>{same}, ts), 0.0);
  EXPECT_DOUBLE_EQ(evaluate_rmse(std::vector<SimResult>{shifted}, ts), 1.0);
}

TEST(Rmse, PooledOverTrajectories) {
  const std::vector<Trajectory> ts{recorded({10, 10}), recorded({10, 10})};
  SimResult a, b;
  a.spacing = {10, 12};  // squared errors 0, 4
  b.spacing = {11, 9};   // squared errors 1, 1
  const std::vector<SimResult> rs{a, b};
  EXPECT_NEAR(evaluate_rmse(rs, ts), std::sqrt(6.0 / 4.0), 1e-15);
  EXPECT_NEAR(evaluate_rmse(rs, ts), 1.2247, 1e-4);
}

TEST(Rmse, EmptyInputRaises) {
  EXPECT_THROW(evaluate_rmse(std::vector<SimResult>{}, std::vector<Trajectory>{}),
               std::invalid_argument);
}

TEST(Wmape, HandValues) {
  EXPECT_DOUBLE_EQ(wmape(std::vector<double>{1, 2}, std::vector<double>{1, 1}), 0.5);
  EXPECT_EQ(wmape(std::vector<double>{0.3, -1}, std::vector<double>{0.3, -1}), 0.0);
  EXPECT_DOUBLE_EQ(wmape(std::vector<double>{0, 0}, std::vector<double>{1, -1}), 1.0);
  EXPECT_THROW(wmape(std::vector<double>{1, 1}, std::vector<double>{0, 0}), UndefinedMetricError);
}

TEST(Platoon, LeaderReturnsToEquilibriumSpeed) {
  const PlatoonConfig cfg;
  EXPECT_EQ(platoon_leader_speed(cfg, 0), 5.0);
  EXPECT_NEAR(platoon_leader_speed(cfg, 90), 3.5, 1e-12);  // after the 3 s braking phase
  EXPECT_EQ(platoon_leader_speed(cfg, 120), 5.0);
  EXPECT_EQ(platoon_leader_speed(cfg, 1000), 5.0);
}

TEST(Platoon, NoDisturbanceStaysAtEquilibrium) {
  PlatoonConfig cfg;
  cfg.disturbance = false;
  const auto series = platoon_simulate(IdmModel(IdmParams{}), cfg);
  double worst = 0.0;
  for (double p : series.peaks) worst = std::max(worst, p);
  EXPECT_LT(worst, 1e-9);
  EXPECT_EQ(series.u.size(), 100u);
  EXPECT_EQ(series.u[0].size(), 1001u);
}

TEST(Platoon, NoEquilibriumIsAnError) {
  EXPECT_THROW(platoon_simulate(ConstantModel(0.5), PlatoonConfig{}), NoEquilibriumError);
}

TEST(Verdict, PeakSequences) {
  DisturbanceSeries s;
  s.peaks = {1.5, 1.2, 1.0, 0.9};
  EXPECT_EQ(string_stability_verdict(s), StringVerdict::Stable);
  s.peaks = {1.5, 1.6, 1.7};
  EXPECT_EQ(string_stability_verdict(s), StringVerdict::Unstable);
}

// Analytic criterion sign at v_e against the simulated verdict.
class CrossOracle : public ::testing::TestWithParam<IdmParams> {};

TEST_P(CrossOracle, CriterionSignMatchesSimulation) {
  const IdmModel idm(GetParam());
  int compared = 0;
  for (double v_e : {5.0, 10.0, 15.0, 20.0}) {
    PlatoonConfig cfg;
    cfg.v_e = v_e;
    const auto eq = find_equilibrium_at(idm, v_e, EquilibriumSearchConfig{});
    if (std::abs(eq.ss_criterion) < 0.05) continue;  // marginal band
    const auto series = platoon_simulate(idm, cfg);
    ASSERT_FALSE(series.collided) << series.collision_note;
    const bool stable = string_stability_verdict(series) == StringVerdict::Stable;
    EXPECT_EQ(stable, eq.ss_criterion > 0.0) << "v_e " << v_e << ", criterion " << eq.ss_criterion;
    ++compared;
  }
  EXPECT_GT(compared, 0);
}

INSTANTIATE_TEST_SUITE_P(IdmVariants, CrossOracle,
                         ::testing::Values(IdmParams{30, 1.0, 2, 0.3, 1.5},
                                           IdmParams{30, 1.2, 2, 0.5, 2.0},
                                           IdmParams{30, 2.0, 2, 1.5, 1.5}),
                         [](const ::testing::TestParamInfo<IdmParams>& info) {
                           return "variant" + std::to_string(info.index);
                         });

// The default IDM sits inside the marginal band at these speeds; its
// simulated peaks must then not grow beyond the verdict tolerance.
TEST(CrossOracleDefaultIdm, MarginalAndNonGrowing) {
  const IdmModel idm(IdmParams{});
  for (double v_e : {5.0, 10.0, 15.0, 20.0}) {
    const auto eq = find_equilibrium_at(idm, v_e, EquilibriumSearchConfig{});
    EXPECT_LT(std::abs(eq.ss_criterion), 0.05) << v_e;
    PlatoonConfig cfg;
    cfg.v_e = v_e;
    EXPECT_EQ(string_stability_verdict(platoon_simulate(idm, cfg)), StringVerdict::Stable) << v_e;
  }
}
