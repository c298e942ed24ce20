#include "cfdistill/traffic_sim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace cfdistill {

void Trajectory::validate() const {
  const std::size_t n = leader_x.size();
  if (n < 2) throw std::invalid_argument("trajectory needs at least two samples");
  if (leader_v.size() != n || follower_x.size() != n || follower_v.size() != n) {
    throw std::invalid_argument("trajectory arrays differ in length");
  }
  if (!(dt > 0.0)) throw std::invalid_argument("trajectory dt must be > 0");
  if (!(recorded_spacing(0) > 0.0)) throw std::invalid_argument("trajectory initial spacing must be > 0");
}

SimResult replay_simulate(const CarFollowingModel& model, const Trajectory& traj) {
  traj.validate();
  SimResult out;
  const std::size_t n = traj.size();
  out.spacing.reserve(n);
  out.speed.reserve(n);
  out.accel.reserve(n);
  double x = traj.follower_x[0];
  double v = traj.follower_v[0];
  for (std::size_t t = 0; t < n; ++t) {
    const double s = traj.leader_x[t] - x - traj.leader_length;
    if (s <= 0.0) {
      out.collided = true;
      out.collision_time = static_cast<double>(t) * traj.dt;
      break;
    }
    out.spacing.push_back(s);
    out.speed.push_back(v);
    if (t + 1 == n) break;
    const double a = clamp_accel(model.accel({v, s, v - traj.leader_v[t]}));
    out.accel.push_back(a);
    const Kinematics next = ballistic_step(v, x, a, traj.dt);
    v = next.v;
    x = next.x;
  }
  return out;
}

double evaluate_rmse(std::span<const SimResult> results, std::span<const Trajectory> trajs) {
  if (results.empty()) throw std::invalid_argument("evaluate_rmse: no trajectories");
  if (results.size() != trajs.size()) throw std::invalid_argument("evaluate_rmse: size mismatch");
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& sim = results[i].spacing;
    for (std::size_t t = 0; t < sim.size(); ++t) {
      const double e = sim[t] - trajs[i].recorded_spacing(t);
      sum += e * e;
      ++count;
    }
  }
  if (count == 0) throw std::invalid_argument("evaluate_rmse: no simulated steps");
  return std::sqrt(sum / static_cast<double>(count));
}

double wmape(std::span<const double> predicted, std::span<const double> actual) {
  if (predicted.size() != actual.size()) throw std::invalid_argument("wmape: size mismatch");
  double num = 0.0;
  double den = 0.0;
  for (std::size_t i = 0; i < actual.size(); ++i) {
    num += std::abs(predicted[i] - actual[i]);
    den += std::abs(actual[i]);
  }
  if (den == 0.0) throw UndefinedMetricError("wmape: all actual accelerations are zero");
  return num / den;
}

void PlatoonConfig::validate() const {
  if (n_vehicles < 2) throw std::invalid_argument("platoon: need at least 2 vehicles");
  if (!(v_e > 0.0)) throw std::invalid_argument("platoon: v_e must be > 0");
  if (!(horizon > 0.0) || !(dt > 0.0)) throw std::invalid_argument("platoon: horizon and dt must be > 0");
  if (disturbance &&
      (!(disturbance_start > 0.0) || !(disturbance_decel > 0.0) || !(phase_duration > 0.0))) {
    throw std::invalid_argument("platoon: disturbance parameters must be > 0");
  }
}

namespace {

struct LeaderScript {
  long start = 0;
  long phase = 0;
};

LeaderScript leader_script(const PlatoonConfig& cfg) {
  return {std::lround(cfg.disturbance_start / cfg.dt), std::lround(cfg.phase_duration / cfg.dt)};
}

double leader_accel(const PlatoonConfig& cfg, long k) {
  if (!cfg.disturbance) return 0.0;
  const auto sc = leader_script(cfg);
  if (k >= sc.start && k < sc.start + sc.phase) return -cfg.disturbance_decel;
  if (k >= sc.start + sc.phase && k < sc.start + 2 * sc.phase) return cfg.disturbance_decel;
  return 0.0;
}

}  // namespace

double platoon_leader_speed(const PlatoonConfig& cfg, long step) {
  if (!cfg.disturbance) return cfg.v_e;
  const auto sc = leader_script(cfg);
  const long dec = std::clamp(step - sc.start, 0L, sc.phase);
  const long acc = std::clamp(step - sc.start - sc.phase, 0L, sc.phase);
  // Integer step counts make the speed return exactly to v_e.
  return std::max(0.0, cfg.v_e + cfg.disturbance_decel * cfg.dt * static_cast<double>(acc - dec));
}

DisturbanceSeries platoon_simulate(const CarFollowingModel& model, const PlatoonConfig& cfg,
                                   const EquilibriumSearchConfig& search) {
  cfg.validate();
  const EquilibriumPoint eq = find_equilibrium_at(model, cfg.v_e, search);
  const auto n = static_cast<std::size_t>(cfg.n_vehicles);
  const long steps = std::lround(cfg.horizon / cfg.dt);

  DisturbanceSeries out;
  out.dt = cfg.dt;
  out.v_e = cfg.v_e;
  out.s_e = eq.s_e;
  out.u.assign(n, {});
  out.y.assign(n, {});

  std::vector<double> x(n), v(n, cfg.v_e), a(n - 1);
  for (std::size_t i = 1; i < n; ++i) x[i] = x[i - 1] - eq.s_e;
  std::vector<CfState> states(n - 1);

  const auto record = [&](long) {
    for (std::size_t i = 0; i < n; ++i) {
      out.u[i].push_back(v[i] - cfg.v_e);
      if (i > 0) out.y[i].push_back(x[i - 1] - x[i] - eq.s_e);
    }
  };

  record(0);
  for (long k = 0; k < steps; ++k) {
    for (std::size_t i = 1; i < n; ++i) {
      const double gap = x[i - 1] - x[i];
      if (gap <= 0.0) {
        out.collided = true;
        out.collision_note = "collision between vehicles " + std::to_string(i) + " and " +
                             std::to_string(i + 1) + " at t=" +
                             std::to_string(static_cast<double>(k) * cfg.dt) + " s";
        break;
      }
      states[i - 1] = {v[i], gap, v[i] - v[i - 1]};
    }
    if (out.collided) break;
    model.accel_batch(states, a);

    const double a_lead = leader_accel(cfg, k);
    const Kinematics lead = ballistic_step(v[0], x[0], a_lead, cfg.dt);
    x[0] = lead.x;
    v[0] = platoon_leader_speed(cfg, k + 1);
    for (std::size_t i = 1; i < n; ++i) {
      const Kinematics next = ballistic_step(v[i], x[i], clamp_accel(a[i - 1]), cfg.dt);
      v[i] = next.v;
      x[i] = next.x;
    }
    record(k + 1);
  }

  out.peaks.resize(n);
  out.peak_diffs.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double peak = 0.0;
    for (double ui : out.u[i]) peak = std::max(peak, std::abs(ui));
    out.peaks[i] = peak;
    if (i > 0) out.peak_diffs[i] = peak - out.peaks[i - 1];
  }
  return out;
}

StringVerdict string_stability_verdict(const DisturbanceSeries& series, double tolerance) {
  if (series.peaks.size() < 3) throw std::invalid_argument("string_stability_verdict: need n >= 3");
  for (std::size_t i = 1; i < series.peaks.size(); ++i) {
    if (series.peaks[i] - series.peaks[i - 1] > tolerance) return StringVerdict::Unstable;
  }
  return StringVerdict::Stable;
}

void write_disturbance_csv(const std::filesystem::path& path, const DisturbanceSeries& series) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << "vehicle,t,speed,u\n";
  char line[128];
  for (std::size_t i = 0; i < series.u.size(); ++i) {
    for (std::size_t k = 0; k < series.u[i].size(); ++k) {
      const double u = series.u[i][k];
      std::snprintf(line, sizeof line, "%zu,%.2f,%.9f,%.9g\n", i + 1,
                    static_cast<double>(k) * series.dt, series.v_e + u, u);
      out << line;
    }
  }
}

void write_replay_csv(const std::filesystem::path& path, std::span<const SimResult> results,
                      std::span<const Trajectory> trajs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << "trajectory,t,spacing_sim,spacing_obs\n";
  char line[160];
  for (std::size_t i = 0; i < results.size(); ++i) {
    for (std::size_t t = 0; t < results[i].spacing.size(); ++t) {
      std::snprintf(line, sizeof line, "%zu,%.3f,%.6f,%.6f\n", i,
                    static_cast<double>(t) * trajs[i].dt, results[i].spacing[t],
                    trajs[i].recorded_spacing(t));
      out << line;
    }
  }
}

}  // namespace cfdistill
