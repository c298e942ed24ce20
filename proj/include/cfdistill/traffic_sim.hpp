#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cfdistill/cf_core.hpp"
#include "cfdistill/stability.hpp"

namespace cfdistill {

/// Recorded leader/follower kinematics at a fixed step. Positions are front
/// bumper positions, so the gap is leader_x - follower_x - leader_length.
struct Trajectory {
  double dt = 0.1;
  std::vector<double> leader_x, leader_v;
  std::vector<double> follower_x, follower_v;
  double leader_length = 0.0;

  void validate() const;
  std::size_t size() const noexcept { return leader_x.size(); }
  double recorded_spacing(std::size_t t) const {
    return leader_x[t] - follower_x[t] - leader_length;
  }
};

struct SimResult {
  std::vector<double> spacing;  // simulated gap per step, up to (excluding) a collision
  std::vector<double> speed;
  std::vector<double> accel;    // applied (clamped) acceleration per step
  bool collided = false;
  std::optional<double> collision_time;  // s after the first sample
};

/// Drives the follower with `model` against the recorded leader.
SimResult replay_simulate(const CarFollowingModel& model, const Trajectory& traj);

/// Pooled spacing RMSE over every (trajectory, step) pair that was simulated.
double evaluate_rmse(std::span<const SimResult> results, std::span<const Trajectory> trajs);

class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

/// sum |pred - actual| / sum |actual|.
double wmape(std::span<const double> predicted, std::span<const double> actual);

struct PlatoonConfig {
  int n_vehicles = 100;
  double v_e = 5.0;
  double horizon = 100.0;
  double dt = 0.1;
  double disturbance_start = 6.0;
  double disturbance_decel = 0.5;  // m/s^2
  double phase_duration = 3.0;
  bool disturbance = true;

  void validate() const;
};

struct DisturbanceSeries {
  double dt = 0.1;
  double v_e = 0.0;
  double s_e = 0.0;
  std::vector<std::vector<double>> u;  // [vehicle][step] speed deviation, m/s
  std::vector<std::vector<double>> y;  // [vehicle][step] gap deviation, m (vehicle 0 is empty)
  std::vector<double> peaks;           // max_t |u_i|
  std::vector<double> peak_diffs;      // peaks[i] - peaks[i-1], index 0 unused (0)
  bool collided = false;
  std::string collision_note;
};

/// Homogeneous platoon around (v_e, s_e(v_e)); vehicle lengths are zero.
/// The first vehicle brakes and then accelerates at the configured rate.
DisturbanceSeries platoon_simulate(const CarFollowingModel& model, const PlatoonConfig& cfg,
                                   const EquilibriumSearchConfig& search = {});

/// Scripted leader speed at step k (exact multiples of the phase rate).
double platoon_leader_speed(const PlatoonConfig& cfg, long step);

enum class StringVerdict { Stable, Unstable };

/// Stable iff peaks never grow by more than `tolerance` from vehicle 2 on.
StringVerdict string_stability_verdict(const DisturbanceSeries& series, double tolerance = 1e-6);

/// CSV `vehicle,t,speed,u`.
void write_disturbance_csv(const std::filesystem::path& path, const DisturbanceSeries& series);
/// CSV `trajectory,t,spacing_sim,spacing_obs`.
void write_replay_csv(const std::filesystem::path& path, std::span<const SimResult> results,
                      std::span<const Trajectory> trajs);

}  // namespace cfdistill
