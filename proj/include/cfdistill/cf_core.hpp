#pragma once

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cfdistill {

/// Base class for every error raised by this library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Car-following state of one follower.
///
/// Units are SI throughout: `v` follower speed (m/s), `s` bumper-to-bumper gap
/// to the leader (m), `dv` follower speed minus leader speed (m/s, positive
/// when closing in).
struct CfState {
  double v = 0.0;
  double s = 1.0;
  double dv = 0.0;

  friend bool operator==(const CfState&, const CfState&) = default;
};

/// Throws std::invalid_argument unless v >= 0, s > 0 and all fields finite.
void validate_state(const CfState& state);
bool is_valid_state(const CfState& state) noexcept;

/// Partial derivatives of a car-following model's acceleration with respect
/// to (v, s, dv), in physical units.
struct InputGrad {
  double da_dv = 0.0;
  double da_ds = 0.0;
  double da_ddv = 0.0;
};

/// Simulation-time acceleration bounds (m/s^2).
inline constexpr double kAccelMin = -5.0;
inline constexpr double kAccelMax = 5.0;

double clamp_accel(double a) noexcept;

struct Kinematics {
  double v = 0.0;
  double x = 0.0;
};

/// Constant-acceleration update over `dt`. A vehicle that would reverse is
/// stopped at v = 0 inside the step instead.
Kinematics ballistic_step(double v, double x, double a, double dt);

struct IdmParams {
  double v0 = 30.0;    // desired speed, m/s
  double T = 1.5;      // time headway, s
  double s0 = 2.0;     // jam spacing, m
  double a_max = 1.0;  // maximum acceleration, m/s^2
  double b = 1.5;      // comfortable deceleration, m/s^2

  void validate() const;
  friend bool operator==(const IdmParams&, const IdmParams&) = default;
};

class NoEquilibriumError : public Error {
 public:
  using Error::Error;
};

double idm_accel(const IdmParams& p, const CfState& state);
InputGrad idm_input_grad(const IdmParams& p, const CfState& state);

/// Closed-form IDM equilibrium gap (s0 + v T) / sqrt(1 - (v/v0)^4).
double idm_equilibrium_spacing(const IdmParams& p, double v_e);

/// Any differentiable car-following model: acceleration and exact
/// input-gradient at a state. Batch entry points default to per-sample loops.
class CarFollowingModel {
 public:
  virtual ~CarFollowingModel() = default;

  virtual double accel(const CfState& state) const = 0;
  virtual InputGrad input_grad(const CfState& state) const = 0;

  virtual void accel_batch(std::span<const CfState> states, std::span<double> out) const;
  virtual void input_grad_batch(std::span<const CfState> states, std::span<InputGrad> out) const;
};

class IdmModel final : public CarFollowingModel {
 public:
  explicit IdmModel(IdmParams params);

  double accel(const CfState& state) const override;
  InputGrad input_grad(const CfState& state) const override;

  const IdmParams& params() const noexcept { return params_; }

 private:
  IdmParams params_;
};

}  // namespace cfdistill
