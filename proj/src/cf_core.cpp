#include "cfdistill/cf_core.hpp"

#include <algorithm>
#include <cmath>

namespace cfdistill {

bool is_valid_state(const CfState& state) noexcept {
  return std::isfinite(state.v) && std::isfinite(state.s) && std::isfinite(state.dv) &&
         state.v >= 0.0 && state.s > 0.0;
}

void validate_state(const CfState& state) {
  if (!is_valid_state(state)) {
    throw std::invalid_argument("invalid car-following state (v=" + std::to_string(state.v) +
                                ", s=" + std::to_string(state.s) +
                                ", dv=" + std::to_string(state.dv) + ")");
  }
}

double clamp_accel(double a) noexcept { return std::clamp(a, kAccelMin, kAccelMax); }

Kinematics ballistic_step(double v, double x, double a, double dt) {
  if (!std::isfinite(v) || !std::isfinite(x) || !std::isfinite(a) || !std::isfinite(dt)) {
    throw std::invalid_argument("ballistic_step: non-finite input");
  }
  if (dt <= 0.0) throw std::invalid_argument("ballistic_step: dt must be positive");

  const double v_next = v + a * dt;
  if (v_next < 0.0) {
    // Only reachable with a < 0; the vehicle halts at t* = -v / a.
    const double t_stop = -v / a;
    return {0.0, x + v * t_stop + 0.5 * a * t_stop * t_stop};
  }
  return {v_next, x + v * dt + 0.5 * a * dt * dt};
}

void IdmParams::validate() const {
  const auto check = [](double value, const char* name) {
    if (!std::isfinite(value) || value <= 0.0) {
      throw std::invalid_argument(std::string("IDM parameter ") + name + " must be positive");
    }
  };
  check(v0, "v0");
  check(T, "T");
  check(s0, "s0");
  check(a_max, "a_max");
  check(b, "b");
}

namespace {

struct DesiredGap {
  double value;
  bool floored;
};

DesiredGap desired_gap(const IdmParams& p, const CfState& st) {
  const double dynamic = st.v * p.T + st.v * st.dv / (2.0 * std::sqrt(p.a_max * p.b));
  if (dynamic < 0.0) return {p.s0, true};
  return {p.s0 + dynamic, false};
}

}  // namespace

double idm_accel(const IdmParams& p, const CfState& state) {
  validate_state(state);
  const double gap = desired_gap(p, state).value;
  const double ratio = state.v / p.v0;
  const double r2 = ratio * ratio;
  const double g = gap / state.s;
  return p.a_max * (1.0 - r2 * r2 - g * g);
}

InputGrad idm_input_grad(const IdmParams& p, const CfState& state) {
  validate_state(state);
  const auto [gap, floored] = desired_gap(p, state);
  const double sqrt_ab = std::sqrt(p.a_max * p.b);
  const double dgap_dv = floored ? 0.0 : p.T + state.dv / (2.0 * sqrt_ab);
  const double dgap_ddv = floored ? 0.0 : state.v / (2.0 * sqrt_ab);
  const double s2 = state.s * state.s;
  const double v0_4 = p.v0 * p.v0 * p.v0 * p.v0;

  InputGrad g;
  g.da_dv = p.a_max * (-4.0 * state.v * state.v * state.v / v0_4 - 2.0 * gap / s2 * dgap_dv);
  g.da_ds = p.a_max * 2.0 * gap * gap / (s2 * state.s);
  g.da_ddv = -p.a_max * 2.0 * gap / s2 * dgap_ddv;
  return g;
}

double idm_equilibrium_spacing(const IdmParams& p, double v_e) {
  if (!std::isfinite(v_e) || v_e < 0.0) {
    throw std::invalid_argument("idm_equilibrium_spacing: speed must be non-negative");
  }
  if (v_e >= p.v0) {
    throw NoEquilibriumError("IDM has no equilibrium at v_e >= v0 (v_e=" + std::to_string(v_e) +
                             ")");
  }
  const double r = v_e / p.v0;
  return (p.s0 + v_e * p.T) / std::sqrt(1.0 - r * r * r * r);
}

void CarFollowingModel::accel_batch(std::span<const CfState> states, std::span<double> out) const {
  for (std::size_t i = 0; i < states.size(); ++i) out[i] = accel(states[i]);
}

void CarFollowingModel::input_grad_batch(std::span<const CfState> states,
                                         std::span<InputGrad> out) const {
  for (std::size_t i = 0; i < states.size(); ++i) out[i] = input_grad(states[i]);
}

IdmModel::IdmModel(IdmParams params) : params_(params) { params_.validate(); }

double IdmModel::accel(const CfState& state) const { return idm_accel(params_, state); }

InputGrad IdmModel::input_grad(const CfState& state) const {
  return idm_input_grad(params_, state);
}

}  // namespace cfdistill
