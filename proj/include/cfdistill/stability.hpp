#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cfdistill/cf_core.hpp"

namespace cfdistill {

struct EquilibriumSearchConfig {
  double v_min = 0.5;
  double v_max = 39.5;
  double v_step = 0.5;
  double s_min = 0.1;
  double s_max = 100.0;
  double tolerance = 1e-6;   // accepted |f(v_e, s_e, 0)|, m/s^2
  int max_iterations = 100;  // bisection steps
  int scan_points = 400;     // spacing samples per speed for bracketing

  void validate() const;
  std::vector<double> speeds() const;
};

struct EquilibriumPoint {
  double v_e = 0.0;
  double s_e = 0.0;
  double residual = 0.0;
  double f_v = 0.0;
  double f_s = 0.0;
  double f_dv = 0.0;
  double ss_criterion = 0.0;

  CfState state() const { return {v_e, s_e, 0.0}; }
};

struct EquilibriumSearch {
  std::vector<EquilibriumPoint> points;
  std::vector<double> skipped_speeds;  // no sign change over the spacing bounds

  double min_criterion() const;  // +inf when no points
};

/// Raised when the model decreases in spacing along a bracketing scan, so
/// the equilibrium at that speed need not be unique.
class AmbiguousEquilibriumError : public Error {
 public:
  AmbiguousEquilibriumError(const std::string& what, double speed) : Error(what), speed_(speed) {}
  double speed() const noexcept { return speed_; }

 private:
  double speed_;
};

/// For each grid speed, scans f(v, s, 0) over the spacing bounds and bisects
/// the bracketed sign change. Speeds without a sign change are skipped.
EquilibriumSearch find_equilibria(const CarFollowingModel& model, const EquilibriumSearchConfig& cfg);

/// Equilibrium spacing at a single speed; throws NoEquilibriumError when the
/// spacing bounds do not bracket a root.
EquilibriumPoint find_equilibrium_at(const CarFollowingModel& model, double v_e,
                                     const EquilibriumSearchConfig& cfg);

bool local_stability_check(double f_v, double f_s, double f_dv) noexcept;

/// f_v^2 - 2 f_s + 2 f_v f_dv; positive means string stable at that point.
double string_stability_criterion(double f_v, double f_s, double f_dv) noexcept;

struct MonotonicityAudit {
  std::size_t samples = 0;
  double rate_v = 0.0;   // share with da/dv > 0
  double rate_s = 0.0;   // share with da/ds < 0
  double rate_dv = 0.0;  // share with da/ddv > 0
};

MonotonicityAudit monotonicity_audit(const CarFollowingModel& model, std::span<const CfState> states);

struct StabilityReport {
  EquilibriumSearchConfig config;
  EquilibriumSearch search;
  std::vector<bool> locally_stable;  // per point
  MonotonicityAudit audit;
  bool all_locally_stable = false;
  double min_criterion = 0.0;
  bool string_stable = false;  // every point has a positive criterion

  nlohmann::json to_json() const;
};

StabilityReport analyze(const CarFollowingModel& model, const EquilibriumSearchConfig& cfg,
                        std::span<const CfState> samples);

/// `v_e,s_e,f_v,f_s,f_dv,ss_criterion` rows.
void write_equilibria_csv(const std::filesystem::path& path, const std::vector<EquilibriumPoint>& points);

nlohmann::json to_json(const EquilibriumSearchConfig& cfg);
EquilibriumSearchConfig equilibrium_config_from_json(const nlohmann::json& j,
                                                     EquilibriumSearchConfig base = {});

}  // namespace cfdistill
