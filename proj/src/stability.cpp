#include "cfdistill/stability.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

namespace cfdistill {

void EquilibriumSearchConfig::validate() const {
  if (!(v_min >= 0.0) || !(v_min <= v_max)) throw std::invalid_argument("equilibrium: need 0 <= v_min <= v_max");
  if (!(v_step > 0.0)) throw std::invalid_argument("equilibrium: v_step must be > 0");
  if (!(s_min > 0.0) || !(s_min < s_max)) throw std::invalid_argument("equilibrium: need 0 < s_min < s_max");
  if (!(tolerance > 0.0)) throw std::invalid_argument("equilibrium: tolerance must be > 0");
  if (max_iterations < 1) throw std::invalid_argument("equilibrium: max_iterations must be >= 1");
  if (scan_points < 2) throw std::invalid_argument("equilibrium: scan_points must be >= 2");
}

std::vector<double> EquilibriumSearchConfig::speeds() const {
  std::vector<double> out;
  for (long i = 0;; ++i) {
    const double v = v_min + static_cast<double>(i) * v_step;
    if (v > v_max + 1e-9 * v_step) break;
    out.push_back(v);
  }
  return out;
}

double EquilibriumSearch::min_criterion() const {
  double m = std::numeric_limits<double>::infinity();
  for (const auto& p : points) m = std::min(m, p.ss_criterion);
  return m;
}

bool local_stability_check(double f_v, double f_s, double f_dv) noexcept {
  return f_v + f_dv < 0.0 && f_s > 0.0;
}

double string_stability_criterion(double f_v, double f_s, double f_dv) noexcept {
  return f_v * f_v - 2.0 * f_s + 2.0 * f_v * f_dv;
}

namespace {

struct Bracket {
  double v;
  double lo, hi;
  double f_lo, f_hi;
};

EquilibriumSearch search_speeds(const CarFollowingModel& model, const std::vector<double>& speeds,
                                const EquilibriumSearchConfig& cfg) {
  cfg.validate();
  const auto n_scan = static_cast<std::size_t>(cfg.scan_points);
  std::vector<double> grid(n_scan);
  for (std::size_t k = 0; k < n_scan; ++k) {
    grid[k] = cfg.s_min + (cfg.s_max - cfg.s_min) * static_cast<double>(k) /
                              static_cast<double>(n_scan - 1);
  }
  grid.back() = cfg.s_max;

  EquilibriumSearch result;
  std::vector<Bracket> brackets;
  std::vector<CfState> states(n_scan);
  std::vector<double> f(n_scan);
  std::vector<InputGrad> g(n_scan);
  for (double v : speeds) {
    for (std::size_t k = 0; k < n_scan; ++k) states[k] = {v, grid[k], 0.0};
    model.accel_batch(states, f);
    model.input_grad_batch(states, g);
    for (std::size_t k = 0; k < n_scan; ++k) {
      if (g[k].da_ds < 0.0) {
        char msg[160];
        std::snprintf(msg, sizeof msg,
                      "model decreases with spacing at v=%.3f m/s, s=%.3f m; multiple "
                      "equilibria possible",
                      v, grid[k]);
        throw AmbiguousEquilibriumError(msg, v);
      }
    }
    bool found = false;
    for (std::size_t k = 0; k + 1 < n_scan; ++k) {
      if (f[k] < 0.0 && f[k + 1] >= 0.0) {
        brackets.push_back({v, grid[k], grid[k + 1], f[k], f[k + 1]});
        found = true;
        break;
      }
    }
    if (!found && f.front() == 0.0) {
      brackets.push_back({v, grid[0], grid[0], 0.0, 0.0});
      found = true;
    }
    if (!found) result.skipped_speeds.push_back(v);
  }

  // Bisect all brackets in lockstep so batched models evaluate once per step.
  std::vector<CfState> mids(brackets.size());
  std::vector<double> fm(brackets.size());
  for (int it = 0; it < cfg.max_iterations && !brackets.empty(); ++it) {
    for (std::size_t i = 0; i < brackets.size(); ++i) {
      mids[i] = {brackets[i].v, 0.5 * (brackets[i].lo + brackets[i].hi), 0.0};
    }
    model.accel_batch(mids, fm);
    for (std::size_t i = 0; i < brackets.size(); ++i) {
      auto& b = brackets[i];
      if (fm[i] < 0.0) {
        b.lo = mids[i].s;
        b.f_lo = fm[i];
      } else {
        b.hi = mids[i].s;
        b.f_hi = fm[i];
      }
    }
  }

  std::vector<CfState> roots;
  std::vector<double> residuals;
  for (const auto& b : brackets) {
    const bool take_lo = std::abs(b.f_lo) < std::abs(b.f_hi);
    const double s = take_lo ? b.lo : b.hi;
    const double r = std::abs(take_lo ? b.f_lo : b.f_hi);
    if (r <= cfg.tolerance) {
      roots.push_back({b.v, s, 0.0});
      residuals.push_back(r);
    } else {
      result.skipped_speeds.push_back(b.v);
    }
  }
  std::sort(result.skipped_speeds.begin(), result.skipped_speeds.end());

  std::vector<InputGrad> rg(roots.size());
  model.input_grad_batch(roots, rg);
  for (std::size_t i = 0; i < roots.size(); ++i) {
    EquilibriumPoint p;
    p.v_e = roots[i].v;
    p.s_e = roots[i].s;
    p.residual = residuals[i];
    p.f_v = rg[i].da_dv;
    p.f_s = rg[i].da_ds;
    p.f_dv = rg[i].da_ddv;
    p.ss_criterion = string_stability_criterion(p.f_v, p.f_s, p.f_dv);
    result.points.push_back(p);
  }
  return result;
}

}  // namespace

EquilibriumSearch find_equilibria(const CarFollowingModel& model, const EquilibriumSearchConfig& cfg) {
  cfg.validate();
  return search_speeds(model, cfg.speeds(), cfg);
}

EquilibriumPoint find_equilibrium_at(const CarFollowingModel& model, double v_e,
                                     const EquilibriumSearchConfig& cfg) {
  const auto search = search_speeds(model, {v_e}, cfg);
  if (search.points.empty()) {
    throw NoEquilibriumError("no equilibrium spacing in [" + std::to_string(cfg.s_min) + ", " +
                             std::to_string(cfg.s_max) + "] m at v_e=" + std::to_string(v_e) +
                             " m/s");
  }
  return search.points.front();
}

MonotonicityAudit monotonicity_audit(const CarFollowingModel& model, std::span<const CfState> states) {
  if (states.empty()) throw std::invalid_argument("monotonicity_audit: empty sample set");
  constexpr std::size_t kChunk = 4096;
  std::size_t bad_v = 0, bad_s = 0, bad_dv = 0;
  std::vector<InputGrad> g;
  for (std::size_t start = 0; start < states.size(); start += kChunk) {
    const auto chunk = states.subspan(start, std::min(kChunk, states.size() - start));
    g.resize(chunk.size());
    model.input_grad_batch(chunk, g);
    for (const auto& gi : g) {
      bad_v += gi.da_dv > 0.0;
      bad_s += gi.da_ds < 0.0;
      bad_dv += gi.da_ddv > 0.0;
    }
  }
  const double n = static_cast<double>(states.size());
  return {states.size(), static_cast<double>(bad_v) / n, static_cast<double>(bad_s) / n,
          static_cast<double>(bad_dv) / n};
}

StabilityReport analyze(const CarFollowingModel& model, const EquilibriumSearchConfig& cfg,
                        std::span<const CfState> samples) {
  StabilityReport report;
  report.config = cfg;
  report.search = find_equilibria(model, cfg);
  report.all_locally_stable = true;
  for (const auto& p : report.search.points) {
    const bool ok = local_stability_check(p.f_v, p.f_s, p.f_dv);
    report.locally_stable.push_back(ok);
    report.all_locally_stable = report.all_locally_stable && ok;
  }
  if (!samples.empty()) report.audit = monotonicity_audit(model, samples);
  const bool any = !report.search.points.empty();
  report.min_criterion = any ? report.search.min_criterion() : 0.0;
  report.string_stable = any && report.min_criterion > 0.0;
  if (!any) report.all_locally_stable = false;
  return report;
}

nlohmann::json to_json(const EquilibriumSearchConfig& cfg) {
  return {{"v_min", cfg.v_min},         {"v_max", cfg.v_max},
          {"v_step", cfg.v_step},       {"s_min", cfg.s_min},
          {"s_max", cfg.s_max},         {"tolerance", cfg.tolerance},
          {"max_iterations", cfg.max_iterations}, {"scan_points", cfg.scan_points}};
}

EquilibriumSearchConfig equilibrium_config_from_json(const nlohmann::json& j,
                                                     EquilibriumSearchConfig base) {
  base.v_min = j.value("v_min", base.v_min);
  base.v_max = j.value("v_max", base.v_max);
  base.v_step = j.value("v_step", base.v_step);
  base.s_min = j.value("s_min", base.s_min);
  base.s_max = j.value("s_max", base.s_max);
  base.tolerance = j.value("tolerance", base.tolerance);
  base.max_iterations = j.value("max_iterations", base.max_iterations);
  base.scan_points = j.value("scan_points", base.scan_points);
  return base;
}

nlohmann::json StabilityReport::to_json() const {
  nlohmann::json points = nlohmann::json::array();
  for (std::size_t i = 0; i < search.points.size(); ++i) {
    const auto& p = search.points[i];
    points.push_back({{"v_e", p.v_e},
                      {"s_e", p.s_e},
                      {"residual", p.residual},
                      {"f_v", p.f_v},
                      {"f_s", p.f_s},
                      {"f_dv", p.f_dv},
                      {"ss_criterion", p.ss_criterion},
                      {"locally_stable", static_cast<bool>(locally_stable[i])}});
  }
  return {{"config", cfdistill::to_json(config)},
          {"equilibria", points},
          {"skipped_speeds", search.skipped_speeds},
          {"monotonicity_audit",
           {{"samples", audit.samples},
            {"rate_v", audit.rate_v},
            {"rate_s", audit.rate_s},
            {"rate_dv", audit.rate_dv}}},
          {"all_locally_stable", all_locally_stable},
          {"min_ss_criterion", min_criterion},
          {"string_stable", string_stable}};
}

void write_equilibria_csv(const std::filesystem::path& path, const std::vector<EquilibriumPoint>& points) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << "v_e,s_e,f_v,f_s,f_dv,ss_criterion\n";
  char line[256];
  for (const auto& p : points) {
    std::snprintf(line, sizeof line, "%.6f,%.9f,%.9g,%.9g,%.9g,%.9g\n", p.v_e, p.s_e, p.f_v, p.f_s,
                  p.f_dv, p.ss_criterion);
    out << line;
  }
}

}  // namespace cfdistill
