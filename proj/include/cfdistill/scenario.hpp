#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "cfdistill/cf_core.hpp"
#include "cfdistill/rng.hpp"

namespace cfdistill {

/// Normal(mean, std) conditioned on [min, max].
struct TruncNormSpec {
  double mean = 0.0;
  double std = 1.0;
  double min = -1.0;
  double max = 1.0;

  /// Throws std::invalid_argument naming `field` when the spec is unusable.
  void validate(const std::string& field = "spec") const;
};

struct ScenarioSpecs {
  TruncNormSpec v{15.0, 15.0, 0.0, 40.0};
  TruncNormSpec s{15.0, 15.0, 0.1, 100.0};
  TruncNormSpec dv{0.0, 2.0, -5.0, 5.0};

  void validate() const;
};

nlohmann::json specs_to_json(const ScenarioSpecs& specs);
/// Missing keys keep `base` values; the result is validated.
ScenarioSpecs specs_from_json(const nlohmann::json& j, ScenarioSpecs base);

/// Table of per-variable sampling distributions used by default.
inline ScenarioSpecs default_scenario_specs() { return {}; }

struct Scenario {
  std::int64_t id = 0;
  CfState state;
};

struct ScenarioSet {
  std::uint64_t seed = 0;
  ScenarioSpecs specs;
  std::vector<Scenario> scenarios;
};

/// Rejection sampling from the parent normal.
double sample_trunc_normal(const TruncNormSpec& spec, Rng& rng);

/// Closed-form mean and CDF of the truncated normal, for diagnostics.
double trunc_normal_mean(const TruncNormSpec& spec);
double trunc_normal_cdf(const TruncNormSpec& spec, double x);

/// Draws `count` independent states (v, s, dv in that order per scenario)
/// from one stream seeded with `seed`. Ids run from 0.
ScenarioSet generate_scenarios(const ScenarioSpecs& specs, std::size_t count, std::uint64_t seed);

/// Seed used by worker `worker` when generation is split across workers.
inline std::uint64_t worker_seed(std::uint64_t seed, std::uint64_t worker) { return seed + worker; }

/// CSV with header `id,v,s,dv`, six decimals.
void write_scenarios_csv(const std::filesystem::path& path, const std::vector<Scenario>& scenarios);
std::string scenarios_csv_string(const std::vector<Scenario>& scenarios);
std::vector<Scenario> read_scenarios_csv(const std::filesystem::path& path);

}  // namespace cfdistill
