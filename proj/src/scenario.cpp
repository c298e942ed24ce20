#include "cfdistill/scenario.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "cfdistill/csv.hpp"

namespace cfdistill {

void TruncNormSpec::validate(const std::string& field) const {
  if (!std::isfinite(mean)) throw std::invalid_argument(field + ".mean must be finite");
  if (!std::isfinite(std) || std <= 0.0) throw std::invalid_argument(field + ".std must be > 0");
  if (!std::isfinite(min) || !std::isfinite(max) || !(min < max)) {
    throw std::invalid_argument(field + ": min must be < max");
  }
}

void ScenarioSpecs::validate() const {
  v.validate("specs.v");
  s.validate("specs.s");
  dv.validate("specs.dv");
  if (v.min < 0.0) throw std::invalid_argument("specs.v: min must be >= 0 (speed)");
  if (s.min <= 0.0) throw std::invalid_argument("specs.s: min must be > 0 (spacing)");
}

double sample_trunc_normal(const TruncNormSpec& spec, Rng& rng) {
  for (;;) {
    const double x = rng.normal(spec.mean, spec.std);
    if (x >= spec.min && x <= spec.max) return x;
  }
}

namespace {

double std_normal_pdf(double z) { return std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi); }
double std_normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

}  // namespace

double trunc_normal_mean(const TruncNormSpec& spec) {
  const double alpha = (spec.min - spec.mean) / spec.std;
  const double beta = (spec.max - spec.mean) / spec.std;
  const double z = std_normal_cdf(beta) - std_normal_cdf(alpha);
  return spec.mean + spec.std * (std_normal_pdf(alpha) - std_normal_pdf(beta)) / z;
}

double trunc_normal_cdf(const TruncNormSpec& spec, double x) {
  if (x <= spec.min) return 0.0;
  if (x >= spec.max) return 1.0;
  const double lo = std_normal_cdf((spec.min - spec.mean) / spec.std);
  const double hi = std_normal_cdf((spec.max - spec.mean) / spec.std);
  return (std_normal_cdf((x - spec.mean) / spec.std) - lo) / (hi - lo);
}

ScenarioSet generate_scenarios(const ScenarioSpecs& specs, std::size_t count, std::uint64_t seed) {
  specs.validate();
  if (count == 0) throw std::invalid_argument("generate_scenarios: count must be > 0");
  ScenarioSet set;
  set.seed = seed;
  set.specs = specs;
  set.scenarios.reserve(count);
  Rng rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    Scenario sc;
    sc.id = static_cast<std::int64_t>(i);
    sc.state.v = sample_trunc_normal(specs.v, rng);
    sc.state.s = sample_trunc_normal(specs.s, rng);
    sc.state.dv = sample_trunc_normal(specs.dv, rng);
    set.scenarios.push_back(sc);
  }
  return set;
}

std::string scenarios_csv_string(const std::vector<Scenario>& scenarios) {
  std::string out = "id,v,s,dv\n";
  char line[128];
  for (const auto& sc : scenarios) {
    std::snprintf(line, sizeof line, "%lld,%.6f,%.6f,%.6f\n", static_cast<long long>(sc.id),
                  sc.state.v, sc.state.s, sc.state.dv);
    out += line;
  }
  return out;
}

void write_scenarios_csv(const std::filesystem::path& path, const std::vector<Scenario>& scenarios) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << scenarios_csv_string(scenarios);
}

std::vector<Scenario> read_scenarios_csv(const std::filesystem::path& path) {
  const CsvTable table = read_csv(path);
  const std::size_t c_id = table.column("id");
  const std::size_t c_v = table.column("v");
  const std::size_t c_s = table.column("s");
  const std::size_t c_dv = table.column("dv");
  std::vector<Scenario> out;
  out.reserve(table.rows.size());
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    Scenario sc;
    sc.id = static_cast<std::int64_t>(parse_double(row.at(c_id), "id"));
    sc.state = {parse_double(row.at(c_v), "v"), parse_double(row.at(c_s), "s"),
                parse_double(row.at(c_dv), "dv")};
    validate_state(sc.state);
    out.push_back(sc);
  }
  return out;
}

}  // namespace cfdistill

namespace cfdistill {

namespace {

nlohmann::json spec_json(const TruncNormSpec& s) {
  return {{"mean", s.mean}, {"std", s.std}, {"min", s.min}, {"max", s.max}};
}

TruncNormSpec spec_from(const nlohmann::json& j, TruncNormSpec base) {
  base.mean = j.value("mean", base.mean);
  base.std = j.value("std", base.std);
  base.min = j.value("min", base.min);
  base.max = j.value("max", base.max);
  return base;
}

}  // namespace

nlohmann::json specs_to_json(const ScenarioSpecs& specs) {
  return {{"v", spec_json(specs.v)}, {"s", spec_json(specs.s)}, {"dv", spec_json(specs.dv)}};
}

ScenarioSpecs specs_from_json(const nlohmann::json& j, ScenarioSpecs base) {
  if (j.contains("v")) base.v = spec_from(j.at("v"), base.v);
  if (j.contains("s")) base.s = spec_from(j.at("s"), base.s);
  if (j.contains("dv")) base.dv = spec_from(j.at("dv"), base.dv);
  base.validate();
  return base;
}

}  // namespace cfdistill
