#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include <gtest/gtest.h>

#include "cfdistill/scenario.hpp"

using namespace cfdistill;

namespace {

// Midpoint-rule mean of the truncated normal density.
double integrated_mean(const TruncNormSpec& spec) {
  const int n = 200000;
  const double h = (spec.max - spec.min) / n;
  double num = 0.0, den = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = spec.min + (i + 0.5) * h;
    const double z = (x - spec.mean) / spec.std;
    const double w = std::exp(-0.5 * z * z);
    num += w * x;
    den += w;
  }
  return num / den;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("cfdistill_test_" + name);
}

}  // namespace

TEST(TruncNormal, DrawsStayInBounds) {
  const TruncNormSpec spec{0.0, 2.0, -5.0, 5.0};
  Rng rng(1);
  double sum = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double x = sample_trunc_normal(spec, rng);
    ASSERT_GE(x, -5.0);
    ASSERT_LE(x, 5.0);
    sum += x;
  }
  EXPECT_NEAR(sum / n, 0.0, 0.05);
}

TEST(TruncNormal, SpeedMeanMatchesIntegration) {
  const TruncNormSpec spec{15.0, 15.0, 0.0, 40.0};
  const double oracle = integrated_mean(spec);
  EXPECT_NEAR(trunc_normal_mean(spec), oracle, 1e-6);
  Rng rng(2);
  double sum = 0.0;
  const int n = 1000000;
  for (int i = 0; i < n; ++i) sum += sample_trunc_normal(spec, rng);
  EXPECT_NEAR(sum / n, oracle, 0.1);
}

TEST(TruncNormal, KolmogorovSmirnov) {
  const ScenarioSpecs specs;
  for (const TruncNormSpec& spec : {specs.v, specs.s, specs.dv}) {
    Rng rng(77);
    std::vector<double> xs(100000);
    for (auto& x : xs) x = sample_trunc_normal(spec, rng);
    std::sort(xs.begin(), xs.end());
    double d = 0.0;
    const double n = static_cast<double>(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const double f = trunc_normal_cdf(spec, xs[i]);
      d = std::max({d, std::abs(f - i / n), std::abs((i + 1) / n - f)});
    }
    EXPECT_LT(d, 0.01);
  }
}

TEST(TruncNormal, CdfEndpoints) {
  const TruncNormSpec spec{15.0, 15.0, 0.1, 100.0};
  EXPECT_NEAR(trunc_normal_cdf(spec, 0.1), 0.0, 1e-12);
  EXPECT_NEAR(trunc_normal_cdf(spec, 100.0), 1.0, 1e-12);
}

TEST(Specs, ValidationNamesField) {
  ScenarioSpecs specs;
  specs.s.min = 50;
  specs.s.max = 10;
  try {
    specs.validate();
    FAIL() << "expected invalid_argument";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("s"), std::string::npos);
  }
  TruncNormSpec bad{0.0, -1.0, 0.0, 1.0};
  EXPECT_THROW(bad.validate("dv"), std::invalid_argument);
}

TEST(Specs, JsonRoundTrip) {
  ScenarioSpecs specs;
  specs.dv.std = 3.0;
  const ScenarioSpecs back = specs_from_json(specs_to_json(specs), ScenarioSpecs{});
  EXPECT_EQ(back.dv.std, 3.0);
  EXPECT_EQ(back.v.max, 40.0);
}

TEST(Generate, DefaultCountWithinBounds) {
  const auto set = generate_scenarios(default_scenario_specs(), 10000, 42);
  ASSERT_EQ(set.scenarios.size(), 10000u);
  for (std::size_t i = 0; i < set.scenarios.size(); ++i) {
    const auto& st = set.scenarios[i].state;
    EXPECT_EQ(set.scenarios[i].id, static_cast<std::int64_t>(i));
    ASSERT_TRUE(st.v >= 0 && st.v <= 40);
    ASSERT_TRUE(st.s >= 0.1 && st.s <= 100);
    ASSERT_TRUE(st.dv >= -5 && st.dv <= 5);
  }
}

TEST(Generate, SpacingNeverBelowMinimum) {
  const auto set = generate_scenarios(default_scenario_specs(), 100000, 9);
  for (const auto& sc : set.scenarios) ASSERT_GE(sc.state.s, 0.1);
}

TEST(Generate, Deterministic) {
  const auto a = generate_scenarios(default_scenario_specs(), 1, 42);
  const auto b = generate_scenarios(default_scenario_specs(), 1, 42);
  EXPECT_EQ(a.scenarios[0].state, b.scenarios[0].state);
  const auto c = generate_scenarios(default_scenario_specs(), 500, 3);
  const auto d = generate_scenarios(default_scenario_specs(), 500, 3);
  EXPECT_EQ(scenarios_csv_string(c.scenarios), scenarios_csv_string(d.scenarios));
  const auto e = generate_scenarios(default_scenario_specs(), 500, 4);
  EXPECT_NE(scenarios_csv_string(c.scenarios), scenarios_csv_string(e.scenarios));
}

TEST(Generate, ZeroCountRejected) {
  EXPECT_THROW(generate_scenarios(default_scenario_specs(), 0, 1), std::invalid_argument);
}

TEST(ScenarioCsv, RoundTripAtSixDecimals) {
  const auto set = generate_scenarios(default_scenario_specs(), 50, 5);
  const auto path = temp_file("scenarios.csv");
  write_scenarios_csv(path, set.scenarios);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "id,v,s,dv");
  const auto back = read_scenarios_csv(path);
  ASSERT_EQ(back.size(), set.scenarios.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].id, set.scenarios[i].id);
    EXPECT_NEAR(back[i].state.v, set.scenarios[i].state.v, 5e-7);
    EXPECT_NEAR(back[i].state.s, set.scenarios[i].state.s, 5e-7);
    EXPECT_NEAR(back[i].state.dv, set.scenarios[i].state.dv, 5e-7);
  }
  std::filesystem::remove(path);
}
