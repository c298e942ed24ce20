#include <cmath>
#include <set>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "cfdistill/data_eval.hpp"

using namespace cfdistill;

namespace {

const std::vector<std::string> kHeader{"vehicle_id", "time", "position", "speed",
                                       "lane",       "leader_id", "vehicle_class", "length"};

std::string num(double x) { return format_double(x); }

// Leader 1 ahead of follower 2, both at 10 m/s, `frames` samples at 0.1 s.
// The follower switches to lane 2 from frame `lane_change` on.
CsvTable pair_table(int frames, int lane_change = -1, const std::string& follower_class = "car") {
  CsvTable t;
  t.header = kHeader;
  for (int k = 0; k < frames; ++k) {
    const double time = k * 0.1;
    t.rows.push_back({"1", num(time), num(50.0 + 10.0 * time), "10", "1", "0", "car", "4.5"});
    const std::string lane = (lane_change >= 0 && k >= lane_change) ? "2" : "1";
    t.rows.push_back({"2", num(time), num(20.0 + 10.0 * time), "10", lane, "1", follower_class, "4.5"});
  }
  return t;
}

std::vector<CfPair> synthetic_pairs(const IdmParams& p, std::size_t n, std::uint64_t seed) {
  SyntheticDatasetConfig cfg;
  cfg.follower = p;
  cfg.pairs = n;
  cfg.seed = seed;
  const auto table = generate_synthetic_dataset(cfg);
  return extract_pairs(table, TrajectorySchema{}, "synthetic").pairs;
}

}  // namespace

TEST(Extract, CleanPairKept) {
  const auto r = extract_pairs(pair_table(301), TrajectorySchema{}, "d");
  ASSERT_EQ(r.pairs.size(), 1u);
  const auto& p = r.pairs[0];
  EXPECT_EQ(p.follower_id, "2");
  EXPECT_EQ(p.leader_id, "1");
  EXPECT_NEAR(p.duration, 30.0, 1e-9);
  EXPECT_NEAR(p.traj.recorded_spacing(0), 50.0 - 20.0 - 4.5, 1e-12);
  EXPECT_TRUE(pair_satisfies_filters(p, TrajectorySchema{}));
}

TEST(Extract, JustUnderThirtySecondsExcluded) {
  const auto r = extract_pairs(pair_table(300), TrajectorySchema{}, "d");
  EXPECT_TRUE(r.pairs.empty());
  EXPECT_EQ(r.stats.too_short, 1u);
}

TEST(Extract, LaneChangeSplitsSegment) {
  // 350 frames in lane 1 (34.9 s) then 151 frames in lane 2 (15 s).
  const auto r = extract_pairs(pair_table(501, 350), TrajectorySchema{}, "d");
  ASSERT_EQ(r.pairs.size(), 1u);
  EXPECT_EQ(r.pairs[0].lane, "1");
  EXPECT_NEAR(r.pairs[0].duration, 34.9, 1e-9);
  EXPECT_EQ(r.stats.segments, 2u);
  EXPECT_EQ(r.stats.too_short, 1u);
}

TEST(Extract, TruckFollowerExcluded) {
  const auto r = extract_pairs(pair_table(400, -1, "truck"), TrajectorySchema{}, "d");
  EXPECT_TRUE(r.pairs.empty());
  EXPECT_EQ(r.stats.non_automobile, 1u);
}

TEST(Extract, MalformedRowsSkippedAndCounted) {
  auto t = pair_table(301);
  t.rows.push_back({"2", "oops", "1", "1", "1", "1", "car", "4.5"});
  t.rows.push_back({"3", "1.0"});
  const auto r = extract_pairs(t, TrajectorySchema{}, "d");
  EXPECT_EQ(r.stats.malformed_rows, 2u);
  EXPECT_EQ(r.pairs.size(), 1u);
  EXPECT_FALSE(r.stats.warnings.empty());
}

TEST(Extract, SchemaMismatchNamesColumn) {
  auto t = pair_table(10);
  t.header[2] = "pos";
  try {
    extract_pairs(t, TrajectorySchema{}, "d");
    FAIL() << "expected an error";
  } catch (const std::exception& e) {
    EXPECT_NE(std::string(e.what()).find("position"), std::string::npos);
  }
}

TEST(Extract, FrameTimesAndUnitScale) {
  auto t = pair_table(301);
  for (auto& row : t.rows) row[1] = num(std::round(parse_double(row[1]) * 10.0));
  TrajectorySchema s;
  s.time_is_frame = true;
  s.unit_scale = 0.5;
  const auto r = extract_pairs(t, s, "d");
  ASSERT_EQ(r.pairs.size(), 1u);
  EXPECT_NEAR(r.pairs[0].traj.recorded_spacing(0), 0.5 * 25.5, 1e-12);
  const auto back = TrajectorySchema::from_json(s.to_json());
  EXPECT_TRUE(back.time_is_frame);
  EXPECT_EQ(back.unit_scale, 0.5);
}

TEST(Extract, SyntheticDatasetPairsAllPassFilters) {
  const auto pairs = synthetic_pairs(IdmParams{}, 10, 3);
  ASSERT_EQ(pairs.size(), 10u);
  for (const auto& p : pairs) EXPECT_TRUE(pair_satisfies_filters(p, TrajectorySchema{}));
}

TEST(SplitPairs, DisjointAndDeterministic) {
  const auto pairs = synthetic_pairs(IdmParams{}, 20, 4);
  const auto a = split_pairs(pairs, 1);
  const auto b = split_pairs(pairs, 1);
  EXPECT_EQ(a.train.size(), 12u);
  EXPECT_EQ(a.val.size(), 4u);
  EXPECT_EQ(a.test.size(), 4u);
  std::set<std::string> seen;
  for (const auto* part : {&a.train, &a.val, &a.test}) {
    for (const auto& p : *part) EXPECT_TRUE(seen.insert(p.follower_id).second);
  }
  for (std::size_t i = 0; i < a.train.size(); ++i) EXPECT_EQ(a.train[i].follower_id, b.train[i].follower_id);
}

TEST(Replay, TrueIdmReproducesSyntheticData) {
  const IdmParams p{28, 1.3, 2.5, 1.2, 1.8};
  const auto pairs = synthetic_pairs(p, 6, 5);
  const auto score = replay_score(IdmModel(p), pairs);
  EXPECT_LT(score.rmse, 1e-9);
  EXPECT_EQ(score.collisions, 0u);
}

TEST(Calibrate, SelfRecovery) {
  const IdmParams truth{28, 1.3, 2.5, 1.2, 1.8};
  const auto pairs = synthetic_pairs(truth, 12, 9);
  EvolutionConfig evo;
  evo.seed = 9;
  const auto r = calibrate_idm(pairs, IdmBounds{}, evo);
  EXPECT_LT(r.score.rmse, 0.05);
  EXPECT_EQ(r.best_rmse_per_generation.size(), 101u);
  for (std::size_t g = 1; g < r.best_rmse_per_generation.size(); ++g) {
    EXPECT_LE(r.best_rmse_per_generation[g], r.best_rmse_per_generation[g - 1] + 1e-12);
  }
}

TEST(Calibrate, DeterministicAndWithinBounds) {
  const auto pairs = synthetic_pairs(IdmParams{}, 4, 2);
  EvolutionConfig evo;
  evo.population = 12;
  evo.generations = 8;
  evo.seed = 4;
  IdmBounds bounds;
  bounds.hi.v0 = 25.0;  // excludes the generating v0 = 30
  const auto a = calibrate_idm(pairs, bounds, evo);
  const auto b = calibrate_idm(pairs, bounds, evo);
  EXPECT_EQ(a.params, b.params);
  EXPECT_EQ(a.score.rmse, b.score.rmse);
  EXPECT_LE(a.params.v0, 25.0);
  const IdmParams clipped = bounds.clip(a.params);
  EXPECT_EQ(clipped, a.params);
}

TEST(Bounds, Clip) {
  const IdmBounds b;
  const auto c = b.clip({100, 0.1, 3, 1, 9});
  EXPECT_EQ(c.v0, 45.0);
  EXPECT_EQ(c.T, 0.5);
  EXPECT_EQ(c.s0, 3.0);
  EXPECT_EQ(c.b, 5.0);
}

TEST(Aggregate, TableAnchors) {
  const std::map<std::string, double> star{{"a", 4.769}, {"b", 6.987}, {"c", 4.715}};
  const std::map<std::string, double> idm{{"a", 4.769}, {"b", 7.972}, {"c", 6.466}};
  EXPECT_NEAR(aggregate_errors(star, star), 5.311, 1e-3);
  EXPECT_NEAR(aggregate_errors(idm, star), 6.218, 1e-3);
  const std::map<std::string, double> flat{{"a", 2.5}, {"b", 2.5}, {"c", 2.5}};
  EXPECT_NEAR(aggregate_errors(flat, star), 2.5, 1e-12);
}

TEST(Aggregate, KeyMismatch) {
  const std::map<std::string, double> star{{"a", 1.0}, {"b", 2.0}};
  const std::map<std::string, double> other{{"a", 1.0}, {"x", 2.0}};
  EXPECT_THROW(aggregate_errors(other, star), std::invalid_argument);
}

TEST(Leaderboard, SingleCellAndCounts) {
  const auto pairs = synthetic_pairs(IdmParams{}, 3, 6);
  const IdmModel idm(IdmParams{30, 1.0, 2, 1, 1.5});
  const std::vector<NamedModel> models{{"idm", &idm}};
  const std::vector<EvalDataset> data{{"only", pairs}};
  const auto rows = cross_evaluate(models, data, {{"only", 1.0}});
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_NEAR(rows[0].aggregate, rows[0].rmse.at("only"), 1e-12);
  EXPECT_GE(rows[0].collisions.at("only"), 0u);
}

TEST(Leaderboard, FromErrorsSortedByAggregate) {
  const std::map<std::string, double> star{{"HighD", 4.769}, {"NGSIM", 6.987}, {"Other", 4.715}};
  const auto rows = leaderboard_from_errors(
      {{"IDM", {{"HighD", 4.769}, {"NGSIM", 7.972}, {"Other", 6.466}}}, {"IDM*", star}}, star);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].model, "IDM*");
  EXPECT_NEAR(rows[0].aggregate, 5.311, 1e-3);
  EXPECT_NEAR(rows[1].aggregate, 6.218, 1e-3);
}
