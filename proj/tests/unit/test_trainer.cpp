#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "cfdistill/trainer.hpp"

using namespace cfdistill;

namespace {

std::vector<LabeledScenario> oracle_labels(std::size_t n, double halluc, std::uint64_t seed) {
  const auto set = generate_scenarios(default_scenario_specs(), n, seed);
  OracleTeacher teacher(SyntheticOracle(IdmParams{}, 0.0, halluc), seed + 1);
  return label_scenarios(set.scenarios, teacher, 5);
}

TrainingConfig small_config(TrainMode mode) {
  TrainingConfig cfg;
  cfg.mode = mode;
  cfg.model = MlpSpec::with_hidden({8});
  cfg.max_epochs = 4;
  cfg.batch_size = 64;
  cfg.probe_samples = 200;
  cfg.seed = 5;
  return cfg;
}

}  // namespace

TEST(Split, EightyTenTenSizes) {
  const auto idx = split_indices(10000, {0.8, 0.1, 0.1}, 1);
  EXPECT_EQ(idx.train.size(), 8000u);
  EXPECT_EQ(idx.val.size(), 1000u);
  EXPECT_EQ(idx.test.size(), 1000u);
  std::set<std::size_t> all(idx.train.begin(), idx.train.end());
  all.insert(idx.val.begin(), idx.val.end());
  all.insert(idx.test.begin(), idx.test.end());
  EXPECT_EQ(all.size(), 10000u);
  EXPECT_EQ(*all.rbegin(), 9999u);
}

TEST(Split, DeterministicAndSeedSensitive) {
  const auto a = split_indices(500, {0.8, 0.1, 0.1}, 7);
  const auto b = split_indices(500, {0.8, 0.1, 0.1}, 7);
  const auto c = split_indices(500, {0.8, 0.1, 0.1}, 8);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.test, b.test);
  EXPECT_NE(a.train, c.train);
}

TEST(Split, TooSmall) {
  EXPECT_THROW(split_indices(9, {0.8, 0.1, 0.1}, 1), std::invalid_argument);
  const std::vector<int> items{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  const auto s = split_dataset<int>(items, {0.8, 0.1, 0.1}, 1);
  EXPECT_EQ(s.train.size() + s.val.size() + s.test.size(), 10u);
}

TEST(Labels, BasicUsesEveryResponse) {
  const auto labeled = oracle_labels(10000, 0.2, 1);
  EXPECT_EQ(prepare_training_labels(labeled, TrainMode::Basic, 0).size(), 50000u);
}

TEST(Labels, RandomIsDeterministicAndPicksAResponse) {
  const auto labeled = oracle_labels(300, 0.2, 2);
  const auto a = prepare_training_labels(labeled, TrainMode::Random, 9);
  const auto b = prepare_training_labels(labeled, TrainMode::Random, 9);
  ASSERT_EQ(a.size(), labeled.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].label, b[i].label);
    const auto votes = labeled[i].valid_accels();
    EXPECT_NE(std::find(votes.begin(), votes.end(), a[i].label), votes.end());
  }
}

TEST(Labels, ConsistPassesVotesThrough) {
  const auto labeled = oracle_labels(300, 0.2, 3);
  for (TrainMode m : {TrainMode::Consist, TrainMode::Mono, TrainMode::Full}) {
    const auto pairs = prepare_training_labels(labeled, m, 0);
    ASSERT_EQ(pairs.size(), labeled.size());
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      EXPECT_EQ(pairs[i].label, labeled[i].label);
      EXPECT_EQ(pairs[i].state, labeled[i].state);
    }
  }
}

TEST(Config, ModeGating) {
  TrainingConfig cfg;
  cfg.mode = TrainMode::Basic;
  EXPECT_EQ(cfg.effective_weights().theta_mon, 0.0);
  EXPECT_EQ(cfg.effective_weights().theta_str, 0.0);
  cfg.mode = TrainMode::Mono;
  EXPECT_EQ(cfg.effective_weights().theta_mon, 5000.0);
  EXPECT_EQ(cfg.effective_weights().theta_str, 0.0);
  cfg.mode = TrainMode::Full;
  EXPECT_EQ(cfg.effective_weights().theta_str, 0.9);
}

TEST(Config, JsonRoundTripAndValidation) {
  TrainingConfig cfg;
  cfg.theta_str = 0.3;
  cfg.mode = TrainMode::Mono;
  const auto back = TrainingConfig::from_json(cfg.to_json());
  EXPECT_EQ(back.to_json(), cfg.to_json());
  EXPECT_THROW(TrainingConfig::from_json(nlohmann::json{{"learning_rate", -1.0}}),
               std::invalid_argument);
  EXPECT_THROW(train_mode_from_string("fancy"), std::invalid_argument);
}

TEST(Train, UnpenalizedTotalEqualsMse) {
  const auto labeled = oracle_labels(600, 0.0, 4);
  const auto pairs = vote_pairs(labeled);
  const auto sp = split_dataset<TrainingPair>(pairs, {0.8, 0.1, 0.1}, 1);
  auto cfg = small_config(TrainMode::Full);
  cfg.theta_mon = 0.0;
  cfg.theta_str = 0.0;
  const auto r = train(MlpModel::initialize(cfg.model, 1), sp.train, sp.val, cfg);
  ASSERT_EQ(r.run.epochs.size(), 4u);
  for (const auto& e : r.run.epochs) EXPECT_EQ(e.total, e.mse);
}

TEST(Train, LossAccountingAndReproducibility) {
  const auto labeled = oracle_labels(600, 0.0, 5);
  const auto pairs = vote_pairs(labeled);
  const auto sp = split_dataset<TrainingPair>(pairs, {0.8, 0.1, 0.1}, 1);
  auto cfg = small_config(TrainMode::Full);
  cfg.warmup_violation_rate = 1.0;  // stability penalty from the first epoch
  const auto init = MlpModel::initialize(cfg.model, 2);
  const auto a = train(init, sp.train, sp.val, cfg);
  const auto b = train(init, sp.train, sp.val, cfg);
  ASSERT_EQ(a.run.epochs.size(), b.run.epochs.size());
  for (std::size_t i = 0; i < a.run.epochs.size(); ++i) {
    const auto& e = a.run.epochs[i];
    const double recomposed = e.mse + cfg.theta_mon * e.c_mon + cfg.theta_str * e.c_str;
    EXPECT_NEAR(e.total, recomposed, 1e-10 * std::max(1.0, std::abs(e.total)));
    EXPECT_EQ(e.total, b.run.epochs[i].total);
    EXPECT_EQ(e.val_mse, b.run.epochs[i].val_mse);
  }
  EXPECT_EQ(a.model.parameters(), b.model.parameters());
  EXPECT_EQ(a.model.training_fingerprint(), b.model.training_fingerprint());
}

TEST(Train, EpochCsv) {
  const auto labeled = oracle_labels(300, 0.0, 6);
  const auto pairs = vote_pairs(labeled);
  const auto sp = split_dataset<TrainingPair>(pairs, {0.8, 0.1, 0.1}, 1);
  auto cfg = small_config(TrainMode::Consist);
  cfg.max_epochs = 3;
  const auto r = train(MlpModel::initialize(cfg.model, 1), sp.train, sp.val, cfg);
  const auto path = std::filesystem::temp_directory_path() / "cfdistill_test_epochs.csv";
  write_epoch_csv(path, r.run);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "epoch,mse,c_mon,c_str,total,val_mse,n_equilibria,str_active,min_criterion,eligible");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 3);
  std::filesystem::remove(path);
  EXPECT_FALSE(r.run.flagged_unstable);
  EXPECT_GE(r.run.best_epoch, 1);
}

TEST(Train, ConsistFitImproves) {
  const auto labeled = oracle_labels(2000, 0.0, 7);
  const auto pairs = vote_pairs(labeled);
  const auto sp = split_dataset<TrainingPair>(pairs, {0.8, 0.1, 0.1}, 1);
  auto cfg = small_config(TrainMode::Consist);
  cfg.model = MlpSpec::with_hidden({32, 32});
  cfg.max_epochs = 30;
  const auto init = MlpModel::initialize(cfg.model, 3);
  const double before = held_out_wmape(init, sp.test);
  const auto r = train(init, sp.train, sp.val, cfg);
  const double after = held_out_wmape(r.model, sp.test);
  EXPECT_LT(after, 0.5 * before);
  EXPECT_LT(r.run.epochs.back().val_mse, r.run.epochs.front().val_mse);
}

TEST(Train, RejectsEmptySets) {
  const auto cfg = small_config(TrainMode::Consist);
  const std::vector<TrainingPair> none;
  const std::vector<TrainingPair> one{{CfState{10, 20, 0}, 0.1}};
  EXPECT_THROW(train(MlpModel::initialize(cfg.model, 1), none, one, cfg), std::invalid_argument);
}

TEST(Fingerprint, StableHash) {
  // FNV-1a 64 of the empty string and of "a".
  EXPECT_EQ(fnv1a_hex(""), "cbf29ce484222325");
  EXPECT_EQ(fnv1a_hex("a"), "af63dc4c8601ec8c");
}
