#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cfdistill/cf_core.hpp"
#include "cfdistill/csv.hpp"
#include "cfdistill/traffic_sim.hpp"

namespace cfdistill {

/// Maps a raw trajectory CSV onto the fields extraction needs.
struct TrajectorySchema {
  std::string vehicle_id = "vehicle_id";
  std::string time = "time";  // seconds, or a frame number when time_is_frame
  std::string position = "position";
  std::string speed = "speed";
  std::string lane = "lane";
  std::string leader_id = "leader_id";
  std::string vehicle_class = "vehicle_class";
  std::string length = "length";
  bool time_is_frame = false;
  double dt = 0.1;
  double unit_scale = 1.0;  // multiplies position, speed and length (0.3048 for feet)
  std::vector<std::string> automobile_classes{"car", "automobile", "2"};
  std::vector<std::string> no_leader_values{"", "0", "-1"};

  void validate() const;
  /// Throws naming the first mapped column missing from `header`.
  void check_header(const std::vector<std::string>& header) const;
  nlohmann::json to_json() const;
  static TrajectorySchema from_json(const nlohmann::json& j);
};

struct CfPair {
  std::string dataset;
  std::string follower_id;
  std::string leader_id;
  std::string lane;
  double start_time = 0.0;
  double duration = 0.0;  // (samples - 1) * dt
  Trajectory traj;
};

inline constexpr double kMinPairDuration = 30.0;

struct ExtractionStats {
  std::size_t rows = 0;
  std::size_t malformed_rows = 0;
  std::size_t segments = 0;
  std::size_t too_short = 0;
  std::size_t non_automobile = 0;
  std::size_t bad_spacing = 0;
  std::size_t kept = 0;
  std::vector<std::string> warnings;  // first few malformed-row messages
};

struct ExtractionResult {
  std::vector<CfPair> pairs;
  ExtractionStats stats;
};

/// Maximal segments where the follower keeps the same leader and lane on
/// consecutive frames, both vehicles are automobiles, and the segment spans
/// at least kMinPairDuration. Malformed rows are skipped and counted.
ExtractionResult extract_pairs(const CsvTable& table, const TrajectorySchema& schema,
                               const std::string& dataset);

/// True when `pair` satisfies every extraction filter.
bool pair_satisfies_filters(const CfPair& pair, const TrajectorySchema& schema);

struct PairSplits {
  std::vector<CfPair> train, val, test;
};

/// 60/20/20 split at the pair level.
PairSplits split_pairs(std::span<const CfPair> pairs, std::uint64_t seed);

struct IdmBounds {
  IdmParams lo{10.0, 0.5, 0.5, 0.1, 0.1};
  IdmParams hi{45.0, 3.0, 6.0, 4.0, 5.0};

  void validate() const;
  IdmParams clip(const IdmParams& p) const;
};

/// Real-coded evolutionary search: tournament selection, blend (BLX-alpha)
/// crossover, Gaussian mutation whose width decays geometrically from
/// mutation_scale to mutation_scale * mutation_final_ratio, and elitism.
struct EvolutionConfig {
  int population = 50;
  int generations = 100;
  int tournament = 3;
  int elites = 2;
  double crossover_alpha = 0.3;
  double mutation_prob = 0.5;     // per gene
  double mutation_scale = 0.1;    // initial std as a fraction of the bound width
  double mutation_final_ratio = 0.01;
  std::uint64_t seed = 0;

  void validate() const;
};

struct ReplayScore {
  double rmse = 0.0;
  std::size_t collisions = 0;
};

/// Pooled spacing RMSE of `model` replayed over `pairs`.
ReplayScore replay_score(const CarFollowingModel& model, std::span<const CfPair> pairs);

struct CalibrationResult {
  IdmParams params;
  ReplayScore score;
  std::vector<double> best_rmse_per_generation;
};

/// Minimizes (collisions, RMSE) lexicographically over the bounds.
CalibrationResult calibrate_idm(std::span<const CfPair> pairs, const IdmBounds& bounds,
                                const EvolutionConfig& cfg);

/// sum_d (rmse_d / idm_star_d) / sum_d (1 / idm_star_d).
double aggregate_errors(const std::map<std::string, double>& rmse,
                        const std::map<std::string, double>& idm_star);

struct LeaderboardRow {
  std::string model;
  std::map<std::string, double> rmse;
  std::map<std::string, std::size_t> collisions;
  double aggregate = 0.0;
};

struct NamedModel {
  std::string name;
  const CarFollowingModel* model = nullptr;
};

struct EvalDataset {
  std::string name;
  std::vector<CfPair> test;
};

/// Every model on every dataset's test pairs, sorted by aggregate error.
std::vector<LeaderboardRow> cross_evaluate(std::span<const NamedModel> models,
                                           std::span<const EvalDataset> datasets,
                                           const std::map<std::string, double>& idm_star);

/// Leaderboard from precomputed per-dataset errors (no simulation).
std::vector<LeaderboardRow> leaderboard_from_errors(
    const std::map<std::string, std::map<std::string, double>>& errors,
    const std::map<std::string, double>& idm_star);

/// `model,dataset,rmse,collisions,aggregate`.
void write_leaderboard_csv(const std::filesystem::path& path, const std::vector<LeaderboardRow>& rows);
nlohmann::json leaderboard_json(const std::vector<LeaderboardRow>& rows);

struct SyntheticDatasetConfig {
  IdmParams follower;
  std::size_t pairs = 12;
  double duration = 40.0;  // s per pair
  double dt = 0.1;
  double leader_speed = 15.0;
  std::uint64_t seed = 0;
};

/// IDM-driven raw table in the default schema: each pair has a leader with
/// a smooth random speed profile and an IDM follower starting near
/// equilibrium.
CsvTable generate_synthetic_dataset(const SyntheticDatasetConfig& cfg);

}  // namespace cfdistill
