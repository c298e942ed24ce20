#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cfdistill/mlp.hpp"
#include "cfdistill/rng.hpp"
#include "cfdistill/stability.hpp"
#include "cfdistill/teacher.hpp"

namespace cfdistill {

/// basic: every teacher response is a sample. random: one response per
/// scenario. consist: vote labels. mono: vote labels + monotonicity
/// penalty. full: both penalties.
enum class TrainMode { Basic, Random, Consist, Mono, Full };

std::string to_string(TrainMode m);
TrainMode train_mode_from_string(const std::string& name);

struct TrainingConfig {
  TrainMode mode = TrainMode::Full;
  double theta_mon = 5000.0;
  double theta_str = 0.9;
  std::array<double, 3> delta{0.0, 1.0, 1.0};
  double learning_rate = 1e-3;
  int batch_size = 256;
  int max_epochs = 200;
  int patience = 20;
  int refresh_period = 1;  // epochs between equilibrium refreshes
  std::array<double, 3> split{0.8, 0.1, 0.1};
  std::uint64_t seed = 0;
  // The stability penalty switches on once the probe audit is below this rate.
  double warmup_violation_rate = 0.01;
  std::size_t probe_samples = 2000;
  MlpSpec model;
  EquilibriumSearchConfig equilibrium;

  void validate() const;
  /// Weights after mode gating.
  PenaltyWeights effective_weights() const;
  nlohmann::json to_json() const;
  static TrainingConfig from_json(const nlohmann::json& j, TrainingConfig base);
  static TrainingConfig from_json(const nlohmann::json& j) { return from_json(j, TrainingConfig()); }
};

struct SplitIndices {
  std::vector<std::size_t> train, val, test;
};

/// Shuffled, disjoint, exhaustive split of [0, n). Sizes round to nearest
/// with the remainder going to the last part.
SplitIndices split_indices(std::size_t n, const std::array<double, 3>& fractions, std::uint64_t seed);

template <class T>
struct Splits {
  std::vector<T> train, val, test;
};

template <class T>
Splits<T> split_dataset(std::span<const T> items, const std::array<double, 3>& fractions,
                        std::uint64_t seed) {
  const SplitIndices idx = split_indices(items.size(), fractions, seed);
  Splits<T> out;
  for (auto i : idx.train) out.train.push_back(items[i]);
  for (auto i : idx.val) out.val.push_back(items[i]);
  for (auto i : idx.test) out.test.push_back(items[i]);
  return out;
}

struct TrainingPair {
  CfState state;
  double label = 0.0;
};

/// Turns labeled scenarios into training pairs according to `mode`.
/// Flagged scenarios and invalid responses never produce pairs.
std::vector<TrainingPair> prepare_training_labels(std::span<const LabeledScenario> labeled,
                                                  TrainMode mode, std::uint64_t seed);

/// Vote-label pairs (what validation and test sets use in every mode).
std::vector<TrainingPair> vote_pairs(std::span<const LabeledScenario> labeled);

struct EpochRecord {
  int epoch = 0;
  double mse = 0.0;
  double c_mon = 0.0;
  double c_str = 0.0;
  double total = 0.0;
  double val_mse = 0.0;
  std::size_t n_equilibria = 0;    // set used by the penalty during this epoch
  bool str_active = false;
  std::string str_note;            // why the stability penalty was skipped
  double min_criterion = 0.0;      // after the epoch (NaN when not evaluated)
  bool eligible = true;            // may be selected as the returned checkpoint
};

struct TrainRun {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  double best_val_mse = 0.0;
  std::string stop_reason;
  bool flagged_unstable = false;

  nlohmann::json summary_json() const;
};

struct TrainResult {
  TrainRun run;
  MlpModel model;
};

/// Probe states for the monotonicity warm-up audit.
std::vector<CfState> probe_states(std::size_t count, std::uint64_t seed);

/// Adam on the penalized loss. Stops early when validation MSE of
/// selectable epochs has not improved for `patience` epochs.
TrainResult train(const MlpModel& init, std::span<const TrainingPair> train_set,
                  std::span<const TrainingPair> val_set, const TrainingConfig& cfg);

/// `epoch,mse,c_mon,c_str,total,val_mse,n_equilibria,str_active,min_criterion,eligible`.
void write_epoch_csv(const std::filesystem::path& path, const TrainRun& run);

/// Predicted accelerations over `pairs`.
std::vector<double> predict(const CarFollowingModel& model, std::span<const TrainingPair> pairs);

/// WMAPE of `model` against the pair labels.
double held_out_wmape(const CarFollowingModel& model, std::span<const TrainingPair> pairs);

/// Stable 64-bit FNV-1a hex digest (used for training fingerprints).
std::string fnv1a_hex(std::string_view data);

}  // namespace cfdistill
