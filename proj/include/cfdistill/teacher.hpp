#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cfdistill/cf_core.hpp"
#include "cfdistill/rng.hpp"
#include "cfdistill/scenario.hpp"

namespace cfdistill {

struct PromptBundle {
  std::string system_message;
  std::string user_message;

  friend bool operator==(const PromptBundle&, const PromptBundle&) = default;
};

/// System message with Background/Objective/Guidelines/Instructions/Format
/// sections and a chain-of-thought user message carrying the state values
/// to two decimals.
PromptBundle build_prompt(const CfState& state);

/// Extracts the last `Final acceleration: <number> m/s^2` occurrence.
/// Returns nullopt if there is none or the number is not finite.
std::optional<double> parse_acceleration(std::string_view raw_text);

struct TeacherResponse {
  std::string raw_text;
  std::optional<double> parsed_accel;
  bool valid = false;          // parsed and within [kAccelMin, kAccelMax]
  std::string transport_error;  // non-empty when the request itself failed

  /// Builds a response from generated text, parsing and validating it.
  static TeacherResponse from_text(std::string text);
  static TeacherResponse from_transport_error(std::string message);
};

class NoValidVotesError : public Error {
 public:
  using Error::Error;
};

struct VoteResult {
  double label = 0.0;
  int vote_count = 0;
};

/// Vote bin width in m/s^2.
inline constexpr double kVoteResolution = 0.1;

/// Plurality vote over 0.1 m/s^2 bins. The winner's label is the median of
/// its members. When several bins share the top count the vote is
/// ambiguous, and the bin whose median is nearest the median of all votes
/// wins instead (then the smaller |a|).
VoteResult majority_vote(std::span<const double> accels);

/// IDM-backed stand-in teacher with Gaussian noise and random
/// "hallucinations" drawn from {-5, -4, 4, 5}.
class SyntheticOracle {
 public:
  SyntheticOracle(IdmParams params, double noise_std, double hallucination_prob);

  double clean(const CfState& state) const;
  double sample(const CfState& state, Rng& rng) const;

  const IdmParams& params() const noexcept { return params_; }
  double noise_std() const noexcept { return noise_std_; }
  double hallucination_prob() const noexcept { return hallucination_prob_; }

 private:
  IdmParams params_;
  double noise_std_;
  double hallucination_prob_;
};

/// Source of K responses per scenario.
class Teacher {
 public:
  virtual ~Teacher() = default;

  /// Returns, for every scenario, exactly `k` responses (failures included).
  virtual std::vector<std::vector<TeacherResponse>> ask_all(std::span<const Scenario> scenarios,
                                                            int k) = 0;
};

/// Offline teacher around SyntheticOracle. Each scenario draws from its own
/// stream derive_seed(seed, id), so results do not depend on query order.
class OracleTeacher final : public Teacher {
 public:
  OracleTeacher(SyntheticOracle oracle, std::uint64_t seed);

  std::vector<std::vector<TeacherResponse>> ask_all(std::span<const Scenario> scenarios,
                                                    int k) override;

  /// Text an LLM-like teacher would produce for `accel`.
  static std::string render_response(const CfState& state, double accel);

 private:
  SyntheticOracle oracle_;
  std::uint64_t seed_;
};

struct LabeledScenario {
  std::int64_t id = 0;
  CfState state;
  std::vector<TeacherResponse> responses;
  double label = 0.0;
  int vote_count = 0;
  bool flagged = false;  // no valid vote; excluded from training output

  /// Parsed accelerations of the valid responses, in response order.
  std::vector<double> valid_accels() const;
};

/// Queries `teacher` for K responses per scenario and aggregates by vote.
/// With `requeue`, scenarios left without a valid vote get one more pass.
std::vector<LabeledScenario> label_scenarios(std::span<const Scenario> scenarios, Teacher& teacher,
                                             int k, bool requeue = false);

struct LabelFiles {
  std::filesystem::path labels;    // JSON lines, one labeled scenario each
  std::filesystem::path raw;       // JSON lines {id, k, text, error}
  std::filesystem::path flagged;   // scenarios without any valid vote
};

LabelFiles label_files_in(const std::filesystem::path& dir);

/// Persists labels, flagged scenarios and all raw text.
void write_label_files(const LabelFiles& files, const std::vector<LabeledScenario>& labeled);

/// Reads the labels file. Raw text is attached when the raw file exists.
std::vector<LabeledScenario> read_labels_jsonl(const std::filesystem::path& labels_path,
                                               const std::filesystem::path& raw_path = {});

}  // namespace cfdistill
