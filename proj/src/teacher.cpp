#include "cfdistill/teacher.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <regex>

#include <json.hpp>

#include "cfdistill/csv.hpp"

namespace cfdistill {

namespace {

constexpr const char* kSystemMessage =
    "Background:\n"
    "You are an experienced human driver on a single-lane road, following the vehicle directly "
    "ahead of you. At every moment you observe your own speed, the bumper-to-bumper gap to the "
    "leading vehicle, and the relative speed, defined as your speed minus the leader's speed "
    "(a positive value means you are closing in).\n"
    "\n"
    "Objective:\n"
    "Decide the longitudinal acceleration you would apply right now, the way a typical, "
    "attentive human driver would.\n"
    "\n"
    "Guidelines:\n"
    "1. Safety first: keep a safe gap and never let the situation develop into a collision.\n"
    "2. Keep the acceleration physically plausible: it must lie between -5.0 m/s^2 and "
    "5.0 m/s^2.\n"
    "\n"
    "Instructions:\n"
    "Think step by step. First describe the situation, then assess how safe the current gap is "
    "given both speeds, then reason about what a human driver would do, and only then choose "
    "the acceleration.\n"
    "\n"
    "Format:\n"
    "Write your reasoning, then finish with exactly one line of the form\n"
    "Final acceleration: <value> m/s^2\n"
    "where <value> is a single decimal number (negative for braking).";

}  // namespace

PromptBundle build_prompt(const CfState& state) {
  validate_state(state);
  char user[512];
  std::snprintf(user, sizeof user,
                "Current situation:\n"
                "- Your speed: %.2f m/s\n"
                "- Gap to the leading vehicle: %.2f m\n"
                "- Relative speed (your speed minus the leader's): %.2f m/s\n"
                "Let's think step by step about what acceleration you would apply.",
                state.v, state.s, state.dv);
  return {kSystemMessage, user};
}

std::optional<double> parse_acceleration(std::string_view raw_text) {
  std::string text(raw_text);
  // Normalize the Unicode minus sign (U+2212) to ASCII.
  for (std::size_t pos; (pos = text.find("\xE2\x88\x92")) != std::string::npos;) {
    text.replace(pos, 3, "-");
  }
  static const std::regex pattern(
      R"(final\s+acceleration\s*\**\s*[:=]\s*\**\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*\**\s*m\s*/\s*s(?:\s*\^\s*2|\xC2\xB2|2))",
      std::regex::icase | std::regex::ECMAScript);
  std::optional<double> last;
  for (auto it = std::sregex_iterator(text.begin(), text.end(), pattern);
       it != std::sregex_iterator(); ++it) {
    try {
      const double value = parse_double((*it)[1].str(), "acceleration");
      last = std::isfinite(value) ? std::optional<double>(value) : std::nullopt;
    } catch (const std::invalid_argument&) {
      last.reset();
    }
  }
  return last;
}

TeacherResponse TeacherResponse::from_text(std::string text) {
  TeacherResponse r;
  r.parsed_accel = parse_acceleration(text);
  r.raw_text = std::move(text);
  r.valid = r.parsed_accel && *r.parsed_accel >= kAccelMin && *r.parsed_accel <= kAccelMax;
  return r;
}

TeacherResponse TeacherResponse::from_transport_error(std::string message) {
  TeacherResponse r;
  r.transport_error = std::move(message);
  return r;
}

namespace {

double median_of(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

}  // namespace

VoteResult majority_vote(std::span<const double> accels) {
  if (accels.empty()) throw NoValidVotesError("majority_vote: no valid votes");
  std::map<long long, std::vector<double>> bins;
  for (double a : accels) {
    if (!std::isfinite(a)) throw std::invalid_argument("majority_vote: non-finite vote");
    bins[std::llround(a / kVoteResolution)].push_back(a);
  }

  std::size_t top = 0;
  for (const auto& [key, members] : bins) top = std::max(top, members.size());
  std::vector<const std::vector<double>*> modal;
  for (const auto& [key, members] : bins) {
    if (members.size() == top) modal.push_back(&members);
  }
  if (modal.size() == 1) {
    return {median_of(*modal.front()), static_cast<int>(top)};
  }

  // Ambiguous plurality: fall back to the bin nearest the overall median.
  const double overall = median_of({accels.begin(), accels.end()});
  const std::vector<double>* best = nullptr;
  double best_rep = 0.0;
  for (const auto& [key, members] : bins) {
    const double rep = median_of(members);
    if (best == nullptr) {
      best = &members;
      best_rep = rep;
      continue;
    }
    const double d = std::abs(rep - overall);
    const double d_best = std::abs(best_rep - overall);
    if (d < d_best || (d == d_best && std::abs(rep) < std::abs(best_rep))) {
      best = &members;
      best_rep = rep;
    }
  }
  return {best_rep, static_cast<int>(best->size())};
}

SyntheticOracle::SyntheticOracle(IdmParams params, double noise_std, double hallucination_prob)
    : params_(params), noise_std_(noise_std), hallucination_prob_(hallucination_prob) {
  params_.validate();
  if (!(noise_std >= 0.0)) throw std::invalid_argument("oracle noise_std must be >= 0");
  if (!(hallucination_prob >= 0.0 && hallucination_prob <= 1.0)) {
    throw std::invalid_argument("oracle hallucination_prob must lie in [0, 1]");
  }
}

double SyntheticOracle::clean(const CfState& state) const {
  return clamp_accel(idm_accel(params_, state));
}

double SyntheticOracle::sample(const CfState& state, Rng& rng) const {
  static constexpr double kHallucinations[] = {-5.0, -4.0, 4.0, 5.0};
  if (hallucination_prob_ > 0.0 && rng.uniform() < hallucination_prob_) {
    return kHallucinations[rng.uniform_index(4)];
  }
  const double base = idm_accel(params_, state);
  if (noise_std_ == 0.0) return clamp_accel(base);
  return clamp_accel(base + rng.normal(0.0, noise_std_));
}

OracleTeacher::OracleTeacher(SyntheticOracle oracle, std::uint64_t seed)
    : oracle_(std::move(oracle)), seed_(seed) {}

std::string OracleTeacher::render_response(const CfState& state, double accel) {
  char head[256];
  std::snprintf(head, sizeof head,
                "Speed %.2f m/s, gap %.2f m, relative speed %.2f m/s. Weighing the gap against "
                "both speeds, a human driver would respond smoothly.\n",
                state.v, state.s, state.dv);
  return std::string(head) + "Final acceleration: " + format_double(accel) + " m/s^2";
}

std::vector<std::vector<TeacherResponse>> OracleTeacher::ask_all(
    std::span<const Scenario> scenarios, int k) {
  std::vector<std::vector<TeacherResponse>> out;
  out.reserve(scenarios.size());
  for (const auto& sc : scenarios) {
    Rng rng(derive_seed(seed_, static_cast<std::uint64_t>(sc.id)));
    std::vector<TeacherResponse> responses;
    responses.reserve(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) {
      const double a = oracle_.sample(sc.state, rng);
      responses.push_back(TeacherResponse::from_text(render_response(sc.state, a)));
    }
    out.push_back(std::move(responses));
  }
  return out;
}

std::vector<double> LabeledScenario::valid_accels() const {
  std::vector<double> out;
  for (const auto& r : responses) {
    if (r.valid) out.push_back(*r.parsed_accel);
  }
  return out;
}

namespace {

void aggregate(LabeledScenario& ls) {
  const auto votes = ls.valid_accels();
  if (votes.empty()) {
    ls.flagged = true;
    ls.label = 0.0;
    ls.vote_count = 0;
    return;
  }
  const VoteResult vr = majority_vote(votes);
  ls.flagged = false;
  ls.label = vr.label;
  ls.vote_count = vr.vote_count;
}

}  // namespace

std::vector<LabeledScenario> label_scenarios(std::span<const Scenario> scenarios, Teacher& teacher,
                                             int k, bool requeue) {
  if (k < 1) throw std::invalid_argument("label_scenarios: K must be >= 1");
  auto answers = teacher.ask_all(scenarios, k);
  if (answers.size() != scenarios.size()) throw Error("teacher returned a wrong number of answers");

  std::vector<LabeledScenario> labeled(scenarios.size());
  for (std::size_t i = 0; i < scenarios.size(); ++i) {
    if (answers[i].size() != static_cast<std::size_t>(k)) {
      throw Error("teacher returned a wrong number of responses for scenario " +
                  std::to_string(scenarios[i].id));
    }
    labeled[i].id = scenarios[i].id;
    labeled[i].state = scenarios[i].state;
    labeled[i].responses = std::move(answers[i]);
    aggregate(labeled[i]);
  }

  if (requeue) {
    std::vector<Scenario> retry;
    std::vector<std::size_t> where;
    for (std::size_t i = 0; i < labeled.size(); ++i) {
      if (labeled[i].flagged) {
        retry.push_back(scenarios[i]);
        where.push_back(i);
      }
    }
    if (!retry.empty()) {
      auto again = teacher.ask_all(retry, k);
      for (std::size_t j = 0; j < retry.size(); ++j) {
        labeled[where[j]].responses = std::move(again.at(j));
        aggregate(labeled[where[j]]);
      }
    }
  }
  return labeled;
}

LabelFiles label_files_in(const std::filesystem::path& dir) {
  return {dir / "labels.jsonl", dir / "raw_responses.jsonl", dir / "flagged.jsonl"};
}

namespace {

nlohmann::json labeled_to_json(const LabeledScenario& ls, const std::string& raw_name) {
  nlohmann::json votes = nlohmann::json::array();
  nlohmann::json refs = nlohmann::json::array();
  for (std::size_t k = 0; k < ls.responses.size(); ++k) {
    const auto& r = ls.responses[k];
    nlohmann::json vote;
    vote["accel"] = r.parsed_accel ? nlohmann::json(*r.parsed_accel) : nlohmann::json(nullptr);
    vote["valid"] = r.valid;
    if (!r.transport_error.empty()) vote["error"] = r.transport_error;
    votes.push_back(std::move(vote));
    refs.push_back(raw_name + "#" + std::to_string(ls.id) + "/" + std::to_string(k));
  }
  nlohmann::json j;
  j["id"] = ls.id;
  j["v"] = ls.state.v;
  j["s"] = ls.state.s;
  j["dv"] = ls.state.dv;
  if (ls.flagged) {
    j["label"] = nullptr;
  } else {
    j["label"] = ls.label;
  }
  j["vote_count"] = ls.vote_count;
  j["votes"] = std::move(votes);
  j["raw_refs"] = std::move(refs);
  return j;
}

}  // namespace

void write_label_files(const LabelFiles& files, const std::vector<LabeledScenario>& labeled) {
  std::ofstream labels(files.labels, std::ios::binary);
  std::ofstream raw(files.raw, std::ios::binary);
  std::ofstream flagged(files.flagged, std::ios::binary);
  if (!labels || !raw || !flagged) throw Error("cannot write label files");
  const std::string raw_name = files.raw.filename().string();
  for (const auto& ls : labeled) {
    for (std::size_t k = 0; k < ls.responses.size(); ++k) {
      nlohmann::json r;
      r["id"] = ls.id;
      r["k"] = k;
      r["text"] = ls.responses[k].raw_text;
      r["error"] = ls.responses[k].transport_error;
      raw << r.dump() << '\n';
    }
    (ls.flagged ? flagged : labels) << labeled_to_json(ls, raw_name).dump() << '\n';
  }
}

std::vector<LabeledScenario> read_labels_jsonl(const std::filesystem::path& labels_path,
                                               const std::filesystem::path& raw_path) {
  std::ifstream in(labels_path, std::ios::binary);
  if (!in) throw Error("cannot open " + labels_path.string());

  std::map<std::pair<std::int64_t, std::size_t>, std::string> raw_text;
  if (!raw_path.empty() && std::filesystem::exists(raw_path)) {
    std::ifstream raw(raw_path, std::ios::binary);
    for (std::string line; std::getline(raw, line);) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      raw_text[{j.at("id").get<std::int64_t>(), j.at("k").get<std::size_t>()}] =
          j.at("text").get<std::string>();
    }
  }

  std::vector<LabeledScenario> out;
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw Error(labels_path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    LabeledScenario ls;
    ls.id = j.at("id").get<std::int64_t>();
    ls.state = {j.at("v").get<double>(), j.at("s").get<double>(), j.at("dv").get<double>()};
    ls.flagged = j.at("label").is_null();
    ls.label = ls.flagged ? 0.0 : j.at("label").get<double>();
    ls.vote_count = j.value("vote_count", 0);
    std::size_t k = 0;
    for (const auto& vote : j.at("votes")) {
      TeacherResponse r;
      if (!vote.at("accel").is_null()) r.parsed_accel = vote.at("accel").get<double>();
      r.valid = vote.at("valid").get<bool>();
      r.transport_error = vote.value("error", std::string());
      if (auto it = raw_text.find({ls.id, k}); it != raw_text.end()) r.raw_text = it->second;
      ls.responses.push_back(std::move(r));
      ++k;
    }
    out.push_back(std::move(ls));
  }
  return out;
}

}  // namespace cfdistill
