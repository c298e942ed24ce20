#include "cfdistill/data_eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <unordered_map>

#include "cfdistill/rng.hpp"
#include "cfdistill/trainer.hpp"

namespace cfdistill {

// ---- schema ---------------------------------------------------------------

void TrajectorySchema::validate() const {
  if (!(dt > 0.0)) throw std::invalid_argument("schema.dt must be > 0");
  if (!(unit_scale > 0.0)) throw std::invalid_argument("schema.unit_scale must be > 0");
  for (const auto* c : {&vehicle_id, &time, &position, &speed, &lane, &leader_id, &vehicle_class, &length}) {
    if (c->empty()) throw std::invalid_argument("schema: column names must be non-empty");
  }
}

void TrajectorySchema::check_header(const std::vector<std::string>& header) const {
  const std::pair<const char*, const std::string*> cols[] = {
      {"vehicle_id", &vehicle_id}, {"time", &time},   {"position", &position},
      {"speed", &speed},           {"lane", &lane},   {"leader_id", &leader_id},
      {"vehicle_class", &vehicle_class}, {"length", &length}};
  for (const auto& [field, name] : cols) {
    if (std::find(header.begin(), header.end(), *name) == header.end()) {
      throw Error("schema mismatch: column '" + *name + "' (mapped for " + field + ") not found");
    }
  }
}

nlohmann::json TrajectorySchema::to_json() const {
  return {{"columns",
           {{"vehicle_id", vehicle_id},
            {"time", time},
            {"position", position},
            {"speed", speed},
            {"lane", lane},
            {"leader_id", leader_id},
            {"vehicle_class", vehicle_class},
            {"length", length}}},
          {"time_is_frame", time_is_frame},
          {"dt", dt},
          {"unit_scale", unit_scale},
          {"automobile_classes", automobile_classes},
          {"no_leader_values", no_leader_values}};
}

TrajectorySchema TrajectorySchema::from_json(const nlohmann::json& j) {
  TrajectorySchema s;
  if (j.contains("columns")) {
    const auto& c = j.at("columns");
    s.vehicle_id = c.value("vehicle_id", s.vehicle_id);
    s.time = c.value("time", s.time);
    s.position = c.value("position", s.position);
    s.speed = c.value("speed", s.speed);
    s.lane = c.value("lane", s.lane);
    s.leader_id = c.value("leader_id", s.leader_id);
    s.vehicle_class = c.value("vehicle_class", s.vehicle_class);
    s.length = c.value("length", s.length);
  }
  s.time_is_frame = j.value("time_is_frame", s.time_is_frame);
  s.dt = j.value("dt", s.dt);
  s.unit_scale = j.value("unit_scale", s.unit_scale);
  s.automobile_classes = j.value("automobile_classes", s.automobile_classes);
  s.no_leader_values = j.value("no_leader_values", s.no_leader_values);
  s.validate();
  return s;
}

// ---- extraction -----------------------------------------------------------

namespace {

struct Record {
  long frame = 0;
  double x = 0.0, v = 0.0, length = 0.0;
  std::string lane, leader, cls;
};

using VehicleTrack = std::vector<Record>;  // sorted by frame

bool contains(const std::vector<std::string>& list, const std::string& value) {
  return std::find(list.begin(), list.end(), value) != list.end();
}

const Record* record_at(const VehicleTrack& track, long frame) {
  auto it = std::lower_bound(track.begin(), track.end(), frame,
                             [](const Record& r, long f) { return r.frame < f; });
  return (it != track.end() && it->frame == frame) ? &*it : nullptr;
}

}  // namespace

ExtractionResult extract_pairs(const CsvTable& table, const TrajectorySchema& schema,
                               const std::string& dataset) {
  schema.validate();
  schema.check_header(table.header);
  const std::size_t c_id = table.column(schema.vehicle_id), c_t = table.column(schema.time),
                    c_x = table.column(schema.position), c_v = table.column(schema.speed),
                    c_lane = table.column(schema.lane), c_lead = table.column(schema.leader_id),
                    c_cls = table.column(schema.vehicle_class), c_len = table.column(schema.length);
  const std::size_t width = table.header.size();

  ExtractionResult out;
  auto& st = out.stats;
  std::map<std::string, VehicleTrack> tracks;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    ++st.rows;
    try {
      if (row.size() != width) throw std::invalid_argument("expected " + std::to_string(width) + " fields");
      Record rec;
      const double t = parse_double(row[c_t], schema.time);
      rec.frame = schema.time_is_frame ? std::lround(t) : std::lround(t / schema.dt);
      rec.x = parse_double(row[c_x], schema.position) * schema.unit_scale;
      rec.v = parse_double(row[c_v], schema.speed) * schema.unit_scale;
      rec.length = parse_double(row[c_len], schema.length) * schema.unit_scale;
      if (!(rec.v >= 0.0)) throw std::invalid_argument("negative speed");
      if (!(rec.length >= 0.0)) throw std::invalid_argument("negative length");
      rec.lane = row[c_lane];
      rec.leader = row[c_lead];
      rec.cls = row[c_cls];
      tracks[row[c_id]].push_back(std::move(rec));
    } catch (const std::exception& e) {
      ++st.malformed_rows;
      if (st.warnings.size() < 20) {
        st.warnings.push_back("row " + std::to_string(r + 2) + ": " + e.what());
      }
    }
  }
  for (auto& [id, track] : tracks) {
    std::stable_sort(track.begin(), track.end(), [](const Record& a, const Record& b) { return a.frame < b.frame; });
    // Duplicate frames keep the first occurrence.
    track.erase(std::unique(track.begin(), track.end(),
                            [](const Record& a, const Record& b) { return a.frame == b.frame; }),
                track.end());
  }

  const double dt = schema.dt;
  for (const auto& [fid, track] : tracks) {
    std::size_t i = 0;
    while (i < track.size()) {
      const Record& first = track[i];
      if (contains(schema.no_leader_values, first.leader)) {
        ++i;
        continue;
      }
      const auto lt = tracks.find(first.leader);
      if (lt == tracks.end() || !record_at(lt->second, first.frame)) {
        ++i;
        continue;
      }
      const VehicleTrack& leader = lt->second;
      std::size_t j = i;
      std::vector<const Record*> lead_recs;
      while (j < track.size() && track[j].leader == first.leader && track[j].lane == first.lane &&
             (j == i || track[j].frame == track[j - 1].frame + 1)) {
        const Record* lr = record_at(leader, track[j].frame);
        if (!lr) break;
        lead_recs.push_back(lr);
        ++j;
      }
      ++st.segments;
      const std::size_t n = j - i;
      const double duration = static_cast<double>(n - 1) * dt;
      const bool autos = contains(schema.automobile_classes, first.cls) &&
                         contains(schema.automobile_classes, lead_recs.front()->cls);
      if (!autos) {
        ++st.non_automobile;
      } else if (duration < kMinPairDuration - 1e-9) {
        ++st.too_short;
      } else {
        CfPair p;
        p.dataset = dataset;
        p.follower_id = fid;
        p.leader_id = first.leader;
        p.lane = first.lane;
        p.start_time = static_cast<double>(first.frame) * dt;
        p.duration = duration;
        p.traj.dt = dt;
        p.traj.leader_length = lead_recs.front()->length;
        for (std::size_t k = 0; k < n; ++k) {
          p.traj.leader_x.push_back(lead_recs[k]->x);
          p.traj.leader_v.push_back(lead_recs[k]->v);
          p.traj.follower_x.push_back(track[i + k].x);
          p.traj.follower_v.push_back(track[i + k].v);
        }
        if (p.traj.recorded_spacing(0) > 0.0) {
          out.pairs.push_back(std::move(p));
          ++st.kept;
        } else {
          ++st.bad_spacing;
        }
      }
      i = j;
    }
  }
  return out;
}

bool pair_satisfies_filters(const CfPair& pair, const TrajectorySchema& schema) {
  if (pair.duration < kMinPairDuration - 1e-9) return false;
  if (pair.traj.size() < 2) return false;
  if (std::abs(static_cast<double>(pair.traj.size() - 1) * pair.traj.dt - pair.duration) > 1e-6) return false;
  return !contains(schema.no_leader_values, pair.leader_id);
}

PairSplits split_pairs(std::span<const CfPair> pairs, std::uint64_t seed) {
  const auto s = split_dataset<CfPair>(pairs, {0.6, 0.2, 0.2}, seed);
  return {s.train, s.val, s.test};
}

// ---- calibration ----------------------------------------------------------

void IdmBounds::validate() const {
  lo.validate();
  hi.validate();
  const double l[] = {lo.v0, lo.T, lo.s0, lo.a_max, lo.b};
  const double h[] = {hi.v0, hi.T, hi.s0, hi.a_max, hi.b};
  for (int k = 0; k < 5; ++k) {
    if (!(l[k] <= h[k])) throw std::invalid_argument("idm bounds: lower bound exceeds upper bound");
  }
}

IdmParams IdmBounds::clip(const IdmParams& p) const {
  return {std::clamp(p.v0, lo.v0, hi.v0), std::clamp(p.T, lo.T, hi.T), std::clamp(p.s0, lo.s0, hi.s0),
          std::clamp(p.a_max, lo.a_max, hi.a_max), std::clamp(p.b, lo.b, hi.b)};
}

void EvolutionConfig::validate() const {
  if (population < 2) throw std::invalid_argument("evolution.population must be >= 2");
  if (generations < 0) throw std::invalid_argument("evolution.generations must be >= 0");
  if (tournament < 1) throw std::invalid_argument("evolution.tournament must be >= 1");
  if (elites < 0 || elites >= population) throw std::invalid_argument("evolution.elites must be in [0, population)");
  if (!(crossover_alpha >= 0.0)) throw std::invalid_argument("evolution.crossover_alpha must be >= 0");
  if (!(mutation_prob >= 0.0 && mutation_prob <= 1.0)) throw std::invalid_argument("evolution.mutation_prob must be in [0, 1]");
  if (!(mutation_scale >= 0.0)) throw std::invalid_argument("evolution.mutation_scale must be >= 0");
  if (!(mutation_final_ratio > 0.0 && mutation_final_ratio <= 1.0)) {
    throw std::invalid_argument("evolution.mutation_final_ratio must be in (0, 1]");
  }
}

ReplayScore replay_score(const CarFollowingModel& model, std::span<const CfPair> pairs) {
  if (pairs.empty()) throw std::invalid_argument("replay_score: no pairs");
  std::vector<SimResult> results;
  std::vector<Trajectory> trajs;
  results.reserve(pairs.size());
  trajs.reserve(pairs.size());
  ReplayScore score;
  for (const auto& p : pairs) {
    results.push_back(replay_simulate(model, p.traj));
    trajs.push_back(p.traj);
    score.collisions += results.back().collided ? 1 : 0;
  }
  score.rmse = evaluate_rmse(results, trajs);
  return score;
}

namespace {

using Genome = std::array<double, 5>;

Genome to_genome(const IdmParams& p) { return {p.v0, p.T, p.s0, p.a_max, p.b}; }
IdmParams from_genome(const Genome& g) { return {g[0], g[1], g[2], g[3], g[4]}; }

bool better(const ReplayScore& a, const ReplayScore& b) {
  if (a.collisions != b.collisions) return a.collisions < b.collisions;
  return a.rmse < b.rmse;
}

}  // namespace

CalibrationResult calibrate_idm(std::span<const CfPair> pairs, const IdmBounds& bounds,
                                const EvolutionConfig& cfg) {
  if (pairs.empty()) throw std::invalid_argument("calibrate_idm: no training pairs");
  bounds.validate();
  cfg.validate();
  const Genome lo = to_genome(bounds.lo), hi = to_genome(bounds.hi);
  Rng rng(cfg.seed);
  const auto pop_n = static_cast<std::size_t>(cfg.population);

  const auto evaluate = [&](const Genome& g) {
    return replay_score(IdmModel(from_genome(g)), pairs);
  };

  std::vector<Genome> pop(pop_n);
  for (auto& g : pop) {
    for (int k = 0; k < 5; ++k) g[k] = rng.uniform(lo[k], hi[k]);
  }
  std::vector<ReplayScore> fit(pop_n);
  for (std::size_t i = 0; i < pop_n; ++i) fit[i] = evaluate(pop[i]);

  std::vector<std::size_t> rank(pop_n);
  const auto sort_rank = [&] {
    std::iota(rank.begin(), rank.end(), std::size_t{0});
    std::stable_sort(rank.begin(), rank.end(), [&](std::size_t a, std::size_t b) { return better(fit[a], fit[b]); });
  };
  const auto pick = [&] {
    std::size_t best = rng.uniform_index(pop_n);
    for (int t = 1; t < cfg.tournament; ++t) {
      const std::size_t c = rng.uniform_index(pop_n);
      if (better(fit[c], fit[best])) best = c;
    }
    return best;
  };

  CalibrationResult res;
  sort_rank();
  res.best_rmse_per_generation.push_back(fit[rank[0]].rmse);
  for (int gen = 0; gen < cfg.generations; ++gen) {
    const double sigma_frac =
        cfg.mutation_scale * std::pow(cfg.mutation_final_ratio,
                                      static_cast<double>(gen) / static_cast<double>(cfg.generations));
    std::vector<Genome> next;
    std::vector<ReplayScore> next_fit;
    next.reserve(pop_n);
    for (int e = 0; e < cfg.elites; ++e) {
      next.push_back(pop[rank[static_cast<std::size_t>(e)]]);
      next_fit.push_back(fit[rank[static_cast<std::size_t>(e)]]);
    }
    while (next.size() < pop_n) {
      const Genome& a = pop[pick()];
      const Genome& b = pop[pick()];
      Genome child;
      for (int k = 0; k < 5; ++k) {
        const double lo_k = std::min(a[k], b[k]), hi_k = std::max(a[k], b[k]);
        const double span = hi_k - lo_k;
        double x = rng.uniform(lo_k - cfg.crossover_alpha * span, hi_k + cfg.crossover_alpha * span);
        if (rng.uniform() < cfg.mutation_prob) x += rng.normal() * sigma_frac * (hi[k] - lo[k]);
        child[k] = std::clamp(x, lo[k], hi[k]);
      }
      next.push_back(child);
      next_fit.push_back(evaluate(child));
    }
    pop = std::move(next);
    fit = std::move(next_fit);
    sort_rank();
    res.best_rmse_per_generation.push_back(fit[rank[0]].rmse);
  }
  res.params = bounds.clip(from_genome(pop[rank[0]]));
  res.score = fit[rank[0]];
  return res;
}

// ---- aggregation and leaderboard -----------------------------------------

double aggregate_errors(const std::map<std::string, double>& rmse,
                        const std::map<std::string, double>& idm_star) {
  if (rmse.empty()) throw std::invalid_argument("aggregate_errors: no datasets");
  if (rmse.size() != idm_star.size()) throw std::invalid_argument("aggregate_errors: dataset keys differ");
  double num = 0.0, den = 0.0;
  for (const auto& [name, err] : rmse) {
    const auto it = idm_star.find(name);
    if (it == idm_star.end()) throw std::invalid_argument("aggregate_errors: no normalizer for dataset '" + name + "'");
    if (!(it->second > 0.0)) throw std::invalid_argument("aggregate_errors: normalizer for '" + name + "' must be > 0");
    num += err / it->second;
    den += 1.0 / it->second;
  }
  return num / den;
}

namespace {

void sort_rows(std::vector<LeaderboardRow>& rows) {
  std::stable_sort(rows.begin(), rows.end(),
                   [](const LeaderboardRow& a, const LeaderboardRow& b) { return a.aggregate < b.aggregate; });
}

}  // namespace

std::vector<LeaderboardRow> cross_evaluate(std::span<const NamedModel> models,
                                           std::span<const EvalDataset> datasets,
                                           const std::map<std::string, double>& idm_star) {
  if (models.empty() || datasets.empty()) throw std::invalid_argument("cross_evaluate: need models and datasets");
  std::vector<LeaderboardRow> rows;
  for (const auto& m : models) {
    if (!m.model) throw std::invalid_argument("cross_evaluate: model '" + m.name + "' is null");
    LeaderboardRow row;
    row.model = m.name;
    for (const auto& d : datasets) {
      if (d.test.empty()) throw std::invalid_argument("cross_evaluate: dataset '" + d.name + "' has no test pairs");
      const ReplayScore s = replay_score(*m.model, d.test);
      row.rmse[d.name] = s.rmse;
      row.collisions[d.name] = s.collisions;
    }
    row.aggregate = aggregate_errors(row.rmse, idm_star);
    rows.push_back(std::move(row));
  }
  sort_rows(rows);
  return rows;
}

std::vector<LeaderboardRow> leaderboard_from_errors(
    const std::map<std::string, std::map<std::string, double>>& errors,
    const std::map<std::string, double>& idm_star) {
  std::vector<LeaderboardRow> rows;
  for (const auto& [model, per_ds] : errors) {
    LeaderboardRow row;
    row.model = model;
    row.rmse = per_ds;
    for (const auto& [d, _] : per_ds) row.collisions[d] = 0;
    row.aggregate = aggregate_errors(per_ds, idm_star);
    rows.push_back(std::move(row));
  }
  sort_rows(rows);
  return rows;
}

void write_leaderboard_csv(const std::filesystem::path& path, const std::vector<LeaderboardRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << "model,dataset,rmse,collisions,aggregate\n";
  char line[256];
  for (const auto& r : rows) {
    for (const auto& [d, e] : r.rmse) {
      const auto c = r.collisions.count(d) ? r.collisions.at(d) : 0;
      std::snprintf(line, sizeof line, ",%.6f,%zu,%.6f\n", e, c, r.aggregate);
      out << r.model << ',' << d << line;
    }
  }
}

nlohmann::json leaderboard_json(const std::vector<LeaderboardRow>& rows) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : rows) {
    arr.push_back({{"model", r.model}, {"rmse", r.rmse}, {"collisions", r.collisions}, {"aggregate", r.aggregate}});
  }
  return {{"leaderboard", arr}};
}

// ---- synthetic data -------------------------------------------------------

CsvTable generate_synthetic_dataset(const SyntheticDatasetConfig& cfg) {
  cfg.follower.validate();
  if (!(cfg.dt > 0.0) || !(cfg.duration > 0.0)) throw std::invalid_argument("synthetic dataset: dt and duration must be > 0");
  CsvTable t;
  t.header = {"vehicle_id", "time", "position", "speed", "lane", "leader_id", "vehicle_class", "length"};
  Rng rng(cfg.seed);
  const IdmModel idm(cfg.follower);
  const long steps = std::lround(cfg.duration / cfg.dt);
  constexpr double kLength = 4.5;
  for (std::size_t p = 0; p < cfg.pairs; ++p) {
    const std::string lid = std::to_string(2 * p + 1), fid = std::to_string(2 * p + 2);
    const std::string lane = std::to_string(1 + p % 3);
    const double base = cfg.leader_speed * rng.uniform(0.6, 1.4);
    const double amp1 = rng.uniform(0.5, 3.0), amp2 = rng.uniform(0.2, 1.5);
    const double w1 = rng.uniform(0.05, 0.2), w2 = rng.uniform(0.2, 0.5);
    const double ph1 = rng.uniform(0.0, 6.283), ph2 = rng.uniform(0.0, 6.283);
    const auto lead_speed = [&](double time) {
      return std::max(0.0, base + amp1 * std::sin(w1 * time + ph1) + amp2 * std::sin(w2 * time + ph2));
    };
    double lx = 0.0, lv = lead_speed(0.0);
    double fv = lv;
    double fx = lx - kLength - idm_equilibrium_spacing(cfg.follower, std::min(fv, 0.95 * cfg.follower.v0)) *
                                   rng.uniform(0.85, 1.2);
    for (long k = 0; k <= steps; ++k) {
      const double time = static_cast<double>(k) * cfg.dt;
      t.rows.push_back({lid, format_double(time), format_double(lx), format_double(lv), lane, "", "car",
                        format_double(kLength)});
      t.rows.push_back({fid, format_double(time), format_double(fx), format_double(fv), lane, lid, "car",
                        format_double(kLength)});
      // Follower reacts to the state as recorded so replay reproduces it.
      const double s = lx - fx - kLength;
      const double a = clamp_accel(idm.accel({fv, s, fv - lv}));
      const Kinematics fk = ballistic_step(fv, fx, a, cfg.dt);
      const double next_lv = lead_speed(time + cfg.dt);
      lx += 0.5 * (lv + next_lv) * cfg.dt;
      lv = next_lv;
      fx = fk.x;
      fv = fk.v;
    }
  }
  return t;
}

}  // namespace cfdistill
