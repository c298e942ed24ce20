#include "cfdistill/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>

#include "cfdistill/scenario.hpp"
#include "cfdistill/traffic_sim.hpp"

namespace cfdistill {

std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::Basic: return "basic";
    case TrainMode::Random: return "random";
    case TrainMode::Consist: return "consist";
    case TrainMode::Mono: return "mono";
    case TrainMode::Full: return "full";
  }
  return "full";
}

TrainMode train_mode_from_string(const std::string& name) {
  for (auto m : {TrainMode::Basic, TrainMode::Random, TrainMode::Consist, TrainMode::Mono, TrainMode::Full}) {
    if (to_string(m) == name) return m;
  }
  throw std::invalid_argument("unknown training mode '" + name +
                              "' (expected basic, random, consist, mono or full)");
}

void TrainingConfig::validate() const {
  if (!(theta_mon >= 0.0)) throw std::invalid_argument("training.theta_mon must be >= 0");
  if (!(theta_str >= 0.0)) throw std::invalid_argument("training.theta_str must be >= 0");
  for (double d : delta) {
    if (!(d >= 0.0)) throw std::invalid_argument("training.delta entries must be >= 0");
  }
  if (!(learning_rate > 0.0)) throw std::invalid_argument("training.learning_rate must be > 0");
  if (batch_size < 1) throw std::invalid_argument("training.batch_size must be >= 1");
  if (max_epochs < 1) throw std::invalid_argument("training.max_epochs must be >= 1");
  if (patience < 1) throw std::invalid_argument("training.patience must be >= 1");
  if (refresh_period < 1) throw std::invalid_argument("training.refresh_period must be >= 1");
  double sum = 0.0;
  for (double f : split) {
    if (!(f > 0.0)) throw std::invalid_argument("training.split fractions must be > 0");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("training.split fractions must sum to 1");
  if (!(warmup_violation_rate >= 0.0)) throw std::invalid_argument("training.warmup_violation_rate must be >= 0");
  if (probe_samples < 1) throw std::invalid_argument("training.probe_samples must be >= 1");
  model.validate();
  equilibrium.validate();
}

PenaltyWeights TrainingConfig::effective_weights() const {
  PenaltyWeights w;
  w.delta = delta;
  switch (mode) {
    case TrainMode::Basic:
    case TrainMode::Random:
    case TrainMode::Consist: break;
    case TrainMode::Mono: w.theta_mon = theta_mon; break;
    case TrainMode::Full:
      w.theta_mon = theta_mon;
      w.theta_str = theta_str;
      break;
  }
  return w;
}

nlohmann::json TrainingConfig::to_json() const {
  return {{"mode", to_string(mode)},
          {"theta_mon", theta_mon},
          {"theta_str", theta_str},
          {"delta", delta},
          {"learning_rate", learning_rate},
          {"batch_size", batch_size},
          {"max_epochs", max_epochs},
          {"patience", patience},
          {"refresh_period", refresh_period},
          {"split", split},
          {"seed", seed},
          {"warmup_violation_rate", warmup_violation_rate},
          {"probe_samples", probe_samples},
          {"model", spec_to_json(model)},
          {"equilibrium", cfdistill::to_json(equilibrium)}};
}

TrainingConfig TrainingConfig::from_json(const nlohmann::json& j, TrainingConfig base) {
  if (j.contains("mode")) base.mode = train_mode_from_string(j.at("mode").get<std::string>());
  base.theta_mon = j.value("theta_mon", base.theta_mon);
  base.theta_str = j.value("theta_str", base.theta_str);
  base.delta = j.value("delta", base.delta);
  base.learning_rate = j.value("learning_rate", base.learning_rate);
  base.batch_size = j.value("batch_size", base.batch_size);
  base.max_epochs = j.value("max_epochs", base.max_epochs);
  base.patience = j.value("patience", base.patience);
  base.refresh_period = j.value("refresh_period", base.refresh_period);
  base.split = j.value("split", base.split);
  base.seed = j.value("seed", base.seed);
  base.warmup_violation_rate = j.value("warmup_violation_rate", base.warmup_violation_rate);
  base.probe_samples = j.value("probe_samples", base.probe_samples);
  if (j.contains("model")) base.model = spec_from_json(j.at("model"));
  if (j.contains("equilibrium")) base.equilibrium = equilibrium_config_from_json(j.at("equilibrium"), base.equilibrium);
  base.validate();
  return base;
}

SplitIndices split_indices(std::size_t n, const std::array<double, 3>& fractions, std::uint64_t seed) {
  if (n < 10) throw std::invalid_argument("split_dataset: need at least 10 items, got " + std::to_string(n));
  double sum = 0.0;
  for (double f : fractions) {
    if (!(f > 0.0)) throw std::invalid_argument("split_dataset: fractions must be > 0");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("split_dataset: fractions must sum to 1");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng.uniform_index(i + 1)]);

  const auto n_train = static_cast<std::size_t>(std::llround(static_cast<double>(n) * fractions[0]));
  const auto n_val = std::min(n - n_train,
                              static_cast<std::size_t>(std::llround(static_cast<double>(n) * fractions[1])));
  SplitIndices out;
  out.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  out.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                 order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  out.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
  return out;
}

std::vector<TrainingPair> vote_pairs(std::span<const LabeledScenario> labeled) {
  std::vector<TrainingPair> out;
  out.reserve(labeled.size());
  for (const auto& l : labeled) {
    if (!l.flagged) out.push_back({l.state, l.label});
  }
  return out;
}

std::vector<TrainingPair> prepare_training_labels(std::span<const LabeledScenario> labeled,
                                                  TrainMode mode, std::uint64_t seed) {
  if (mode != TrainMode::Basic && mode != TrainMode::Random) return vote_pairs(labeled);
  std::vector<TrainingPair> out;
  Rng rng(seed);
  for (const auto& l : labeled) {
    const std::vector<double> accels = l.valid_accels();
    if (accels.empty()) continue;
    if (mode == TrainMode::Basic) {
      for (double a : accels) out.push_back({l.state, a});
    } else {
      out.push_back({l.state, accels[rng.uniform_index(accels.size())]});
    }
  }
  return out;
}

std::vector<CfState> probe_states(std::size_t count, std::uint64_t seed) {
  const ScenarioSet set = generate_scenarios(default_scenario_specs(), count, seed);
  std::vector<CfState> out;
  out.reserve(count);
  for (const auto& s : set.scenarios) out.push_back(s.state);
  return out;
}

std::string fnv1a_hex(std::string_view data) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace {

struct Adam {
  Eigen::VectorXd m, v;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  long t = 0;

  explicit Adam(Eigen::Index n) : m(Eigen::VectorXd::Zero(n)), v(Eigen::VectorXd::Zero(n)) {}

  void step(Eigen::VectorXd& theta, const Eigen::VectorXd& g, double lr) {
    ++t;
    m = beta1 * m + (1.0 - beta1) * g;
    v = beta2 * v + (1.0 - beta2) * g.cwiseProduct(g);
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    theta.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
};

double plain_mse(const MlpModel& model, std::span<const TrainingPair> pairs) {
  std::vector<CfState> s(pairs.size());
  std::vector<double> y(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    s[i] = pairs[i].state;
    y[i] = pairs[i].label;
  }
  return loss_and_param_grads(model, s, y, {}, PenaltyWeights{}, false).loss.mse;
}

double probe_violation_rate(const MlpModel& model, std::span<const CfState> probe,
                            const std::array<double, 3>& delta) {
  const MonotonicityAudit a = monotonicity_audit(model, probe);
  // Spacing monotonicity is what makes the equilibrium unique, so it always counts.
  double rate = a.rate_s;
  if (delta[0] > 0.0) rate = std::max(rate, a.rate_v);
  if (delta[2] > 0.0) rate = std::max(rate, a.rate_dv);
  return rate;
}

}  // namespace

TrainResult train(const MlpModel& init, std::span<const TrainingPair> train_set,
                  std::span<const TrainingPair> val_set, const TrainingConfig& cfg) {
  cfg.validate();
  if (train_set.empty()) throw std::invalid_argument("train: empty training set");
  if (val_set.empty()) throw std::invalid_argument("train: empty validation set");

  const PenaltyWeights eff = cfg.effective_weights();
  const bool use_str = eff.theta_str > 0.0;
  MlpModel model = init;
  Eigen::VectorXd theta = model.parameters();
  Adam adam(theta.size());

  const std::vector<CfState> probe =
      use_str ? probe_states(cfg.probe_samples, derive_seed(cfg.seed, 0x70726f6265ULL)) : std::vector<CfState>{};

  TrainResult result{TrainRun{}, model};
  TrainRun& run = result.run;
  std::optional<MlpModel> best_eligible;
  double best_eligible_val = std::numeric_limits<double>::infinity();
  int best_eligible_epoch = 0;
  MlpModel best_any = model;
  double best_any_val = std::numeric_limits<double>::infinity();
  int best_any_epoch = 0;
  int since_improve = 0;

  std::vector<CfState> equilibria;
  bool str_active = false;
  std::string str_note;
  std::optional<EquilibriumSearch> cached_search;  // computed on the current parameters

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto batch = static_cast<std::size_t>(cfg.batch_size);
  std::vector<CfState> bs;
  std::vector<double> bl;
  run.stop_reason = "max_epochs";

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    if (use_str && (epoch - 1) % cfg.refresh_period == 0) {
      str_active = false;
      equilibria.clear();
      const double rate = probe_violation_rate(model, probe, cfg.delta);
      if (rate > cfg.warmup_violation_rate) {
        char msg[96];
        std::snprintf(msg, sizeof msg, "warm-up: probe monotonicity violations %.4f", rate);
        str_note = msg;
      } else {
        try {
          if (!cached_search) cached_search = find_equilibria(model, cfg.equilibrium);
          for (const auto& p : cached_search->points) equilibria.push_back(p.state());
          str_active = !equilibria.empty();
          str_note = str_active ? "" : "no equilibria found";
        } catch (const AmbiguousEquilibriumError& e) {
          str_note = std::string("ambiguous equilibria: ") + e.what();
        }
      }
    }
    PenaltyWeights w = eff;
    if (!str_active) w.theta_str = 0.0;

    Rng shuffle(derive_seed(cfg.seed, 0x65706f6368ULL + static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[shuffle.uniform_index(i + 1)]);

    double sum_mse = 0.0, sum_mon = 0.0, sum_str = 0.0, sum_total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      bs.clear();
      bl.clear();
      for (std::size_t i = start; i < end; ++i) {
        bs.push_back(train_set[order[i]].state);
        bl.push_back(train_set[order[i]].label);
      }
      LossAndGrad lg;
      try {
        lg = loss_and_param_grads(model, bs, bl, str_active ? std::span<const CfState>(equilibria)
                                                            : std::span<const CfState>(),
                                  w, true);
      } catch (const DivergenceError& e) {
        throw DivergenceError("training diverged at epoch " + std::to_string(epoch) + ", batch starting " +
                                  std::to_string(start) + ": " + e.what(),
                              order[start + e.sample_index()]);
      }
      if (!std::isfinite(lg.loss.total) || !lg.grad.allFinite()) {
        throw DivergenceError("training diverged at epoch " + std::to_string(epoch) +
                                  ": non-finite loss or gradient",
                              order[start]);
      }
      const double nb = static_cast<double>(end - start);
      sum_mse += nb * lg.loss.mse;
      sum_mon += nb * lg.loss.c_mon;
      sum_str += nb * lg.loss.c_str;
      sum_total += nb * lg.loss.total;
      adam.step(theta, lg.grad, cfg.learning_rate);
      model.set_parameters(theta);
    }
    cached_search.reset();

    EpochRecord rec;
    rec.epoch = epoch;
    const double n = static_cast<double>(order.size());
    rec.mse = sum_mse / n;
    rec.c_mon = sum_mon / n;
    rec.c_str = sum_str / n;
    rec.total = sum_total / n;
    rec.val_mse = plain_mse(model, val_set);
    rec.n_equilibria = str_active ? equilibria.size() : 0;
    rec.str_active = str_active;
    rec.str_note = str_note;
    rec.min_criterion = std::numeric_limits<double>::quiet_NaN();
    if (!std::isfinite(rec.val_mse)) {
      throw DivergenceError("validation loss became non-finite at epoch " + std::to_string(epoch), 0);
    }
    if (use_str) {
      rec.eligible = false;
      try {
        cached_search = find_equilibria(model, cfg.equilibrium);
        if (!cached_search->points.empty()) {
          rec.min_criterion = cached_search->min_criterion();
          rec.eligible = rec.min_criterion > 0.0;
        }
      } catch (const AmbiguousEquilibriumError&) {
        cached_search.reset();
      }
    }
    run.epochs.push_back(rec);

    if (rec.val_mse < best_any_val) {
      best_any_val = rec.val_mse;
      best_any = model;
      best_any_epoch = epoch;
    }
    if (rec.eligible && rec.val_mse < best_eligible_val) {
      best_eligible_val = rec.val_mse;
      best_eligible = model;
      best_eligible_epoch = epoch;
      since_improve = 0;
    } else if (best_eligible) {
      ++since_improve;
      if (since_improve >= cfg.patience) {
        run.stop_reason = "early_stop";
        break;
      }
    }
  }

  if (best_eligible) {
    result.model = *best_eligible;
    run.best_epoch = best_eligible_epoch;
    run.best_val_mse = best_eligible_val;
  } else {
    result.model = best_any;
    run.best_epoch = best_any_epoch;
    run.best_val_mse = best_any_val;
    run.flagged_unstable = true;
  }
  nlohmann::json fp = cfg.to_json();
  fp["train_size"] = train_set.size();
  fp["val_size"] = val_set.size();
  result.model.set_training_fingerprint(fnv1a_hex(fp.dump()));
  return result;
}

nlohmann::json TrainRun::summary_json() const {
  return {{"epochs_run", epochs.size()},
          {"best_epoch", best_epoch},
          {"best_val_mse", best_val_mse},
          {"stop_reason", stop_reason},
          {"flagged_unstable", flagged_unstable}};
}

void write_epoch_csv(const std::filesystem::path& path, const TrainRun& run) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << "epoch,mse,c_mon,c_str,total,val_mse,n_equilibria,str_active,min_criterion,eligible\n";
  char line[320];
  for (const auto& r : run.epochs) {
    std::snprintf(line, sizeof line, "%d,%.12g,%.12g,%.12g,%.12g,%.12g,%zu,%d,%.12g,%d\n", r.epoch,
                  r.mse, r.c_mon, r.c_str, r.total, r.val_mse, r.n_equilibria, r.str_active ? 1 : 0,
                  r.min_criterion, r.eligible ? 1 : 0);
    out << line;
  }
}

std::vector<double> predict(const CarFollowingModel& model, std::span<const TrainingPair> pairs) {
  std::vector<CfState> s(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) s[i] = pairs[i].state;
  std::vector<double> out(pairs.size());
  model.accel_batch(s, out);
  return out;
}

double held_out_wmape(const CarFollowingModel& model, std::span<const TrainingPair> pairs) {
  const std::vector<double> pred = predict(model, pairs);
  std::vector<double> actual(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) actual[i] = pairs[i].label;
  return wmape(pred, actual);
}

}  // namespace cfdistill
