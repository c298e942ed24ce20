// Command-line front end: generate -> label -> train -> stability -> platoon,
// plus evaluate and gradcheck. Exit codes: 0 ok, 1 user error, 2 internal.
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "cfdistill/data_eval.hpp"
#include "cfdistill/endpoint_teacher.hpp"
#include "cfdistill/mlp.hpp"
#include "cfdistill/model_io.hpp"
#include "cfdistill/scenario.hpp"
#include "cfdistill/stability.hpp"
#include "cfdistill/teacher.hpp"
#include "cfdistill/traffic_sim.hpp"
#include "cfdistill/trainer.hpp"

#ifndef CFDISTILL_VERSION
#define CFDISTILL_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cfdistill;

namespace {

class UserError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InternalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UserError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

struct Common {
  std::uint64_t seed = 0;
  std::string config_path;
  std::string out_dir = "out";
  CLI::Option* seed_opt = nullptr;
};

// Overrides from --config. A run manifest may be passed directly; its
// resolved snapshot is then used.
json load_config(const Common& c) {
  if (c.config_path.empty()) return json::object();
  json j = read_json_file(c.config_path);
  if (!j.is_object()) throw UserError(c.config_path + ": config must be a JSON object");
  if (j.contains("subcommand") && j.contains("config")) return j.at("config");
  return j;
}

template <class T>
T pick(const CLI::Option* opt, const T& flag_value, const json& cfg, const char* key, const T& fallback) {
  if (opt && opt->count() > 0) return flag_value;
  if (cfg.contains(key)) {
    try {
      return cfg.at(key).get<T>();
    } catch (const json::exception& e) {
      throw UserError(std::string("config key '") + key + "': " + e.what());
    }
  }
  return fallback;
}

/// Run manifest: written before the work, completed after it.
class Manifest {
 public:
  Manifest(std::string sub, const Common& c) : sub_(std::move(sub)), out_(c.out_dir) {}
  Manifest(const Manifest&) = delete;
  Manifest& operator=(const Manifest&) = delete;
  ~Manifest() {
    if (done_ || j_.is_null()) return;
    try {
      finish("failed");
    } catch (...) {
    }
  }

  void begin(const json& config, std::uint64_t seed, const json& inputs, const json& outputs) {
    fs::create_directories(out_);
    j_ = {{"subcommand", sub_},
          {"config", config},
          {"seed", seed},
          {"inputs", inputs},
          {"outputs", outputs},
          {"tool_version", CFDISTILL_VERSION},
          {"started_at", utc_now()},
          {"finished_at", nullptr},
          {"status", "running"}};
    write_json(path(), j_);
  }
  void finish(const std::string& status) {
    if (j_.is_null()) return;
    j_["finished_at"] = utc_now();
    j_["status"] = status;
    done_ = true;
    write_json(path(), j_);
  }
  fs::path path() const { return out_ / "manifest.json"; }

 private:
  std::string sub_;
  fs::path out_;
  json j_;
  bool done_ = false;
};

std::vector<int> parse_hidden(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw UserError("invalid hidden layer list '" + text + "'");
    }
  }
  if (out.empty()) throw UserError("hidden layer list is empty");
  return out;
}

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw UserError(std::string("missing ") + what + " path");
  if (!fs::exists(path)) throw UserError(std::string(what) + " not found: " + path);
}

std::map<std::string, std::string> parse_named(const std::vector<std::string>& items, const char* what) {
  std::map<std::string, std::string> out;
  for (const auto& it : items) {
    const auto eq = it.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw UserError(std::string(what) + " must be given as name=path, got '" + it + "'");
    }
    out[it.substr(0, eq)] = it.substr(eq + 1);
  }
  return out;
}

std::map<std::string, double> read_idm_star(const json& spec) {
  json j = spec;
  if (spec.is_string()) j = read_json_file(spec.get<std::string>());
  if (!j.is_object()) throw UserError("idm_star must be an object {dataset: rmse}");
  return j.get<std::map<std::string, double>>();
}

// ---- generate -------------------------------------------------------------

struct GenerateArgs {
  std::size_t count = 10000;
  CLI::Option* count_opt = nullptr;
};

int cmd_generate(const Common& c, const GenerateArgs& a) {
  const json cfg = load_config(c);
  json resolved;
  resolved["count"] = pick(a.count_opt, a.count, cfg, "count", std::size_t{10000});
  resolved["seed"] = pick(c.seed_opt, c.seed, cfg, "seed", std::uint64_t{0});
  ScenarioSpecs specs;
  try {
    specs = specs_from_json(cfg.value("specs", json::object()), default_scenario_specs());
  } catch (const std::invalid_argument& e) {
    throw UserError(std::string("invalid scenario specs: ") + e.what());
  }
  resolved["specs"] = specs_to_json(specs);
  const std::size_t count = resolved["count"];
  if (count == 0) throw UserError("count must be > 0");

  Manifest m("generate", c);
  const fs::path out = fs::path(c.out_dir) / "scenarios.csv";
  m.begin(resolved, resolved["seed"], json::object(), {{"scenarios", out.string()}});
  const ScenarioSet set = generate_scenarios(specs, count, resolved["seed"].get<std::uint64_t>());
  write_scenarios_csv(out, set.scenarios);
  m.finish("ok");
  std::cout << "wrote " << set.scenarios.size() << " scenarios to " << out.string() << '\n';
  return 0;
}

// ---- label ----------------------------------------------------------------

struct LabelArgs {
  std::string scenarios;
  std::string teacher = "oracle";
  int k = 5;
  double noise_std = 0.0;
  double hallucination = 0.2;
  std::string endpoint_config;
  bool requeue = false;
  CLI::Option *scen_opt = nullptr, *teacher_opt = nullptr, *k_opt = nullptr, *noise_opt = nullptr,
              *hall_opt = nullptr, *ep_opt = nullptr, *requeue_opt = nullptr;
};

int cmd_label(const Common& c, const LabelArgs& a) {
  const json cfg = load_config(c);
  json r;
  r["scenarios"] = pick(a.scen_opt, a.scenarios, cfg, "scenarios", (fs::path(c.out_dir) / "scenarios.csv").string());
  r["teacher"] = pick(a.teacher_opt, a.teacher, cfg, "teacher", std::string("oracle"));
  r["k"] = pick(a.k_opt, a.k, cfg, "k", 5);
  r["requeue"] = pick(a.requeue_opt, a.requeue, cfg, "requeue", false);
  r["seed"] = pick(c.seed_opt, c.seed, cfg, "seed", std::uint64_t{0});
  const int k = r["k"];
  if (k < 1) throw UserError("k must be >= 1");

  const json ocfg = cfg.value("oracle", json::object());
  IdmParams idm;
  try {
    idm = idm_from_json(ocfg.value("idm", json::object()));
  } catch (const std::invalid_argument& e) {
    throw UserError(std::string("oracle.idm: ") + e.what());
  }
  json oracle = {{"idm", idm_to_json(idm)["params"]},
                 {"noise_std", pick(a.noise_opt, a.noise_std, ocfg, "noise_std", 0.0)},
                 {"hallucination_prob", pick(a.hall_opt, a.hallucination, ocfg, "hallucination_prob", 0.2)}};
  r["oracle"] = oracle;

  std::unique_ptr<Teacher> teacher;
  const std::string kind = r["teacher"];
  if (kind == "oracle") {
    teacher = std::make_unique<OracleTeacher>(
        SyntheticOracle(idm, oracle["noise_std"], oracle["hallucination_prob"]), r["seed"].get<std::uint64_t>());
  } else if (kind == "endpoint") {
    json ejson = cfg.value("endpoint", json::object());
    if (a.ep_opt && a.ep_opt->count() > 0) ejson = read_json_file(a.endpoint_config);
    EndpointConfig ecfg;
    try {
      ecfg = EndpointConfig::from_json(ejson);
      r["endpoint"] = ecfg.to_json();
      teacher = std::make_unique<EndpointTeacher>(ecfg);  // fails fast without the key
    } catch (const std::invalid_argument& e) {
      throw UserError(e.what());
    }
  } else {
    throw UserError("unknown teacher '" + kind + "' (expected oracle or endpoint)");
  }

  const std::string scen_path = r["scenarios"];
  require_file(scen_path, "scenario CSV");
  const LabelFiles files = label_files_in(c.out_dir);
  Manifest m("label", c);
  m.begin(r, r["seed"], {{"scenarios", scen_path}},
          {{"labels", files.labels.string()}, {"raw", files.raw.string()}, {"flagged", files.flagged.string()}});
  const std::vector<Scenario> scenarios = read_scenarios_csv(scen_path);
  const auto labeled = label_scenarios(scenarios, *teacher, k, r["requeue"]);
  write_label_files(files, labeled);
  std::size_t flagged = 0;
  for (const auto& l : labeled) flagged += l.flagged ? 1 : 0;
  write_json(fs::path(c.out_dir) / "label_summary.json",
             {{"scenarios", labeled.size()}, {"flagged", flagged}, {"k", k}, {"teacher", kind}});
  m.finish("ok");
  std::cout << "labeled " << labeled.size() << " scenarios (" << flagged << " flagged) into "
            << files.labels.string() << '\n';
  return 0;
}

// ---- train ----------------------------------------------------------------

struct TrainArgs {
  std::string labels;
  std::string mode = "full";
  int epochs = 200;
  double theta_mon = 5000.0, theta_str = 0.9, lr = 1e-3;
  int batch = 256, patience = 20, refresh = 1;
  std::string hidden = "64,64";
  std::string sweep;
  CLI::Option *labels_opt = nullptr, *mode_opt = nullptr, *epochs_opt = nullptr, *tm_opt = nullptr,
              *ts_opt = nullptr, *lr_opt = nullptr, *batch_opt = nullptr, *pat_opt = nullptr,
              *refresh_opt = nullptr, *hidden_opt = nullptr, *sweep_opt = nullptr;
};

struct TrainOutcome {
  TrainResult result;
  double test_wmape = 0.0;
  json stability;
};

TrainOutcome run_training(const std::vector<LabeledScenario>& labeled, const TrainingConfig& tc) {
  const auto splits = split_dataset<LabeledScenario>(labeled, tc.split, derive_seed(tc.seed, 1));
  const auto train_pairs = prepare_training_labels(splits.train, tc.mode, derive_seed(tc.seed, 2));
  const auto val_pairs = vote_pairs(splits.val);
  const auto test_pairs = vote_pairs(splits.test);
  if (train_pairs.empty() || val_pairs.empty() || test_pairs.empty()) {
    throw UserError("not enough labeled (unflagged) scenarios to train");
  }
  TrainOutcome o{train(MlpModel::initialize(tc.model, derive_seed(tc.seed, 3)), train_pairs, val_pairs, tc), 0.0, {}};
  o.test_wmape = held_out_wmape(o.result.model, test_pairs);
  const auto probe = probe_states(10000, derive_seed(tc.seed, 4));
  const MonotonicityAudit audit = monotonicity_audit(o.result.model, probe);
  json stab = {{"audit", {{"rate_v", audit.rate_v}, {"rate_s", audit.rate_s}, {"rate_dv", audit.rate_dv}}}};
  try {
    const auto search = find_equilibria(o.result.model, tc.equilibrium);
    stab["n_equilibria"] = search.points.size();
    stab["min_criterion"] = search.points.empty() ? json(nullptr) : json(search.min_criterion());
  } catch (const AmbiguousEquilibriumError& e) {
    stab["n_equilibria"] = 0;
    stab["min_criterion"] = nullptr;
    stab["note"] = e.what();
  }
  o.stability = stab;
  return o;
}

std::vector<double> parse_sweep(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || text.substr(0, eq) != "theta_str") {
    throw UserError("--sweep expects theta_str=v1,v2,...");
  }
  std::vector<double> out;
  std::stringstream ss(text.substr(eq + 1));
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(parse_double(item, "theta_str"));
    } catch (const std::invalid_argument& e) {
      throw UserError(e.what());
    }
  }
  if (out.empty()) throw UserError("--sweep has no values");
  return out;
}

int cmd_train(const Common& c, const TrainArgs& a) {
  const json cfg = load_config(c);
  json r;
  r["labels"] = pick(a.labels_opt, a.labels, cfg, "labels", (fs::path(c.out_dir) / "labels.jsonl").string());
  TrainingConfig tc;
  try {
    tc = TrainingConfig::from_json(cfg.value("training", json::object()));
    if (a.mode_opt->count()) tc.mode = train_mode_from_string(a.mode);
  } catch (const std::invalid_argument& e) {
    throw UserError(e.what());
  } catch (const json::exception& e) {
    throw UserError(std::string("training config: ") + e.what());
  }
  if (a.epochs_opt->count()) tc.max_epochs = a.epochs;
  if (a.tm_opt->count()) tc.theta_mon = a.theta_mon;
  if (a.ts_opt->count()) tc.theta_str = a.theta_str;
  if (a.lr_opt->count()) tc.learning_rate = a.lr;
  if (a.batch_opt->count()) tc.batch_size = a.batch;
  if (a.pat_opt->count()) tc.patience = a.patience;
  if (a.refresh_opt->count()) tc.refresh_period = a.refresh;
  if (a.hidden_opt->count()) {
    const MlpSpec base = tc.model;
    tc.model = MlpSpec::with_hidden(parse_hidden(a.hidden));
    tc.model.input_shift = base.input_shift;
    tc.model.input_scale = base.input_scale;
    tc.model.output_scale = base.output_scale;
  }
  tc.seed = pick(c.seed_opt, c.seed, cfg.value("training", json::object()), "seed",
                 pick(c.seed_opt, c.seed, cfg, "seed", std::uint64_t{0}));
  try {
    tc.validate();
  } catch (const std::invalid_argument& e) {
    throw UserError(e.what());
  }
  r["training"] = tc.to_json();
  r["seed"] = tc.seed;
  const std::string sweep = pick(a.sweep_opt, a.sweep, cfg, "sweep", std::string());
  if (!sweep.empty()) r["sweep"] = sweep;

  const std::string labels_path = r["labels"];
  require_file(labels_path, "labels file");
  const fs::path out(c.out_dir);
  Manifest m("train", c);
  json outputs = sweep.empty() ? json{{"model", (out / "model.json").string()},
                                      {"epochs", (out / "epochs.csv").string()},
                                      {"summary", (out / "train_summary.json").string()}}
                               : json{{"sweep", (out / "sweep.csv").string()}};
  m.begin(r, tc.seed, {{"labels", labels_path}}, outputs);
  const auto labeled = read_labels_jsonl(labels_path);

  if (!sweep.empty()) {
    const auto values = parse_sweep(sweep);
    std::ofstream csv(out / "sweep.csv", std::ios::binary);
    csv << "theta_str,test_wmape,min_criterion,flagged_unstable\n";
    for (double th : values) {
      TrainingConfig t = tc;
      t.mode = TrainMode::Full;
      t.theta_str = th;
      const auto o = run_training(labeled, t);
      const fs::path sub = out / ("theta_str_" + format_double(th));
      fs::create_directories(sub);
      o.result.model.save(sub / "model.json");
      write_epoch_csv(sub / "epochs.csv", o.result.run);
      char line[160];
      const double mc = o.stability["min_criterion"].is_null() ? std::numeric_limits<double>::quiet_NaN()
                                                               : o.stability["min_criterion"].get<double>();
      std::snprintf(line, sizeof line, "%s,%.9g,%.9g,%d\n", format_double(th).c_str(), o.test_wmape, mc,
                    o.result.run.flagged_unstable ? 1 : 0);
      csv << line;
      std::cout << "theta_str=" << th << " test_wmape=" << o.test_wmape << " min_criterion=" << mc << '\n';
    }
    m.finish("ok");
    return 0;
  }

  const auto o = run_training(labeled, tc);
  o.result.model.save(out / "model.json");
  write_epoch_csv(out / "epochs.csv", o.result.run);
  json summary = o.result.run.summary_json();
  summary["mode"] = to_string(tc.mode);
  summary["test_wmape"] = o.test_wmape;
  summary["stability"] = o.stability;
  summary["training_fingerprint"] = o.result.model.training_fingerprint();
  write_json(out / "train_summary.json", summary);
  m.finish("ok");
  std::cout << "trained (" << to_string(tc.mode) << ", " << o.result.run.epochs.size()
            << " epochs, best " << o.result.run.best_epoch << "), test WMAPE " << o.test_wmape
            << (o.result.run.flagged_unstable ? ", flagged unstable" : "") << '\n';
  return 0;
}

// ---- stability ------------------------------------------------------------

struct StabilityArgs {
  std::string model;
  double grid_step = 0.5;
  std::size_t samples = 10000;
  CLI::Option *model_opt = nullptr, *step_opt = nullptr, *samples_opt = nullptr;
};

EquilibriumSearchConfig equilibrium_cfg(const json& cfg) {
  try {
    auto e = equilibrium_config_from_json(cfg.value("equilibrium", json::object()));
    e.validate();
    return e;
  } catch (const std::invalid_argument& e) {
    throw UserError(e.what());
  }
}

int cmd_stability(const Common& c, const StabilityArgs& a) {
  const json cfg = load_config(c);
  json r;
  r["model"] = pick(a.model_opt, a.model, cfg, "model", (fs::path(c.out_dir) / "model.json").string());
  EquilibriumSearchConfig eq = equilibrium_cfg(cfg);
  if (a.step_opt->count()) eq.v_step = a.grid_step;
  try {
    eq.validate();
  } catch (const std::invalid_argument& e) {
    throw UserError(e.what());
  }
  r["equilibrium"] = to_json(eq);
  r["samples"] = pick(a.samples_opt, a.samples, cfg, "samples", std::size_t{10000});
  r["seed"] = pick(c.seed_opt, c.seed, cfg, "seed", std::uint64_t{0});
  const std::string model_path = r["model"];
  require_file(model_path, "model checkpoint");

  const fs::path out(c.out_dir);
  Manifest m("stability", c);
  m.begin(r, r["seed"], {{"model", model_path}},
          {{"report", (out / "stability.json").string()}, {"equilibria", (out / "equilibria.csv").string()}});
  const auto model = load_model(model_path);
  const std::size_t n = r["samples"];
  const auto samples = n > 0 ? probe_states(n, r["seed"].get<std::uint64_t>()) : std::vector<CfState>{};
  StabilityReport report;
  try {
    report = analyze(*model, eq, samples);
  } catch (const AmbiguousEquilibriumError& e) {
    throw UserError(e.what());
  }
  write_json(out / "stability.json", report.to_json());
  write_equilibria_csv(out / "equilibria.csv", report.search.points);
  m.finish("ok");
  std::cout << report.search.points.size() << " equilibria, min criterion " << report.min_criterion
            << (report.string_stable ? " (string stable)" : " (not string stable)") << '\n';
  return 0;
}

// ---- platoon --------------------------------------------------------------

struct PlatoonArgs {
  std::string model;
  double ve = 5.0, horizon = 100.0, dt = 0.1;
  int n = 100;
  bool no_disturbance = false;
  CLI::Option *model_opt = nullptr, *ve_opt = nullptr, *n_opt = nullptr, *horizon_opt = nullptr,
              *dt_opt = nullptr, *nodist_opt = nullptr;
};

int cmd_platoon(const Common& c, const PlatoonArgs& a) {
  const json cfg = load_config(c);
  const json pc = cfg.value("platoon", json::object());
  json r;
  r["model"] = pick(a.model_opt, a.model, cfg, "model", (fs::path(c.out_dir) / "model.json").string());
  PlatoonConfig p;
  p.n_vehicles = pick(a.n_opt, a.n, pc, "n_vehicles", p.n_vehicles);
  p.v_e = pick(a.ve_opt, a.ve, pc, "v_e", p.v_e);
  p.horizon = pick(a.horizon_opt, a.horizon, pc, "horizon", p.horizon);
  p.dt = pick(a.dt_opt, a.dt, pc, "dt", p.dt);
  p.disturbance_start = pc.value("disturbance_start", p.disturbance_start);
  p.disturbance_decel = pc.value("disturbance_decel", p.disturbance_decel);
  p.phase_duration = pc.value("phase_duration", p.phase_duration);
  p.disturbance = a.nodist_opt->count() ? false : pc.value("disturbance", p.disturbance);
  try {
    p.validate();
  } catch (const std::invalid_argument& e) {
    throw UserError(e.what());
  }
  const EquilibriumSearchConfig eq = equilibrium_cfg(cfg);
  r["platoon"] = {{"n_vehicles", p.n_vehicles},
                  {"v_e", p.v_e},
                  {"horizon", p.horizon},
                  {"dt", p.dt},
                  {"disturbance_start", p.disturbance_start},
                  {"disturbance_decel", p.disturbance_decel},
                  {"phase_duration", p.phase_duration},
                  {"disturbance", p.disturbance}};
  r["equilibrium"] = to_json(eq);
  r["seed"] = pick(c.seed_opt, c.seed, cfg, "seed", std::uint64_t{0});
  const std::string model_path = r["model"];
  require_file(model_path, "model checkpoint");

  const fs::path out(c.out_dir);
  Manifest m("platoon", c);
  m.begin(r, r["seed"], {{"model", model_path}},
          {{"series", (out / "disturbance.csv").string()}, {"report", (out / "platoon.json").string()}});
  const auto model = load_model(model_path);
  DisturbanceSeries s;
  try {
    s = platoon_simulate(*model, p, eq);
  } catch (const NoEquilibriumError& e) {
    throw UserError(std::string("cannot place the platoon at equilibrium: ") + e.what());
  } catch (const AmbiguousEquilibriumError& e) {
    throw UserError(std::string("cannot place the platoon at equilibrium: ") + e.what());
  }
  write_disturbance_csv(out / "disturbance.csv", s);
  const bool stable = s.peaks.size() >= 3 && string_stability_verdict(s) == StringVerdict::Stable;
  double max_diff = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 1; i < s.peak_diffs.size(); ++i) max_diff = std::max(max_diff, s.peak_diffs[i]);
  write_json(out / "platoon.json", {{"v_e", s.v_e},
                                    {"s_e", s.s_e},
                                    {"peaks", s.peaks},
                                    {"peak_diffs", s.peak_diffs},
                                    {"max_peak_diff", max_diff},
                                    {"verdict", stable ? "stable" : "unstable"},
                                    {"collided", s.collided},
                                    {"collision_note", s.collision_note}});
  m.finish(s.collided ? "collision" : "ok");
  std::cout << "platoon at v_e=" << s.v_e << " m/s: " << (stable ? "stable" : "unstable")
            << ", max peak difference " << max_diff << (s.collided ? ", COLLISION: " + s.collision_note : "")
            << '\n';
  return 0;
}

// ---- evaluate -------------------------------------------------------------

struct EvaluateArgs {
  std::string canned, idm_star, schema;
  std::vector<std::string> models, datasets;
  bool calibrate = false;
  CLI::Option *canned_opt = nullptr, *star_opt = nullptr, *schema_opt = nullptr, *models_opt = nullptr,
              *datasets_opt = nullptr, *cal_opt = nullptr;
};

int cmd_evaluate(const Common& c, const EvaluateArgs& a) {
  const json cfg = load_config(c);
  json r;
  r["canned"] = pick(a.canned_opt, a.canned, cfg, "canned", std::string());
  r["models"] = pick(a.models_opt, a.models, cfg, "models", std::vector<std::string>{});
  r["datasets"] = pick(a.datasets_opt, a.datasets, cfg, "datasets", std::vector<std::string>{});
  r["schema"] = pick(a.schema_opt, a.schema, cfg, "schema", std::string());
  r["calibrate"] = pick(a.cal_opt, a.calibrate, cfg, "calibrate", false);
  r["seed"] = pick(c.seed_opt, c.seed, cfg, "seed", std::uint64_t{0});
  json star = a.star_opt->count() ? json(a.idm_star) : cfg.value("idm_star", json());
  r["idm_star"] = star;

  const fs::path out(c.out_dir);
  Manifest m("evaluate", c);
  m.begin(r, r["seed"], {{"canned", r["canned"]}, {"models", r["models"]}, {"datasets", r["datasets"]}},
          {{"leaderboard", (out / "leaderboard.csv").string()}, {"summary", (out / "evaluate_summary.json").string()}});

  std::vector<LeaderboardRow> rows;
  json extra = json::object();
  const std::string canned = r["canned"];
  if (!canned.empty()) {
    require_file(canned, "canned error table");
    if (star.is_null()) throw UserError("--idm-star is required with --canned");
    const CsvTable t = read_csv(canned);
    std::size_t cm, cd, ce;
    try {
      cm = t.column("model");
      cd = t.column("dataset");
      ce = t.column("rmse");
    } catch (const std::exception& e) {
      throw UserError(canned + ": " + e.what());
    }
    std::map<std::string, std::map<std::string, double>> errors;
    for (const auto& row : t.rows) errors[row.at(cm)][row.at(cd)] = parse_double(row.at(ce), "rmse");
    try {
      rows = leaderboard_from_errors(errors, read_idm_star(star));
    } catch (const std::invalid_argument& e) {
      throw UserError(e.what());
    }
  } else {
    const auto model_paths = parse_named(r["models"].get<std::vector<std::string>>(), "--model");
    const auto dataset_paths = parse_named(r["datasets"].get<std::vector<std::string>>(), "--dataset");
    if (dataset_paths.empty()) throw UserError("evaluate needs --canned or at least one --dataset");
    TrajectorySchema schema;
    const std::string schema_path = r["schema"];
    if (!schema_path.empty()) {
      require_file(schema_path, "schema");
      try {
        schema = TrajectorySchema::from_json(read_json_file(schema_path));
      } catch (const std::invalid_argument& e) {
        throw UserError(e.what());
      }
    }
    std::vector<EvalDataset> datasets;
    std::map<std::string, PairSplits> splits;
    for (const auto& [name, path] : dataset_paths) {
      require_file(path, "dataset CSV");
      ExtractionResult ex;
      try {
        ex = extract_pairs(read_csv(path), schema, name);
      } catch (const Error& e) {
        throw UserError(path + ": " + e.what());
      }
      if (ex.pairs.size() < 10) {
        throw UserError("dataset '" + name + "' yields " + std::to_string(ex.pairs.size()) +
                        " pairs; at least 10 are needed for the 60/20/20 split");
      }
      splits[name] = split_pairs(ex.pairs, derive_seed(r["seed"].get<std::uint64_t>(), 0x5e));
      datasets.push_back({name, splits[name].test});
      extra["extraction"][name] = {{"rows", ex.stats.rows},
                                   {"malformed_rows", ex.stats.malformed_rows},
                                   {"segments", ex.stats.segments},
                                   {"too_short", ex.stats.too_short},
                                   {"non_automobile", ex.stats.non_automobile},
                                   {"kept", ex.stats.kept}};
      for (const auto& w : ex.stats.warnings) std::cerr << "warning: " << name << ": " << w << '\n';
    }
    std::vector<std::unique_ptr<CarFollowingModel>> owned;
    std::vector<NamedModel> models;
    std::map<std::string, double> idm_star;
    if (r["calibrate"].get<bool>()) {
      EvolutionConfig ec;
      ec.seed = r["seed"];
      for (const auto& [name, sp] : splits) {
        const auto cal = calibrate_idm(sp.train, IdmBounds{}, ec);
        save_idm(out / ("idm_star_" + name + ".json"), cal.params);
        owned.push_back(std::make_unique<IdmModel>(cal.params));
        idm_star[name] = replay_score(*owned.back(), sp.test).rmse;
        models.push_back({"IDM*_" + name, owned.back().get()});
        extra["calibration"][name] = {{"params", idm_to_json(cal.params)["params"]},
                                      {"train_rmse", cal.score.rmse},
                                      {"train_collisions", cal.score.collisions}};
      }
    }
    if (!star.is_null()) idm_star = read_idm_star(star);
    if (idm_star.empty()) throw UserError("need --idm-star or --calibrate for aggregation");
    for (const auto& [name, path] : model_paths) {
      require_file(path, "model");
      owned.push_back(load_model(path));
      models.push_back({name, owned.back().get()});
    }
    if (models.empty()) throw UserError("no models to evaluate");
    try {
      rows = cross_evaluate(models, datasets, idm_star);
    } catch (const std::invalid_argument& e) {
      throw UserError(e.what());
    }
    extra["idm_star"] = idm_star;
  }
  write_leaderboard_csv(out / "leaderboard.csv", rows);
  json summary = leaderboard_json(rows);
  summary.update(extra);
  write_json(out / "evaluate_summary.json", summary);
  m.finish("ok");
  for (const auto& row : rows) std::printf("%-24s aggregate %.3f\n", row.model.c_str(), row.aggregate);
  return 0;
}

// ---- gradcheck ------------------------------------------------------------

struct GradcheckArgs {
  std::string model;
  std::string hidden = "16,16";
  std::size_t coords = 200, samples = 64;
  double theta_mon = 5000.0, theta_str = 0.9;
  CLI::Option *model_opt = nullptr, *hidden_opt = nullptr, *coords_opt = nullptr, *samples_opt = nullptr,
              *tm_opt = nullptr, *ts_opt = nullptr;
};

int cmd_gradcheck(const Common& c, const GradcheckArgs& a) {
  const json cfg = load_config(c);
  json r;
  r["model"] = pick(a.model_opt, a.model, cfg, "model", std::string());
  r["hidden"] = pick(a.hidden_opt, a.hidden, cfg, "hidden", std::string("16,16"));
  r["coordinates"] = pick(a.coords_opt, a.coords, cfg, "coordinates", std::size_t{200});
  r["samples"] = pick(a.samples_opt, a.samples, cfg, "samples", std::size_t{64});
  r["theta_mon"] = pick(a.tm_opt, a.theta_mon, cfg, "theta_mon", 5000.0);
  r["theta_str"] = pick(a.ts_opt, a.theta_str, cfg, "theta_str", 0.9);
  r["seed"] = pick(c.seed_opt, c.seed, cfg, "seed", std::uint64_t{0});
  const std::uint64_t seed = r["seed"];

  const fs::path out(c.out_dir);
  Manifest m("gradcheck", c);
  m.begin(r, seed, {{"model", r["model"]}}, {{"report", (out / "gradcheck.json").string()}});
  const std::string model_path = r["model"];
  MlpModel model = [&] {
    if (!model_path.empty()) {
      require_file(model_path, "model checkpoint");
      return MlpModel::load(model_path);
    }
    return MlpModel::initialize(MlpSpec::with_hidden(parse_hidden(r["hidden"])), derive_seed(seed, 1));
  }();
  const std::size_t n = r["samples"];
  if (n == 0) throw UserError("samples must be > 0");
  const auto states = probe_states(n, derive_seed(seed, 2));
  std::vector<double> labels(n);
  const IdmParams idm;
  for (std::size_t i = 0; i < n; ++i) labels[i] = clamp_accel(idm_accel(idm, states[i]));
  std::vector<CfState> eq;
  for (double v = 2.0; v <= 28.0; v += 2.0) eq.push_back({v, idm_equilibrium_spacing(idm, v), 0.0});
  PenaltyWeights w;
  w.theta_mon = r["theta_mon"];
  w.theta_str = r["theta_str"];
  GradCheckOptions opts;
  opts.coordinates = r["coordinates"];
  opts.seed = derive_seed(seed, 3);
  const GradCheckReport rep = check_param_grads(model, states, labels, eq, w, opts);
  json worst = json::array();
  for (const auto& e : rep.worst) {
    worst.push_back({{"index", e.index}, {"analytic", e.analytic}, {"numeric", e.numeric}, {"rel_error", e.rel_error}});
  }
  write_json(out / "gradcheck.json", {{"checked", rep.checked},
                                      {"failures", rep.failures},
                                      {"max_rel_error", rep.max_rel_error},
                                      {"passed", rep.passed()},
                                      {"loss",
                                       {{"mse", rep.loss.mse},
                                        {"c_mon", rep.loss.c_mon},
                                        {"c_str", rep.loss.c_str},
                                        {"total", rep.loss.total}}},
                                      {"worst", worst}});
  m.finish(rep.passed() ? "ok" : "failed");
  std::printf("gradcheck: %zu coordinates, %zu failures, max rel error %.3g (C_mon %.3g, C_str %.3g)\n",
              rep.checked, rep.failures, rep.max_rel_error, rep.loss.c_mon, rep.loss.c_str);
  if (!rep.passed()) throw InternalError("analytic gradients disagree with finite differences");
  return 0;
}

void add_common(CLI::App* sub, Common& c) {
  c.seed_opt = sub->add_option("--seed", c.seed, "Random seed");
  sub->add_option("--config", c.config_path, "JSON config or a previous run manifest");
  sub->add_option("--out-dir", c.out_dir, "Output directory")->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cfdistill: distill car-following models from teacher labels"};
  app.set_version_flag("--version", CFDISTILL_VERSION);
  app.require_subcommand(1);

  Common common;
  GenerateArgs ga;
  auto* gen = app.add_subcommand("generate", "Sample car-following scenarios");
  add_common(gen, common);
  ga.count_opt = gen->add_option("--count", ga.count, "Number of scenarios");

  LabelArgs la;
  auto* lab = app.add_subcommand("label", "Query a teacher K times per scenario and vote");
  add_common(lab, common);
  la.scen_opt = lab->add_option("--scenarios", la.scenarios, "Scenario CSV");
  la.teacher_opt = lab->add_option("--teacher", la.teacher, "oracle or endpoint");
  la.k_opt = lab->add_option("--k", la.k, "Responses per scenario");
  la.noise_opt = lab->add_option("--noise-std", la.noise_std, "Oracle noise std (m/s^2)");
  la.hall_opt = lab->add_option("--hallucination-prob", la.hallucination, "Oracle hallucination probability");
  la.ep_opt = lab->add_option("--endpoint-config", la.endpoint_config, "Endpoint settings JSON");
  la.requeue_opt = lab->add_flag("--requeue", la.requeue, "Retry scenarios without a valid vote once");

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Train the student network");
  add_common(tr, common);
  ta.labels_opt = tr->add_option("--labels", ta.labels, "labels.jsonl");
  ta.mode_opt = tr->add_option("--mode", ta.mode, "basic, random, consist, mono or full");
  ta.epochs_opt = tr->add_option("--epochs", ta.epochs, "Maximum epochs");
  ta.tm_opt = tr->add_option("--theta-mon", ta.theta_mon, "Monotonicity weight");
  ta.ts_opt = tr->add_option("--theta-str", ta.theta_str, "String-stability weight");
  ta.lr_opt = tr->add_option("--lr", ta.lr, "Learning rate");
  ta.batch_opt = tr->add_option("--batch-size", ta.batch, "Minibatch size");
  ta.pat_opt = tr->add_option("--patience", ta.patience, "Early-stopping patience (epochs)");
  ta.refresh_opt = tr->add_option("--refresh", ta.refresh, "Equilibrium refresh period (epochs)");
  ta.hidden_opt = tr->add_option("--hidden", ta.hidden, "Hidden widths, e.g. 64,64");
  ta.sweep_opt = tr->add_option("--sweep", ta.sweep, "theta_str=v1,v2,... (full mode)");

  StabilityArgs sa;
  auto* st = app.add_subcommand("stability", "Equilibria, local and string stability of a model");
  add_common(st, common);
  sa.model_opt = st->add_option("--model", sa.model, "Model checkpoint");
  sa.step_opt = st->add_option("--grid-step", sa.grid_step, "Equilibrium speed grid step (m/s)");
  sa.samples_opt = st->add_option("--samples", sa.samples, "States for the monotonicity audit");

  PlatoonArgs pa;
  auto* pl = app.add_subcommand("platoon", "Disturbance propagation in a homogeneous platoon");
  add_common(pl, common);
  pa.model_opt = pl->add_option("--model", pa.model, "Model checkpoint");
  pa.ve_opt = pl->add_option("--ve", pa.ve, "Equilibrium speed (m/s)");
  pa.n_opt = pl->add_option("--n", pa.n, "Vehicles");
  pa.horizon_opt = pl->add_option("--horizon", pa.horizon, "Simulated time (s)");
  pa.dt_opt = pl->add_option("--dt", pa.dt, "Step (s)");
  pa.nodist_opt = pl->add_flag("--no-disturbance", pa.no_disturbance, "Leader holds v_e");

  EvaluateArgs ea;
  auto* ev = app.add_subcommand("evaluate", "Cross-dataset replay evaluation and aggregation");
  add_common(ev, common);
  ea.canned_opt = ev->add_option("--canned", ea.canned, "CSV model,dataset,rmse of precomputed errors");
  ea.star_opt = ev->add_option("--idm-star", ea.idm_star, "JSON {dataset: IDM* rmse}");
  ea.schema_opt = ev->add_option("--schema", ea.schema, "Column mapping JSON");
  ea.models_opt = ev->add_option("--model", ea.models, "name=checkpoint (repeatable)");
  ea.datasets_opt = ev->add_option("--dataset", ea.datasets, "name=csv (repeatable)");
  ea.cal_opt = ev->add_flag("--calibrate", ea.calibrate, "Calibrate IDM* per dataset");

  GradcheckArgs gc;
  auto* gcmd = app.add_subcommand("gradcheck", "Compare analytic and numeric loss gradients");
  add_common(gcmd, common);
  gc.model_opt = gcmd->add_option("--model", gc.model, "MLP checkpoint (default: random init)");
  gc.hidden_opt = gcmd->add_option("--hidden", gc.hidden, "Hidden widths for a random model");
  gc.coords_opt = gcmd->add_option("--coords", gc.coords, "Parameters to check (0 = all)");
  gc.samples_opt = gcmd->add_option("--samples", gc.samples, "Batch size");
  gc.tm_opt = gcmd->add_option("--theta-mon", gc.theta_mon, "Monotonicity weight");
  gc.ts_opt = gcmd->add_option("--theta-str", gc.theta_str, "String-stability weight");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  CLI::App* chosen = app.get_subcommands().front();
  // add_common ran once per subcommand; point at the options that were parsed.
  common.seed_opt = chosen->get_option("--seed");
  std::string name = chosen->get_name();
  try {
    if (name == "generate") return cmd_generate(common, ga);
    if (name == "label") return cmd_label(common, la);
    if (name == "train") return cmd_train(common, ta);
    if (name == "stability") return cmd_stability(common, sa);
    if (name == "platoon") return cmd_platoon(common, pa);
    if (name == "evaluate") return cmd_evaluate(common, ea);
    if (name == "gradcheck") return cmd_gradcheck(common, gc);
  } catch (const UserError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const InternalError& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 2;
  } catch (const DivergenceError& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 2;
  }
  return 2;
}
