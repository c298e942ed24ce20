#include <fstream>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "cfdistill/data_eval.hpp"
#include "cfdistill/mlp.hpp"
#include "cfdistill/model_io.hpp"
#include "cfdistill/scenario.hpp"
#include "cfdistill/stability.hpp"
#include "cfdistill/teacher.hpp"
#include "cfdistill/traffic_sim.hpp"
#include "cfdistill/trainer.hpp"

namespace py = pybind11;
using namespace cfdistill;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

std::vector<CfState> states_from(const Array& a) {
  if (a.ndim() != 2 || a.shape(1) != 3) throw std::invalid_argument("states must have shape (n, 3): v, s, dv");
  auto r = a.unchecked<2>();
  std::vector<CfState> out(static_cast<std::size_t>(a.shape(0)));
  for (py::ssize_t i = 0; i < a.shape(0); ++i) out[static_cast<std::size_t>(i)] = {r(i, 0), r(i, 1), r(i, 2)};
  return out;
}

Array states_to(const std::vector<CfState>& s) {
  Array out({static_cast<py::ssize_t>(s.size()), py::ssize_t{3}});
  auto w = out.mutable_unchecked<2>();
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto k = static_cast<py::ssize_t>(i);
    w(k, 0) = s[i].v;
    w(k, 1) = s[i].s;
    w(k, 2) = s[i].dv;
  }
  return out;
}

std::vector<double> vec_from(const Array& a) {
  if (a.ndim() != 1) throw std::invalid_argument("expected a 1-D array");
  return {a.data(), a.data() + a.shape(0)};
}

Array vec_to(const std::vector<double>& v) {
  Array out(static_cast<py::ssize_t>(v.size()));
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

nlohmann::json parse_json(const std::string& text) {
  return text.empty() ? nlohmann::json::object() : nlohmann::json::parse(text);
}

py::dict loss_dict(const LossComponents& l) {
  py::dict d;
  d["mse"] = l.mse;
  d["c_mon"] = l.c_mon;
  d["c_str"] = l.c_str;
  d["total"] = l.total;
  d["n_equilibria"] = l.n_equilibria;
  d["min_criterion"] = l.min_criterion;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Car-following model distillation core";

  py::register_exception<Error>(m, "CfError", PyExc_RuntimeError);
  py::register_exception<NoEquilibriumError>(m, "NoEquilibriumError", PyExc_RuntimeError);
  py::register_exception<AmbiguousEquilibriumError>(m, "AmbiguousEquilibriumError", PyExc_RuntimeError);
  py::register_exception<NoValidVotesError>(m, "NoValidVotesError", PyExc_ValueError);
  py::register_exception<UndefinedMetricError>(m, "UndefinedMetricError", PyExc_ValueError);
  py::register_exception<DivergenceError>(m, "DivergenceError", PyExc_RuntimeError);

  py::class_<IdmParams>(m, "IdmParams")
      .def(py::init([](double v0, double T, double s0, double a_max, double b) {
             IdmParams p{v0, T, s0, a_max, b};
             p.validate();
             return p;
           }),
           py::arg("v0") = 30.0, py::arg("T") = 1.5, py::arg("s0") = 2.0, py::arg("a_max") = 1.0,
           py::arg("b") = 1.5)
      .def_readwrite("v0", &IdmParams::v0)
      .def_readwrite("T", &IdmParams::T)
      .def_readwrite("s0", &IdmParams::s0)
      .def_readwrite("a_max", &IdmParams::a_max)
      .def_readwrite("b", &IdmParams::b)
      .def("__repr__", [](const IdmParams& p) {
        return "IdmParams(v0=" + format_double(p.v0) + ", T=" + format_double(p.T) + ", s0=" +
               format_double(p.s0) + ", a_max=" + format_double(p.a_max) + ", b=" + format_double(p.b) + ")";
      });

  py::class_<CarFollowingModel, std::shared_ptr<CarFollowingModel>>(m, "CarFollowingModel")
      .def("accel", [](const CarFollowingModel& self, double v, double s, double dv) { return self.accel({v, s, dv}); },
           py::arg("v"), py::arg("s"), py::arg("dv"))
      .def("input_grad",
           [](const CarFollowingModel& self, double v, double s, double dv) {
             const InputGrad g = self.input_grad({v, s, dv});
             return py::make_tuple(g.da_dv, g.da_ds, g.da_ddv);
           },
           py::arg("v"), py::arg("s"), py::arg("dv"), "(da/dv, da/ds, da/ddv)")
      .def("accel_batch", [](const CarFollowingModel& self, const Array& states) {
        const auto s = states_from(states);
        std::vector<double> out(s.size());
        self.accel_batch(s, out);
        return vec_to(out);
      });

  py::class_<IdmModel, CarFollowingModel, std::shared_ptr<IdmModel>>(m, "IdmModel").def(py::init<IdmParams>(), py::arg("params") = IdmParams{});

  py::class_<MlpModel, CarFollowingModel, std::shared_ptr<MlpModel>>(m, "MlpModel")
      .def_static("initialize",
                  [](std::vector<int> hidden, std::uint64_t seed) {
                    return MlpModel::initialize(MlpSpec::with_hidden(std::move(hidden)), seed);
                  },
                  py::arg("hidden") = std::vector<int>{64, 64}, py::arg("seed") = 0)
      .def_static("load", &MlpModel::load)
      .def("save", &MlpModel::save)
      .def_property_readonly("num_params", &MlpModel::num_params)
      .def_property_readonly("widths", [](const MlpModel& self) { return self.spec().widths; })
      .def_property_readonly("training_fingerprint", &MlpModel::training_fingerprint)
      .def("parameters", [](const MlpModel& self) {
        const Eigen::VectorXd p = self.parameters();
        return vec_to(std::vector<double>(p.data(), p.data() + p.size()));
      })
      .def("set_parameters", [](MlpModel& self, const Array& flat) {
        const auto v = vec_from(flat);
        self.set_parameters(Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
      });

  m.def("load_model", [](const std::filesystem::path& p) { return std::shared_ptr<CarFollowingModel>(load_model(p)); },
        "Load an MLP checkpoint or an IDM parameter file");

  // Kinematics and IDM.
  m.def("ballistic_step",
        [](double v, double x, double a, double dt) {
          const Kinematics k = ballistic_step(v, x, a, dt);
          return py::make_tuple(k.v, k.x);
        },
        py::arg("v"), py::arg("x"), py::arg("a"), py::arg("dt"), "Returns (v_next, x_next)");
  m.def("clamp_accel", &clamp_accel);
  m.def("idm_accel", [](const IdmParams& p, double v, double s, double dv) { return idm_accel(p, {v, s, dv}); });
  m.def("idm_equilibrium_spacing", &idm_equilibrium_spacing);

  // Scenarios and teacher.
  m.def("generate_scenarios",
        [](std::size_t count, std::uint64_t seed) {
          const auto set = generate_scenarios(default_scenario_specs(), count, seed);
          std::vector<CfState> s;
          for (const auto& sc : set.scenarios) s.push_back(sc.state);
          return states_to(s);
        },
        py::arg("count"), py::arg("seed") = 0, "Array (count, 3) of v, s, dv");
  m.def("build_prompt", [](double v, double s, double dv) {
    const PromptBundle p = build_prompt({v, s, dv});
    return py::make_tuple(p.system_message, p.user_message);
  });
  m.def("parse_acceleration", [](const std::string& text) { return parse_acceleration(text); });
  m.def("majority_vote",
        [](const std::vector<double>& accels) {
          const VoteResult r = majority_vote(accels);
          return py::make_tuple(r.label, r.vote_count);
        },
        "Returns (label, vote_count)");
  m.def("oracle_labels",
        [](const Array& states, int k, double noise_std, double hallucination_prob, std::uint64_t seed,
           const IdmParams& params) {
          const auto s = states_from(states);
          std::vector<Scenario> sc(s.size());
          for (std::size_t i = 0; i < s.size(); ++i) sc[i] = {static_cast<std::int64_t>(i), s[i]};
          OracleTeacher teacher(SyntheticOracle(params, noise_std, hallucination_prob), seed);
          const auto labeled = label_scenarios(sc, teacher, k);
          std::vector<double> labels(labeled.size()), clean(labeled.size());
          const SyntheticOracle oracle(params, 0.0, 0.0);
          for (std::size_t i = 0; i < labeled.size(); ++i) {
            labels[i] = labeled[i].flagged ? std::nan("") : labeled[i].label;
            clean[i] = oracle.clean(s[i]);
          }
          return py::make_tuple(vec_to(labels), vec_to(clean));
        },
        py::arg("states"), py::arg("k") = 5, py::arg("noise_std") = 0.0, py::arg("hallucination_prob") = 0.0,
        py::arg("seed") = 0, py::arg("params") = IdmParams{}, "Returns (vote labels, clean oracle values)");

  // Loss, gradients and gradient check.
  m.def("loss_and_grads",
        [](const MlpModel& model, const Array& states, const Array& labels, const Array& equilibria,
           double theta_mon, double theta_str) {
          const auto s = states_from(states);
          const auto y = vec_from(labels);
          const auto e = equilibria.size() ? states_from(equilibria) : std::vector<CfState>{};
          PenaltyWeights w;
          w.theta_mon = theta_mon;
          w.theta_str = theta_str;
          const LossAndGrad lg = loss_and_param_grads(model, s, y, e, w, true);
          return py::make_tuple(loss_dict(lg.loss),
                                vec_to(std::vector<double>(lg.grad.data(), lg.grad.data() + lg.grad.size())));
        },
        py::arg("model"), py::arg("states"), py::arg("labels"), py::arg("equilibria"), py::arg("theta_mon") = 0.0,
        py::arg("theta_str") = 0.0);
  m.def("check_param_grads",
        [](const MlpModel& model, const Array& states, const Array& labels, const Array& equilibria,
           double theta_mon, double theta_str, std::size_t coordinates, std::uint64_t seed) {
          PenaltyWeights w;
          w.theta_mon = theta_mon;
          w.theta_str = theta_str;
          GradCheckOptions o;
          o.coordinates = coordinates;
          o.seed = seed;
          const auto e = equilibria.size() ? states_from(equilibria) : std::vector<CfState>{};
          const auto r = check_param_grads(model, states_from(states), vec_from(labels), e, w, o);
          py::dict d;
          d["checked"] = r.checked;
          d["failures"] = r.failures;
          d["max_rel_error"] = r.max_rel_error;
          d["loss"] = loss_dict(r.loss);
          return d;
        },
        py::arg("model"), py::arg("states"), py::arg("labels"), py::arg("equilibria"), py::arg("theta_mon") = 5000.0,
        py::arg("theta_str") = 0.9, py::arg("coordinates") = 200, py::arg("seed") = 0);

  // Stability.
  m.def("string_stability_criterion", &string_stability_criterion);
  m.def("local_stability_check", &local_stability_check);
  m.def("find_equilibria",
        [](const CarFollowingModel& model, const std::string& config_json) {
          const auto cfg = equilibrium_config_from_json(parse_json(config_json));
          const auto search = find_equilibria(model, cfg);
          py::list out;
          for (const auto& p : search.points) {
            py::dict d;
            d["v_e"] = p.v_e;
            d["s_e"] = p.s_e;
            d["residual"] = p.residual;
            d["f_v"] = p.f_v;
            d["f_s"] = p.f_s;
            d["f_dv"] = p.f_dv;
            d["ss_criterion"] = p.ss_criterion;
            out.append(d);
          }
          return out;
        },
        py::arg("model"), py::arg("config_json") = "");
  m.def("monotonicity_audit",
        [](const CarFollowingModel& model, const Array& states) {
          const auto a = monotonicity_audit(model, states_from(states));
          return py::make_tuple(a.rate_v, a.rate_s, a.rate_dv);
        },
        "Returns violation rates (v, s, dv)");

  // Simulation and metrics.
  m.def("platoon_simulate",
        [](const CarFollowingModel& model, double v_e, int n, double horizon, double dt, bool disturbance) {
          PlatoonConfig cfg;
          cfg.v_e = v_e;
          cfg.n_vehicles = n;
          cfg.horizon = horizon;
          cfg.dt = dt;
          cfg.disturbance = disturbance;
          const auto s = platoon_simulate(model, cfg);
          py::dict d;
          d["s_e"] = s.s_e;
          d["peaks"] = vec_to(s.peaks);
          d["peak_diffs"] = vec_to(s.peak_diffs);
          d["collided"] = s.collided;
          d["stable"] = s.peaks.size() >= 3 && string_stability_verdict(s) == StringVerdict::Stable;
          return d;
        },
        py::arg("model"), py::arg("v_e") = 5.0, py::arg("n") = 100, py::arg("horizon") = 100.0, py::arg("dt") = 0.1,
        py::arg("disturbance") = true);
  m.def("replay_simulate",
        [](const CarFollowingModel& model, const Array& leader_x, const Array& leader_v, const Array& follower_x,
           const Array& follower_v, double dt, double leader_length) {
          Trajectory t;
          t.dt = dt;
          t.leader_x = vec_from(leader_x);
          t.leader_v = vec_from(leader_v);
          t.follower_x = vec_from(follower_x);
          t.follower_v = vec_from(follower_v);
          t.leader_length = leader_length;
          const SimResult r = replay_simulate(model, t);
          py::dict d;
          d["spacing"] = vec_to(r.spacing);
          d["speed"] = vec_to(r.speed);
          d["collided"] = r.collided;
          d["collision_time"] = r.collision_time;
          return d;
        },
        py::arg("model"), py::arg("leader_x"), py::arg("leader_v"), py::arg("follower_x"), py::arg("follower_v"),
        py::arg("dt") = 0.1, py::arg("leader_length") = 0.0);
  m.def("wmape", [](const Array& p, const Array& a) { return wmape(vec_from(p), vec_from(a)); });
  m.def("aggregate_errors", &aggregate_errors, py::arg("rmse"), py::arg("idm_star"));

  // Training.
  m.def("train",
        [](const Array& states, const Array& labels, const std::string& config_json) {
          const auto s = states_from(states);
          const auto y = vec_from(labels);
          if (s.size() != y.size()) throw std::invalid_argument("states and labels differ in length");
          const TrainingConfig cfg = TrainingConfig::from_json(parse_json(config_json));
          std::vector<TrainingPair> pairs(s.size());
          for (std::size_t i = 0; i < s.size(); ++i) pairs[i] = {s[i], y[i]};
          const auto sp = split_dataset<TrainingPair>(pairs, cfg.split, derive_seed(cfg.seed, 1));
          const TrainResult r = [&] {
            py::gil_scoped_release release;
            return train(MlpModel::initialize(cfg.model, derive_seed(cfg.seed, 3)), sp.train, sp.val, cfg);
          }();
          py::list epochs;
          for (const auto& e : r.run.epochs) {
            py::dict d;
            d["epoch"] = e.epoch;
            d["mse"] = e.mse;
            d["c_mon"] = e.c_mon;
            d["c_str"] = e.c_str;
            d["total"] = e.total;
            d["val_mse"] = e.val_mse;
            d["n_equilibria"] = e.n_equilibria;
            d["min_criterion"] = e.min_criterion;
            epochs.append(d);
          }
          py::dict info;
          info["epochs"] = epochs;
          info["best_epoch"] = r.run.best_epoch;
          info["stop_reason"] = r.run.stop_reason;
          info["flagged_unstable"] = r.run.flagged_unstable;
          info["test_wmape"] = held_out_wmape(r.model, sp.test);
          return py::make_tuple(r.model, info);
        },
        py::arg("states"), py::arg("labels"), py::arg("config_json") = "",
        "Splits (states, labels), trains, and returns (model, run info)");

  // Data evaluation.
  m.def("calibrate_idm_on_csv",
        [](const std::string& csv_path, const std::string& schema_json, std::uint64_t seed, int generations) {
          const auto schema = TrajectorySchema::from_json(parse_json(schema_json));
          const auto ex = extract_pairs(read_csv(csv_path), schema, "data");
          EvolutionConfig ec;
          ec.seed = seed;
          ec.generations = generations;
          const auto r = calibrate_idm(ex.pairs, IdmBounds{}, ec);
          return py::make_tuple(r.params, r.score.rmse, r.score.collisions, ex.pairs.size());
        },
        py::arg("csv_path"), py::arg("schema_json") = "", py::arg("seed") = 0, py::arg("generations") = 100,
        "Returns (params, rmse, collisions, pairs)");
  m.def("write_synthetic_dataset",
        [](const std::string& path, const IdmParams& follower, std::size_t pairs, std::uint64_t seed) {
          SyntheticDatasetConfig c;
          c.follower = follower;
          c.pairs = pairs;
          c.seed = seed;
          write_csv(path, generate_synthetic_dataset(c));
        },
        py::arg("path"), py::arg("follower") = IdmParams{}, py::arg("pairs") = 12, py::arg("seed") = 0);
}
