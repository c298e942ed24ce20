#include "cfdistill/mlp.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "cfdistill/rng.hpp"

namespace cfdistill {

using Eigen::MatrixXd;
using Eigen::RowVectorXd;
using Eigen::VectorXd;

std::string to_string(Activation a) { return a == Activation::Tanh ? "tanh" : "identity"; }

Activation activation_from_string(const std::string& name) {
  if (name == "tanh") return Activation::Tanh;
  if (name == "identity" || name == "linear") return Activation::Identity;
  throw std::invalid_argument("unknown activation '" + name + "'");
}

void MlpSpec::validate() const {
  if (widths.size() < 2) throw std::invalid_argument("MlpSpec: need at least input and output widths");
  if (widths.front() != 3) throw std::invalid_argument("MlpSpec: input width must be 3");
  if (widths.back() != 1) throw std::invalid_argument("MlpSpec: output width must be 1");
  for (int w : widths) {
    if (w <= 0) throw std::invalid_argument("MlpSpec: layer widths must be positive");
  }
  if (activations.size() != widths.size() - 2) {
    throw std::invalid_argument("MlpSpec: need one activation per hidden layer");
  }
  for (int i = 0; i < 3; ++i) {
    if (!std::isfinite(input_shift[i]) || !std::isfinite(input_scale[i]) || input_scale[i] == 0.0) {
      throw std::invalid_argument("MlpSpec: bad input normalization");
    }
  }
  if (!std::isfinite(output_scale) || output_scale == 0.0) {
    throw std::invalid_argument("MlpSpec: bad output scale");
  }
}

MlpSpec MlpSpec::with_hidden(std::vector<int> hidden, Activation act) {
  MlpSpec spec;
  spec.widths.clear();
  spec.widths.push_back(3);
  spec.widths.insert(spec.widths.end(), hidden.begin(), hidden.end());
  spec.widths.push_back(1);
  spec.activations.assign(hidden.size(), act);
  return spec;
}

MlpModel::MlpModel(MlpSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  for (std::size_t l = 0; l + 1 < spec_.widths.size(); ++l) {
    layers_.push_back({MatrixXd::Zero(spec_.widths[l + 1], spec_.widths[l]),
                       VectorXd::Zero(spec_.widths[l + 1])});
  }
}

MlpModel MlpModel::initialize(MlpSpec spec, std::uint64_t seed) {
  MlpModel model(std::move(spec));
  Rng rng(seed);
  for (auto& layer : model.layers_) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(layer.W.cols()));
    for (Eigen::Index c = 0; c < layer.W.cols(); ++c) {
      for (Eigen::Index r = 0; r < layer.W.rows(); ++r) layer.W(r, c) = rng.uniform(-bound, bound);
    }
    for (Eigen::Index r = 0; r < layer.b.size(); ++r) layer.b(r) = rng.uniform(-bound, bound);
  }
  return model;
}

namespace {

/// Forward values of the network on a batch (one sample per column),
/// optionally with forward-mode tangents along the three normalized input
/// directions.
struct Tape {
  MatrixXd x;                                // 3 x B normalized inputs
  std::vector<MatrixXd> z, h, g1, g2;        // per hidden layer
  std::vector<std::array<MatrixXd, 3>> zd, hd;  // tangents per hidden layer
  RowVectorXd y;                             // network output (before output_scale)
  std::array<RowVectorXd, 3> yd;             // d y / d x_j
  bool tangents = false;
};

void activate(Activation act, const MatrixXd& z, MatrixXd& h, MatrixXd& g1, MatrixXd& g2) {
  if (act == Activation::Tanh) {
    h = z.array().tanh().matrix();
    g1 = (1.0 - h.array().square()).matrix();
    g2 = (-2.0 * h.array() * g1.array()).matrix();
  } else {
    h = z;
    g1 = MatrixXd::Ones(z.rows(), z.cols());
    g2 = MatrixXd::Zero(z.rows(), z.cols());
  }
}

MatrixXd unit_direction(int j, Eigen::Index batch) {
  MatrixXd e = MatrixXd::Zero(3, batch);
  e.row(j).setOnes();
  return e;
}

MatrixXd normalize(const MlpSpec& spec, std::span<const CfState> states) {
  MatrixXd x(3, static_cast<Eigen::Index>(states.size()));
  for (std::size_t i = 0; i < states.size(); ++i) {
    const auto c = static_cast<Eigen::Index>(i);
    x(0, c) = (states[i].v - spec.input_shift[0]) / spec.input_scale[0];
    x(1, c) = (states[i].s - spec.input_shift[1]) / spec.input_scale[1];
    x(2, c) = (states[i].dv - spec.input_shift[2]) / spec.input_scale[2];
  }
  return x;
}

Tape run_forward(const MlpModel& model, std::span<const CfState> states, bool tangents) {
  const auto& spec = model.spec();
  const auto& layers = model.layers();
  const std::size_t n_hidden = layers.size() - 1;
  const Eigen::Index batch = static_cast<Eigen::Index>(states.size());

  Tape t;
  t.tangents = tangents;
  t.x = normalize(spec, states);
  t.z.resize(n_hidden);
  t.h.resize(n_hidden);
  t.g1.resize(n_hidden);
  t.g2.resize(n_hidden);
  if (tangents) {
    t.zd.resize(n_hidden);
    t.hd.resize(n_hidden);
  }

  for (std::size_t l = 0; l < n_hidden; ++l) {
    const MatrixXd& prev = l == 0 ? t.x : t.h[l - 1];
    t.z[l] = (layers[l].W * prev).colwise() + layers[l].b;
    activate(spec.activations[l], t.z[l], t.h[l], t.g1[l], t.g2[l]);
    if (tangents) {
      for (int j = 0; j < 3; ++j) {
        if (l == 0) {
          t.zd[l][j] = layers[l].W.col(j).replicate(1, batch);
        } else {
          t.zd[l][j] = layers[l].W * t.hd[l - 1][j];
        }
        t.hd[l][j] = t.g1[l].cwiseProduct(t.zd[l][j]);
      }
    }
  }

  const DenseLayer& out = layers.back();
  const MatrixXd& last = n_hidden == 0 ? t.x : t.h.back();
  t.y = (out.W * last).row(0).array() + out.b(0);
  if (tangents) {
    for (int j = 0; j < 3; ++j) {
      if (n_hidden == 0) {
        t.yd[j] = RowVectorXd::Constant(batch, out.W(0, j));
      } else {
        t.yd[j] = out.W * t.hd.back()[j];
      }
    }
  }
  return t;
}

/// Accumulates dL/dtheta into `grad` given output adjoints dL/dy (`c0`) and
/// dL/dyd_j (`cd`). `second_order` = false skips the tangent adjoints.
void run_backward(const MlpModel& model, const Tape& t, const RowVectorXd& c0,
                  const std::array<RowVectorXd, 3>& cd, bool second_order, VectorXd& grad) {
  const auto& layers = model.layers();
  const std::size_t n_layers = layers.size();
  const std::size_t n_hidden = n_layers - 1;
  const Eigen::Index batch = t.x.cols();

  // Offsets of each layer's block in the flat vector.
  std::vector<Eigen::Index> offset(n_layers);
  Eigen::Index running = 0;
  for (std::size_t l = 0; l < n_layers; ++l) {
    offset[l] = running;
    running += layers[l].W.size() + layers[l].b.size();
  }

  const auto add_weight_grad = [&](std::size_t l, const MatrixXd& gW, double gb_scalar,
                                   const VectorXd* gb) {
    Eigen::Map<MatrixXd> mapW(grad.data() + offset[l], layers[l].W.rows(), layers[l].W.cols());
    mapW += gW;
    Eigen::Map<VectorXd> mapb(grad.data() + offset[l] + layers[l].W.size(), layers[l].b.size());
    if (gb != nullptr) {
      mapb += *gb;
    } else {
      mapb(0) += gb_scalar;
    }
  };

  std::array<MatrixXd, 3> unit;
  if (second_order && n_hidden == 0) {
    for (int j = 0; j < 3; ++j) unit[j] = unit_direction(j, batch);
  }

  // Output layer.
  {
    const DenseLayer& out = layers.back();
    const MatrixXd& prev = n_hidden == 0 ? t.x : t.h.back();
    MatrixXd gW = c0 * prev.transpose();
    if (second_order) {
      for (int j = 0; j < 3; ++j) {
        if (n_hidden == 0) {
          gW(0, j) += cd[j].sum();
        } else {
          gW += cd[j] * t.hd.back()[j].transpose();
        }
      }
    }
    add_weight_grad(n_layers - 1, gW, c0.sum(), nullptr);
    if (n_hidden == 0) return;

    MatrixXd hbar = out.W.transpose() * c0;
    std::array<MatrixXd, 3> hdbar;
    if (second_order) {
      for (int j = 0; j < 3; ++j) hdbar[j] = out.W.transpose() * cd[j];
    }

    for (std::size_t l = n_hidden; l-- > 0;) {
      MatrixXd zbar = hbar.cwiseProduct(t.g1[l]);
      std::array<MatrixXd, 3> zdbar;
      if (second_order) {
        for (int j = 0; j < 3; ++j) {
          zbar.array() += hdbar[j].array() * t.g2[l].array() * t.zd[l][j].array();
          zdbar[j] = hdbar[j].cwiseProduct(t.g1[l]);
        }
      }
      const MatrixXd& prev_h = l == 0 ? t.x : t.h[l - 1];
      MatrixXd gW = zbar * prev_h.transpose();
      if (second_order) {
        for (int j = 0; j < 3; ++j) {
          if (l == 0) {
            gW.col(j) += zdbar[j].rowwise().sum();
          } else {
            gW += zdbar[j] * t.hd[l - 1][j].transpose();
          }
        }
      }
      const VectorXd gb = zbar.rowwise().sum();
      add_weight_grad(l, gW, 0.0, &gb);
      if (l == 0) break;
      hbar = layers[l].W.transpose() * zbar;
      if (second_order) {
        for (int j = 0; j < 3; ++j) hdbar[j] = layers[l].W.transpose() * zdbar[j];
      }
    }
  }
}

InputGrad physical_grad(const MlpSpec& spec, const Tape& t, Eigen::Index col) {
  return {spec.output_scale / spec.input_scale[0] * t.yd[0](col),
          spec.output_scale / spec.input_scale[1] * t.yd[1](col),
          spec.output_scale / spec.input_scale[2] * t.yd[2](col)};
}

}  // namespace

double MlpModel::accel(const CfState& state) const {
  double out = 0.0;
  accel_batch(std::span<const CfState>(&state, 1), std::span<double>(&out, 1));
  return out;
}

InputGrad MlpModel::input_grad(const CfState& state) const {
  InputGrad out;
  input_grad_batch(std::span<const CfState>(&state, 1), std::span<InputGrad>(&out, 1));
  return out;
}

void MlpModel::accel_batch(std::span<const CfState> states, std::span<double> out) const {
  if (states.empty()) return;
  const Tape t = run_forward(*this, states, false);
  for (std::size_t i = 0; i < states.size(); ++i) {
    out[i] = spec_.output_scale * t.y(static_cast<Eigen::Index>(i));
  }
}

void MlpModel::input_grad_batch(std::span<const CfState> states, std::span<InputGrad> out) const {
  if (states.empty()) return;
  const Tape t = run_forward(*this, states, true);
  for (std::size_t i = 0; i < states.size(); ++i) {
    out[i] = physical_grad(spec_, t, static_cast<Eigen::Index>(i));
  }
}

std::size_t MlpModel::num_params() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += static_cast<std::size_t>(l.W.size() + l.b.size());
  return n;
}

VectorXd MlpModel::parameters() const {
  VectorXd flat(static_cast<Eigen::Index>(num_params()));
  Eigen::Index pos = 0;
  for (const auto& l : layers_) {
    flat.segment(pos, l.W.size()) = Eigen::Map<const VectorXd>(l.W.data(), l.W.size());
    pos += l.W.size();
    flat.segment(pos, l.b.size()) = l.b;
    pos += l.b.size();
  }
  return flat;
}

void MlpModel::set_parameters(const VectorXd& flat) {
  if (static_cast<std::size_t>(flat.size()) != num_params()) {
    throw std::invalid_argument("set_parameters: size mismatch");
  }
  Eigen::Index pos = 0;
  for (auto& l : layers_) {
    Eigen::Map<VectorXd>(l.W.data(), l.W.size()) = flat.segment(pos, l.W.size());
    pos += l.W.size();
    l.b = flat.segment(pos, l.b.size());
    pos += l.b.size();
  }
}

nlohmann::json spec_to_json(const MlpSpec& s) {
  nlohmann::json acts = nlohmann::json::array();
  for (auto a : s.activations) acts.push_back(to_string(a));
  return {{"widths", s.widths},
          {"activations", acts},
          {"input_shift", s.input_shift},
          {"input_scale", s.input_scale},
          {"output_scale", s.output_scale}};
}

MlpSpec spec_from_json(const nlohmann::json& js) {
  MlpSpec spec;
  spec.widths = js.at("widths").get<std::vector<int>>();
  spec.activations.clear();
  for (const auto& a : js.at("activations")) spec.activations.push_back(activation_from_string(a));
  spec.input_shift = js.at("input_shift").get<std::array<double, 3>>();
  spec.input_scale = js.at("input_scale").get<std::array<double, 3>>();
  spec.output_scale = js.at("output_scale").get<double>();
  spec.validate();
  return spec;
}

nlohmann::json MlpModel::to_json() const {
  const nlohmann::json spec = spec_to_json(spec_);
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : layers_) {
    nlohmann::json W = nlohmann::json::array();
    for (Eigen::Index r = 0; r < l.W.rows(); ++r) {
      std::vector<double> row(static_cast<std::size_t>(l.W.cols()));
      for (Eigen::Index c = 0; c < l.W.cols(); ++c) row[static_cast<std::size_t>(c)] = l.W(r, c);
      W.push_back(row);
    }
    layers.push_back({{"W", W}, {"b", std::vector<double>(l.b.data(), l.b.data() + l.b.size())}});
  }
  return {{"format", "cfdistill-mlp"},
          {"version", 1},
          {"spec", spec},
          {"layers", layers},
          {"training_fingerprint", fingerprint_}};
}

MlpModel MlpModel::from_json(const nlohmann::json& j) {
  if (j.value("format", std::string()) != "cfdistill-mlp") {
    throw Error("not a cfdistill-mlp checkpoint");
  }
  if (j.value("version", 0) != 1) throw Error("unsupported checkpoint version");
  const MlpSpec spec = spec_from_json(j.at("spec"));
  MlpModel model(spec);
  const auto& jl = j.at("layers");
  if (jl.size() != model.layers_.size()) throw Error("checkpoint layer count mismatch");
  for (std::size_t l = 0; l < jl.size(); ++l) {
    auto& layer = model.layers_[l];
    const auto& W = jl[l].at("W");
    const auto& b = jl[l].at("b");
    if (W.size() != static_cast<std::size_t>(layer.W.rows()) ||
        b.size() != static_cast<std::size_t>(layer.b.size())) {
      throw Error("checkpoint layer shape mismatch");
    }
    for (Eigen::Index r = 0; r < layer.W.rows(); ++r) {
      const auto& row = W[static_cast<std::size_t>(r)];
      if (row.size() != static_cast<std::size_t>(layer.W.cols())) throw Error("checkpoint row mismatch");
      for (Eigen::Index c = 0; c < layer.W.cols(); ++c) {
        layer.W(r, c) = row[static_cast<std::size_t>(c)].get<double>();
      }
    }
    for (Eigen::Index r = 0; r < layer.b.size(); ++r) layer.b(r) = b[static_cast<std::size_t>(r)].get<double>();
  }
  model.fingerprint_ = j.value("training_fingerprint", std::string());
  return model;
}

void MlpModel::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << to_json().dump(1) << '\n';
}

MlpModel MlpModel::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  return from_json(nlohmann::json::parse(in));
}

LossAndGrad loss_and_param_grads(const MlpModel& model, std::span<const CfState> states,
                                 std::span<const double> labels,
                                 std::span<const CfState> equilibria,
                                 const PenaltyWeights& weights, bool need_grad) {
  if (states.empty()) throw std::invalid_argument("loss_and_param_grads: empty batch");
  if (states.size() != labels.size()) {
    throw std::invalid_argument("loss_and_param_grads: states/labels size mismatch");
  }
  const MlpSpec& spec = model.spec();
  const double n = static_cast<double>(states.size());
  const Eigen::Index batch = static_cast<Eigen::Index>(states.size());
  const std::array<double, 3> to_phys{spec.output_scale / spec.input_scale[0],
                                      spec.output_scale / spec.input_scale[1],
                                      spec.output_scale / spec.input_scale[2]};
  // Violation sign per input: penalize +da/dv, -da/ds, +da/ddv.
  constexpr std::array<double, 3> kSign{1.0, -1.0, 1.0};

  LossAndGrad out;
  LossComponents& loss = out.loss;
  const Tape t = run_forward(model, states, true);

  RowVectorXd c0(batch);
  std::array<RowVectorXd, 3> cd;
  for (auto& c : cd) c = RowVectorXd::Zero(batch);
  double mse_sum = 0.0;
  std::array<double, 3> hinge_sum{0.0, 0.0, 0.0};
  for (Eigen::Index i = 0; i < batch; ++i) {
    const double a = spec.output_scale * t.y(i);
    const double label = labels[static_cast<std::size_t>(i)];
    const double r = a - label;
    const InputGrad g = physical_grad(spec, t, i);
    if (!std::isfinite(a) || !std::isfinite(r) || !std::isfinite(g.da_dv) ||
        !std::isfinite(g.da_ds) || !std::isfinite(g.da_ddv)) {
      throw DivergenceError("non-finite model output at batch sample " + std::to_string(i),
                            static_cast<std::size_t>(i));
    }
    mse_sum += r * r;
    c0(i) = 2.0 * r / n * spec.output_scale;
    const std::array<double, 3> gj{g.da_dv, g.da_ds, g.da_ddv};
    for (int j = 0; j < 3; ++j) {
      const double signed_slope = kSign[j] * gj[j];
      if (signed_slope > 0.0) {
        hinge_sum[j] += signed_slope;
        cd[j](i) = weights.theta_mon * weights.delta[j] / n * kSign[j] * to_phys[j];
      }
    }
  }
  loss.mse = mse_sum / n;
  loss.c_mon = (weights.delta[0] * hinge_sum[0] + weights.delta[1] * hinge_sum[1] +
                weights.delta[2] * hinge_sum[2]) /
               n;

  // String-stability hinge on the worst equilibrium.
  Tape te;
  std::array<RowVectorXd, 3> cde;
  bool str_grad = false;
  loss.n_equilibria = equilibria.size();
  if (!equilibria.empty()) {
    te = run_forward(model, equilibria, true);
    double worst = 0.0;
    int worst_idx = -1;
    InputGrad worst_g;
    for (Eigen::Index e = 0; e < te.y.size(); ++e) {
      const InputGrad g = physical_grad(spec, te, e);
      const double crit = g.da_dv * g.da_dv - 2.0 * g.da_ds + 2.0 * g.da_dv * g.da_ddv;
      if (!std::isfinite(crit)) {
        throw DivergenceError("non-finite stability criterion at equilibrium " + std::to_string(e),
                              static_cast<std::size_t>(e));
      }
      if (worst_idx < 0 || crit < worst) {
        worst = crit;
        worst_idx = static_cast<int>(e);
        worst_g = g;
      }
    }
    loss.min_criterion = worst;
    loss.worst_equilibrium = worst_idx;
    loss.c_str = std::max(-worst, 0.0);
    if (loss.c_str > 0.0 && weights.theta_str != 0.0) {
      str_grad = true;
      const Eigen::Index m = te.y.size();
      for (auto& c : cde) c = RowVectorXd::Zero(m);
      const double dfv = -(2.0 * worst_g.da_dv + 2.0 * worst_g.da_ddv);
      const double dfs = 2.0;
      const double dfdv = -2.0 * worst_g.da_dv;
      cde[0](worst_idx) = weights.theta_str * dfv * to_phys[0];
      cde[1](worst_idx) = weights.theta_str * dfs * to_phys[1];
      cde[2](worst_idx) = weights.theta_str * dfdv * to_phys[2];
    }
  }

  loss.total = loss.mse + weights.theta_mon * loss.c_mon + weights.theta_str * loss.c_str;
  if (!std::isfinite(loss.total)) throw DivergenceError("non-finite total loss", 0);

  if (need_grad) {
    out.grad = VectorXd::Zero(static_cast<Eigen::Index>(model.num_params()));
    const bool mon_grad = weights.theta_mon != 0.0 && loss.c_mon > 0.0;
    run_backward(model, t, c0, cd, mon_grad, out.grad);
    if (str_grad) {
      run_backward(model, te, RowVectorXd::Zero(te.y.size()), cde, true, out.grad);
    }
  }
  return out;
}

GradCheckReport check_param_grads(const MlpModel& model, std::span<const CfState> states,
                                  std::span<const double> labels,
                                  std::span<const CfState> equilibria,
                                  const PenaltyWeights& weights, const GradCheckOptions& opts) {
  const LossAndGrad base = loss_and_param_grads(model, states, labels, equilibria, weights, true);
  const std::size_t n_params = model.num_params();

  std::vector<std::size_t> coords(n_params);
  std::iota(coords.begin(), coords.end(), std::size_t{0});
  if (opts.coordinates != 0 && opts.coordinates < n_params) {
    Rng rng(opts.seed);
    for (std::size_t i = 0; i < opts.coordinates; ++i) {
      std::swap(coords[i], coords[i + rng.uniform_index(n_params - i)]);
    }
    coords.resize(opts.coordinates);
  }

  GradCheckReport report;
  report.loss = base.loss;
  MlpModel probe = model;
  VectorXd theta = model.parameters();
  std::vector<GradCheckEntry> entries;
  entries.reserve(coords.size());
  for (std::size_t idx : coords) {
    const auto k = static_cast<Eigen::Index>(idx);
    const double saved = theta(k);
    theta(k) = saved + opts.step;
    probe.set_parameters(theta);
    const double up = loss_and_param_grads(probe, states, labels, equilibria, weights, false).loss.total;
    theta(k) = saved - opts.step;
    probe.set_parameters(theta);
    const double down =
        loss_and_param_grads(probe, states, labels, equilibria, weights, false).loss.total;
    theta(k) = saved;

    GradCheckEntry e;
    e.index = idx;
    e.analytic = base.grad(k);
    e.numeric = (up - down) / (2.0 * opts.step);
    const double diff = std::abs(e.analytic - e.numeric);
    const double scale = std::max(std::abs(e.analytic), std::abs(e.numeric));
    e.rel_error = scale > 0.0 ? diff / scale : 0.0;
    const bool ok = diff <= opts.abs_floor || e.rel_error < opts.rel_tol;
    if (!ok) ++report.failures;
    if (diff > opts.abs_floor) report.max_rel_error = std::max(report.max_rel_error, e.rel_error);
    entries.push_back(e);
  }
  report.checked = entries.size();
  std::sort(entries.begin(), entries.end(),
            [](const GradCheckEntry& a, const GradCheckEntry& b) { return a.rel_error > b.rel_error; });
  entries.resize(std::min(entries.size(), opts.report_worst));
  report.worst = std::move(entries);
  return report;
}

}  // namespace cfdistill
