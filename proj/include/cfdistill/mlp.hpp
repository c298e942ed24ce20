#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "cfdistill/cf_core.hpp"

namespace cfdistill {

enum class Activation { Tanh, Identity };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& name);

/// Shape and fixed transforms of the student network.
///
/// Inputs are normalized as (x - input_shift) / input_scale in the order
/// (v, s, dv); the network output is multiplied by output_scale to give
/// m/s^2. Hidden layers use `activations`, the output layer is linear.
struct MlpSpec {
  std::vector<int> widths{3, 64, 64, 1};
  std::vector<Activation> activations{Activation::Tanh, Activation::Tanh};
  std::array<double, 3> input_shift{15.0, 15.0, 0.0};
  std::array<double, 3> input_scale{15.0, 15.0, 2.0};
  double output_scale = 1.0;

  void validate() const;
  static MlpSpec with_hidden(std::vector<int> hidden, Activation act = Activation::Tanh);
};

nlohmann::json spec_to_json(const MlpSpec& spec);
MlpSpec spec_from_json(const nlohmann::json& j);

struct DenseLayer {
  Eigen::MatrixXd W;  // out x in
  Eigen::VectorXd b;
};

class MlpModel final : public CarFollowingModel {
 public:
  /// All-zero parameters.
  explicit MlpModel(MlpSpec spec);

  /// Weights and biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  static MlpModel initialize(MlpSpec spec, std::uint64_t seed);

  double accel(const CfState& state) const override;
  InputGrad input_grad(const CfState& state) const override;
  void accel_batch(std::span<const CfState> states, std::span<double> out) const override;
  void input_grad_batch(std::span<const CfState> states, std::span<InputGrad> out) const override;

  const MlpSpec& spec() const noexcept { return spec_; }
  const std::vector<DenseLayer>& layers() const noexcept { return layers_; }
  std::vector<DenseLayer>& layers() noexcept { return layers_; }

  /// Flat parameter vector: per layer, W in column-major order, then b.
  std::size_t num_params() const;
  Eigen::VectorXd parameters() const;
  void set_parameters(const Eigen::VectorXd& flat);

  const std::string& training_fingerprint() const noexcept { return fingerprint_; }
  void set_training_fingerprint(std::string f) { fingerprint_ = std::move(f); }

  nlohmann::json to_json() const;
  static MlpModel from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static MlpModel load(const std::filesystem::path& path);

 private:
  MlpSpec spec_;
  std::vector<DenseLayer> layers_;
  std::string fingerprint_;
};

/// Weights of the penalty terms in the total training loss.
struct PenaltyWeights {
  double theta_mon = 0.0;
  double theta_str = 0.0;
  std::array<double, 3> delta{0.0, 1.0, 1.0};  // (v, s, dv) monotonicity coefficients
};

struct LossComponents {
  double mse = 0.0;
  double c_mon = 0.0;
  double c_str = 0.0;
  double total = 0.0;
  std::size_t n_equilibria = 0;
  double min_criterion = 0.0;  // over the supplied equilibria (0 when none)
  int worst_equilibrium = -1;
};

struct LossAndGrad {
  LossComponents loss;
  Eigen::VectorXd grad;  // same layout as MlpModel::parameters()
};

class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, std::size_t sample_index)
      : Error(what), sample_index_(sample_index) {}
  std::size_t sample_index() const noexcept { return sample_index_; }

 private:
  std::size_t sample_index_;
};

/// Total loss L = MSE + theta_mon * C_mon + theta_str * C_str and its exact
/// parameter gradient.
///
/// C_mon hinges the input-gradient signs over the batch; C_str hinges the
/// worst string-stability criterion over `equilibria`, which are held
/// constant (no gradient flows through their location). Both penalties are
/// differentiated through the input-gradients, so second-order terms are
/// included. An empty `equilibria` makes C_str zero.
LossAndGrad loss_and_param_grads(const MlpModel& model, std::span<const CfState> states,
                                 std::span<const double> labels,
                                 std::span<const CfState> equilibria,
                                 const PenaltyWeights& weights, bool need_grad = true);

struct GradCheckOptions {
  std::size_t coordinates = 0;  // 0 checks every parameter
  std::uint64_t seed = 0;
  double step = 1e-5;
  double rel_tol = 1e-4;
  double abs_floor = 1e-8;
  std::size_t report_worst = 10;
};

struct GradCheckEntry {
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  std::size_t checked = 0;
  std::size_t failures = 0;
  double max_rel_error = 0.0;
  LossComponents loss;
  std::vector<GradCheckEntry> worst;  // sorted, largest error first
  bool passed() const noexcept { return failures == 0; }
};

/// Central finite differences against loss_and_param_grads.
GradCheckReport check_param_grads(const MlpModel& model, std::span<const CfState> states,
                                  std::span<const double> labels,
                                  std::span<const CfState> equilibria,
                                  const PenaltyWeights& weights, const GradCheckOptions& opts = {});

}  // namespace cfdistill
