#pragma once

// Training-free calibration of per-layer scaling factors on a frozen model.
// Factors multiply either a (the log-eigenvalues) or delta through the scale
// hooks of the scan; the stored weights are never touched.

#include "ssmlab/rng.hpp"
#include "ssmlab/toy_model.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace ssmlab {

enum class ScaleTarget { A, Delta };
// Layer: one factor per layer. Group: one per channel (Mamba) or head (Mamba2).
enum class Granularity { Layer, Group };

const char* to_string(ScaleTarget t);
const char* to_string(Granularity g);
ScaleTarget parse_target(const std::string& s);
Granularity parse_granularity(const std::string& s);

inline constexpr double kFactorFloor = 0.001;

struct ScalingFactors {
  RowMatrix values;  // d_s x L
  ScaleTarget target = ScaleTarget::A;
  Granularity granularity = Granularity::Layer;

  int layers() const { return static_cast<int>(values.cols()); }
  void clamp() { values = values.cwiseMax(kFactorFloor); }
};

// Factor rows needed for the model at this granularity.
int factor_rows(const ToyModel& model, Granularity g);

ScalingFactors ones_factors(const ToyModel& model, ScaleTarget target, Granularity g);

// Entries i.i.d. uniform on (0, 1], floored at 0.001.
ScalingFactors init_factors(int layers, int rows, std::uint64_t seed, ScaleTarget target,
                            Granularity g);

ModelScales to_model_scales(const ToyModel& model, const ScalingFactors& s);

// One factor broadcast over every layer and group.
ModelScales constant_scaling(const ToyModel& model, double factor, ScaleTarget target);

// Mean next-token cross-entropy (nats/token) over the set. A scan overflow
// yields +Inf rather than an exception.
double eval_loss(const ToyModel& model, const ScalingFactors& s,
                 const std::vector<TokenSample>& calib_set);

struct CalibrationConfig {
  double c = 0.01;
  double eta = 0.05;
  int iterations = 300;
  std::vector<TokenSample> calib_set;
  std::uint64_t seed = 0;
  // Evaluate the loss at S after each step for the trace. Without it the
  // trace records the mean of the finite side losses.
  bool track_loss = false;

  void validate() const;
};

struct CalibrationTrace {
  std::vector<double> loss;
  std::vector<double> min_s;
  std::vector<double> max_s;
};

struct CalibrationResult {
  ScalingFactors factors;
  CalibrationTrace trace;
};

using Objective = std::function<double(const RowMatrix&)>;
// Returns the objective and writes its gradient into grad.
using GradObjective = std::function<double(const RowMatrix&, RowMatrix& grad)>;

struct SpsaSettings {
  double c = 0.01;
  double eta = 0.05;
  int iterations = 300;
  std::uint64_t seed = 0;
  int max_nonfinite = 10;
  bool track_loss = false;
};

// Two-sided simultaneous perturbation. An infinite side contributes only its
// direction: S moves by eta * c away from it.
RowMatrix spsa_minimize(const Objective& f, RowMatrix s0, const SpsaSettings& cfg,
                        CalibrationTrace* trace = nullptr);

// The gradient estimate (f(S + c d) - f(S - c d)) / (2c) * d for one draw d.
RowMatrix spsa_estimate(const Objective& f, const RowMatrix& s, double c, Rng& rng);

struct AdamSettings {
  double eta = 0.05;
  int iterations = 300;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

RowMatrix adam_minimize(const GradObjective& f, RowMatrix s0, const AdamSettings& cfg,
                        CalibrationTrace* trace = nullptr);

CalibrationResult spsa_calibrate(const ToyModel& model, const CalibrationConfig& cfg,
                                 const ScalingFactors& s0);

// Mean cross-entropy and its exact gradient with respect to the factors.
double calibration_loss_and_grad(const ToyModel& model, const ScalingFactors& s,
                                 const std::vector<TokenSample>& calib_set, RowMatrix& grad);

CalibrationResult grad_calibrate(const ToyModel& model, const CalibrationConfig& cfg,
                                 const ScalingFactors& s0);

void write_calibration_trace_csv(const CalibrationTrace& trace, const std::filesystem::path& path);

nlohmann::json factors_to_json(const ScalingFactors& s);
ScalingFactors factors_from_json(const nlohmann::json& j);
void write_scaling_factors(const ScalingFactors& s, const nlohmann::json& extra,
                           const std::filesystem::path& path);
ScalingFactors read_scaling_factors(const std::filesystem::path& path);

}  // namespace ssmlab
