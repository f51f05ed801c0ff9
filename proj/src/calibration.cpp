#include "ssmlab/calibration.hpp"

#include "ssmlab/csv.hpp"
#include "ssmlab/parallel.hpp"

#include <cmath>
#include <fstream>
#include <limits>

namespace ssmlab {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void record(CalibrationTrace* trace, double loss, const RowMatrix& s) {
  if (!trace) return;
  trace->loss.push_back(loss);
  trace->min_s.push_back(s.size() ? s.minCoeff() : 0.0);
  trace->max_s.push_back(s.size() ? s.maxCoeff() : 0.0);
}

void check_shape(const ToyModel& model, const ScalingFactors& s) {
  require(s.layers() == static_cast<int>(model.blocks.size()),
          "scaling factors have " + std::to_string(s.layers()) + " layers, model has " +
              std::to_string(model.blocks.size()));
  require(s.values.rows() == factor_rows(model, s.granularity),
          "scaling factors have " + std::to_string(s.values.rows()) + " rows, expected " +
              std::to_string(factor_rows(model, s.granularity)));
}

}  // namespace

const char* to_string(ScaleTarget t) { return t == ScaleTarget::A ? "A" : "Delta"; }
const char* to_string(Granularity g) { return g == Granularity::Layer ? "layer" : "group"; }

ScaleTarget parse_target(const std::string& s) {
  if (s == "A" || s == "a") return ScaleTarget::A;
  if (s == "Delta" || s == "delta") return ScaleTarget::Delta;
  throw ConfigError("unknown scaling target '" + s + "' (expected A or Delta)");
}

Granularity parse_granularity(const std::string& s) {
  if (s == "layer") return Granularity::Layer;
  if (s == "group" || s == "channel" || s == "head") return Granularity::Group;
  throw ConfigError("unknown granularity '" + s + "' (expected layer or group)");
}

int factor_rows(const ToyModel& model, Granularity g) {
  require(!model.blocks.empty(), "model has no layers");
  return g == Granularity::Layer ? 1 : model.blocks.front().ssm.groups();
}

ScalingFactors ones_factors(const ToyModel& model, ScaleTarget target, Granularity g) {
  ScalingFactors s;
  s.values = RowMatrix::Ones(factor_rows(model, g), static_cast<Eigen::Index>(model.blocks.size()));
  s.target = target;
  s.granularity = g;
  return s;
}

ScalingFactors init_factors(int layers, int rows, std::uint64_t seed, ScaleTarget target,
                            Granularity g) {
  require(layers >= 1 && rows >= 1, "init_factors: layers and rows must be >= 1");
  Rng rng(derive_seed(seed, 0x696e6974ULL));
  ScalingFactors s;
  s.values.resize(rows, layers);
  // 1 - U[0,1) lies in (0, 1].
  for (Eigen::Index i = 0; i < s.values.size(); ++i) s.values.data()[i] = 1.0 - rng.uniform();
  s.target = target;
  s.granularity = g;
  s.clamp();
  return s;
}

ModelScales to_model_scales(const ToyModel& model, const ScalingFactors& s) {
  check_shape(model, s);
  ModelScales out = ModelScales::identity(model);
  for (std::size_t l = 0; l < model.blocks.size(); ++l) {
    auto& ls = out.layers[l];
    Vector& v = s.target == ScaleTarget::A ? ls.a : ls.delta;
    const auto col = static_cast<Eigen::Index>(l);
    if (s.granularity == Granularity::Layer) {
      v.setConstant(s.values(0, col));
    } else {
      v = s.values.col(col);
    }
  }
  return out;
}

ModelScales constant_scaling(const ToyModel& model, double factor, ScaleTarget target) {
  require(factor > 0.0, "constant_scaling: factor must be positive");
  ScalingFactors s = ones_factors(model, target, Granularity::Layer);
  s.values.setConstant(factor);
  return to_model_scales(model, s);
}

double eval_loss(const ToyModel& model, const ScalingFactors& s,
                 const std::vector<TokenSample>& calib_set) {
  require(!calib_set.empty(), "eval_loss: calibration set is empty");
  const ModelScales scales = to_model_scales(model, s);
  std::vector<LossStats> parts(calib_set.size());
  std::vector<std::uint8_t> overflow(calib_set.size(), 0);
  parallel_for(calib_set.size(), [&](std::size_t i) {
    try {
      parts[i] = sequence_loss(model, calib_set[i], &scales);
    } catch (const NumericError&) {
      overflow[i] = 1;
    }
  });
  double nll = 0.0;
  long long count = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (overflow[i]) return kInf;
    nll += parts[i].nll_sum;
    count += parts[i].count;
  }
  require(count > 0, "eval_loss: calibration set has no prediction targets");
  const double mean = nll / static_cast<double>(count);
  return std::isfinite(mean) ? mean : kInf;
}

void CalibrationConfig::validate() const {
  require(c > 0.0, "calibration: c must be positive");
  require(eta > 0.0, "calibration: eta must be positive");
  require(iterations >= 0, "calibration: iterations must be non-negative");
  require(!calib_set.empty(), "calibration: calibration set is empty");
}

RowMatrix spsa_estimate(const Objective& f, const RowMatrix& s, double c, Rng& rng) {
  RowMatrix delta(s.rows(), s.cols());
  for (Eigen::Index i = 0; i < delta.size(); ++i) delta.data()[i] = rng.rademacher();
  const double lp = f(s + c * delta);
  const double lm = f(s - c * delta);
  // 1 / delta_i == delta_i for Rademacher entries.
  return ((lp - lm) / (2.0 * c)) * delta;
}

RowMatrix spsa_minimize(const Objective& f, RowMatrix s, const SpsaSettings& cfg,
                        CalibrationTrace* trace) {
  require(cfg.c > 0.0 && cfg.eta > 0.0, "spsa: c and eta must be positive");
  require(cfg.iterations >= 0, "spsa: iterations must be non-negative");
  s = s.cwiseMax(kFactorFloor);
  Rng rng(derive_seed(cfg.seed, 0x73707361ULL));
  int nonfinite_run = 0;
  RowMatrix delta(s.rows(), s.cols());
  for (int k = 0; k < cfg.iterations; ++k) {
    for (Eigen::Index i = 0; i < delta.size(); ++i) delta.data()[i] = rng.rademacher();
    // Near the floor S - c d would leave the domain, so both probes are
    // projected onto it like S itself.
    const RowMatrix sp = (s + cfg.c * delta).cwiseMax(kFactorFloor);
    const RowMatrix sm = (s - cfg.c * delta).cwiseMax(kFactorFloor);
    double sides[2];
    parallel_for(2, [&](std::size_t i) { sides[i] = f(i == 0 ? sp : sm); });
    const bool fp = std::isfinite(sides[0]);
    const bool fm = std::isfinite(sides[1]);
    double side_mean = kInf;
    if (fp && fm) {
      nonfinite_run = 0;
      s -= cfg.eta * ((sides[0] - sides[1]) / (2.0 * cfg.c)) * delta;
      side_mean = 0.5 * (sides[0] + sides[1]);
    } else if (fp || fm) {
      nonfinite_run = 0;
      // Step away from the exploding side.
      s += (fp ? 1.0 : -1.0) * cfg.eta * cfg.c * delta;
      side_mean = fp ? sides[0] : sides[1];
    } else if (++nonfinite_run > cfg.max_nonfinite) {
      throw NumericError("spsa: both side losses non-finite for " + std::to_string(nonfinite_run) +
                         " consecutive iterations (last at iteration " + std::to_string(k) +
                         ", min S " + format_double(s.minCoeff()) + ", max S " +
                         format_double(s.maxCoeff()) + ")");
    }
    s = s.cwiseMax(kFactorFloor);
    record(trace, cfg.track_loss ? f(s) : side_mean, s);
  }
  return s;
}

RowMatrix adam_minimize(const GradObjective& f, RowMatrix s, const AdamSettings& cfg,
                        CalibrationTrace* trace) {
  require(cfg.eta > 0.0 && cfg.iterations >= 0, "adam: eta must be positive, iterations >= 0");
  s = s.cwiseMax(kFactorFloor);
  RowMatrix m = RowMatrix::Zero(s.rows(), s.cols());
  RowMatrix v = RowMatrix::Zero(s.rows(), s.cols());
  RowMatrix grad(s.rows(), s.cols());
  for (int k = 1; k <= cfg.iterations; ++k) {
    grad.setZero();
    const double loss = f(s, grad);
    if (!grad.allFinite()) {
      throw NumericError("gradient calibration: non-finite gradient at iteration " +
                         std::to_string(k - 1));
    }
    record(trace, loss, s);
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(cfg.beta1, k);
    const double c2 = 1.0 - std::pow(cfg.beta2, k);
    s.array() -= cfg.eta * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg.eps);
    s = s.cwiseMax(kFactorFloor);
  }
  return s;
}

CalibrationResult spsa_calibrate(const ToyModel& model, const CalibrationConfig& cfg,
                                 const ScalingFactors& s0) {
  cfg.validate();
  check_shape(model, s0);
  SpsaSettings st;
  st.c = cfg.c;
  st.eta = cfg.eta;
  st.iterations = cfg.iterations;
  st.seed = cfg.seed;
  st.track_loss = cfg.track_loss;
  ScalingFactors probe = s0;
  const Objective f = [&](const RowMatrix& v) {
    probe.values = v;
    return eval_loss(model, probe, cfg.calib_set);
  };
  CalibrationResult out;
  out.factors = s0;
  out.factors.values = spsa_minimize(f, s0.values, st, &out.trace);
  return out;
}

double calibration_loss_and_grad(const ToyModel& model, const ScalingFactors& s,
                                 const std::vector<TokenSample>& calib_set, RowMatrix& grad) {
  require(!calib_set.empty(), "calibration: calibration set is empty");
  const ModelScales scales = to_model_scales(model, s);
  std::vector<LossStats> parts(calib_set.size());
  std::vector<ScaleGrads> grads(calib_set.size());
  parallel_for(calib_set.size(), [&](std::size_t i) {
    grads[i] = ScaleGrads::zeros(model);
    parts[i] = loss_and_grad(model, calib_set[i], &scales, nullptr, &grads[i]);
  });
  ScaleGrads total = ScaleGrads::zeros(model);
  double nll = 0.0;
  long long count = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    total.add(grads[i]);
    nll += parts[i].nll_sum;
    count += parts[i].count;
  }
  require(count > 0, "calibration: calibration set has no prediction targets");
  const double inv = 1.0 / static_cast<double>(count);
  grad.setZero(s.values.rows(), s.values.cols());
  for (std::size_t l = 0; l < model.blocks.size(); ++l) {
    const Vector& g = s.target == ScaleTarget::A ? total.a[l] : total.delta[l];
    const auto col = static_cast<Eigen::Index>(l);
    // A layer-wide factor feeds every group, so its gradient is the sum.
    if (s.granularity == Granularity::Layer) {
      grad(0, col) = g.sum() * inv;
    } else {
      grad.col(col) = g * inv;
    }
  }
  return nll * inv;
}

CalibrationResult grad_calibrate(const ToyModel& model, const CalibrationConfig& cfg,
                                 const ScalingFactors& s0) {
  cfg.validate();
  check_shape(model, s0);
  AdamSettings st;
  st.eta = cfg.eta;
  st.iterations = cfg.iterations;
  ScalingFactors probe = s0;
  const GradObjective f = [&](const RowMatrix& v, RowMatrix& grad) {
    probe.values = v;
    return calibration_loss_and_grad(model, probe, cfg.calib_set, grad);
  };
  CalibrationResult out;
  out.factors = s0;
  out.factors.values = adam_minimize(f, s0.values, st, &out.trace);
  return out;
}

void write_calibration_trace_csv(const CalibrationTrace& trace, const std::filesystem::path& path) {
  CsvWriter csv(path, {"iteration", "loss", "min_S", "max_S"});
  for (std::size_t i = 0; i < trace.loss.size(); ++i) {
    csv.row({std::to_string(i), format_double(trace.loss[i]), format_double(trace.min_s[i]),
             format_double(trace.max_s[i])});
  }
}

nlohmann::json factors_to_json(const ScalingFactors& s) {
  nlohmann::json layers = nlohmann::json::array();
  for (Eigen::Index l = 0; l < s.values.cols(); ++l) {
    std::vector<double> col(static_cast<std::size_t>(s.values.rows()));
    for (Eigen::Index r = 0; r < s.values.rows(); ++r) col[static_cast<std::size_t>(r)] = s.values(r, l);
    layers.push_back(col);
  }
  return {{"target", to_string(s.target)},
          {"granularity", to_string(s.granularity)},
          {"layers", layers}};
}

ScalingFactors factors_from_json(const nlohmann::json& j) {
  try {
    ScalingFactors s;
    s.target = parse_target(j.at("target").get<std::string>());
    s.granularity = parse_granularity(j.at("granularity").get<std::string>());
    const auto& layers = j.at("layers");
    require(layers.is_array() && !layers.empty(), "scaling factors: 'layers' must be a non-empty array");
    const auto rows = layers.front().size();
    s.values.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(layers.size()));
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto col = layers[l].get<std::vector<double>>();
      require(col.size() == rows, "scaling factors: ragged layer arrays");
      for (std::size_t r = 0; r < rows; ++r) {
        require(col[r] > 0.0, "scaling factors: entries must be positive");
        s.values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(l)) = col[r];
      }
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("scaling factors: ") + e.what());
  }
}

void write_scaling_factors(const ScalingFactors& s, const nlohmann::json& extra,
                           const std::filesystem::path& path) {
  nlohmann::json j = factors_to_json(s);
  for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

ScalingFactors read_scaling_factors(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open scaling factors " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return factors_from_json(j);
}

}  // namespace ssmlab
