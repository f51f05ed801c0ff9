#include "ssmlab/calibration.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

using namespace ssmlab;
using namespace ssmlab::testing;

namespace {

double quadratic(const RowMatrix& s) { return (s.array() - 0.7).square().sum(); }

std::vector<TokenSample> tiny_set(int n, int length) {
  std::vector<TokenSample> set;
  for (int i = 0; i < n; ++i) {
    Rng rng(100 + i);
    TokenSample s;
    for (int t = 0; t < length; ++t) s.tokens.push_back(rng.index(64));
    set.push_back(std::move(s));
  }
  return set;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("ssmlab_" + name);
}

}  // namespace

TEST(Parsing, TargetsAndGranularity) {
  EXPECT_EQ(parse_target("A"), ScaleTarget::A);
  EXPECT_EQ(parse_target("delta"), ScaleTarget::Delta);
  EXPECT_EQ(parse_granularity("layer"), Granularity::Layer);
  EXPECT_EQ(parse_granularity("head"), Granularity::Group);
  EXPECT_STREQ(to_string(ScaleTarget::Delta), "Delta");
  EXPECT_THROW(parse_target("B"), ConfigError);
  EXPECT_THROW(parse_granularity("model"), ConfigError);
}

TEST(Factors, InitRangeAndSeeding) {
  const auto s = init_factors(3, 2, 5, ScaleTarget::A, Granularity::Layer);
  EXPECT_EQ(s.values.rows(), 2);
  EXPECT_EQ(s.layers(), 3);
  EXPECT_GE(s.values.minCoeff(), kFactorFloor);
  EXPECT_LE(s.values.maxCoeff(), 1.0);
  EXPECT_EQ(s.values, init_factors(3, 2, 5, ScaleTarget::A, Granularity::Layer).values);
  EXPECT_NE(s.values, init_factors(3, 2, 6, ScaleTarget::A, Granularity::Layer).values);
}

TEST(Factors, MapOntoModelScales) {
  const auto model = build_model(tiny_config(Variant::Mamba2));
  EXPECT_EQ(factor_rows(model, Granularity::Layer), 1);
  EXPECT_EQ(factor_rows(model, Granularity::Group), 2);
  ScalingFactors s = ones_factors(model, ScaleTarget::Delta, Granularity::Layer);
  s.values(0, 1) = 3.0;
  const auto ms = to_model_scales(model, s);
  EXPECT_TRUE((ms.layers[1].delta.array() == 3.0).all());
  EXPECT_TRUE((ms.layers[1].a.array() == 1.0).all());
  EXPECT_TRUE((ms.layers[0].delta.array() == 1.0).all());

  ScalingFactors g = ones_factors(model, ScaleTarget::A, Granularity::Group);
  g.values(1, 0) = 0.5;
  const auto mg = to_model_scales(model, g);
  EXPECT_EQ(mg.layers[0].a[1], 0.5);
  EXPECT_EQ(mg.layers[0].a[0], 1.0);

  const auto c = constant_scaling(model, 2.0, ScaleTarget::A);
  for (const auto& l : c.layers) EXPECT_TRUE((l.a.array() == 2.0).all());

  ScalingFactors wrong = ones_factors(model, ScaleTarget::A, Granularity::Layer);
  wrong.values = RowMatrix::Ones(1, 5);
  EXPECT_THROW(to_model_scales(model, wrong), ConfigError);
}

TEST(EvalLoss, IdentityFactorsAreBitwiseNeutral) {
  const auto model = build_model(tiny_config());
  const auto set = tiny_set(3, 20);
  double sum = 0.0;
  long long n = 0;
  for (const auto& s : set) {
    const auto r = sequence_loss(model, s);
    sum += r.nll_sum;
    n += r.count;
  }
  const auto ones = ones_factors(model, ScaleTarget::A, Granularity::Layer);
  EXPECT_EQ(eval_loss(model, ones, set), sum / static_cast<double>(n));
  const auto ms = to_model_scales(model, ones);
  EXPECT_EQ(forward(model, set[0].tokens, &ms).logits, forward(model, set[0].tokens).logits);
}

TEST(Spsa, QuadraticConverges) {
  const RowMatrix s0 = init_factors(4, 3, 1, ScaleTarget::A, Granularity::Layer).values;
  SpsaSettings cfg;
  cfg.iterations = 500;
  cfg.seed = 2;
  cfg.track_loss = true;
  CalibrationTrace trace;
  const RowMatrix s = spsa_minimize(quadratic, s0, cfg, &trace);
  EXPECT_LT((s.array() - 0.7).abs().maxCoeff(), 0.05);
  ASSERT_EQ(trace.loss.size(), 500u);
  for (int k = 1; k < 10; ++k) EXPECT_LE(trace.loss[k], trace.loss[k - 1] + 1e-12) << k;
  EXPECT_EQ(s, spsa_minimize(quadratic, s0, cfg));
}

TEST(Spsa, EstimateIsUnbiased) {
  RowMatrix s(2, 2);
  s << 0.2, 1.3, 0.9, 0.4;
  const RowMatrix truth = 2.0 * (s.array() - 0.7).matrix();
  Rng rng(3);
  RowMatrix mean = RowMatrix::Zero(2, 2);
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) mean += spsa_estimate(quadratic, s, 0.01, rng);
  mean /= draws;
  for (Eigen::Index i = 0; i < 4; ++i) {
    EXPECT_LT(std::abs(mean.data()[i] / truth.data()[i] - 1.0), 0.02) << i;
  }
}

TEST(Spsa, ClampsAtFloor) {
  const Objective push_down = [](const RowMatrix& s) { return s.sum(); };
  SpsaSettings cfg;
  cfg.iterations = 200;
  cfg.eta = 0.5;
  const RowMatrix s = spsa_minimize(push_down, RowMatrix::Constant(2, 2, 0.3), cfg);
  EXPECT_EQ(s.minCoeff(), kFactorFloor);
}

TEST(Spsa, NeverEvaluatesOutsideTheDomain) {
  // Like the model, the objective rejects non-positive factors outright.
  const Objective strict = [](const RowMatrix& s) {
    if (s.minCoeff() <= 0.0) throw ConfigError("non-positive factor");
    return s.sum();
  };
  SpsaSettings cfg;
  cfg.iterations = 100;
  const RowMatrix s = spsa_minimize(strict, RowMatrix::Constant(3, 2, kFactorFloor), cfg);
  EXPECT_GE(s.minCoeff(), kFactorFloor);
}

TEST(Spsa, StepsAwayFromInfiniteSide) {
  const double inf = std::numeric_limits<double>::infinity();
  // Finite only below 1; the minimum of the finite part sits at the wall.
  const Objective wall = [inf](const RowMatrix& s) {
    return s.maxCoeff() >= 1.0 ? inf : -s.sum();
  };
  SpsaSettings cfg;
  cfg.iterations = 300;
  cfg.eta = 0.001;  // a regular step cannot jump past the wall
  CalibrationTrace trace;
  const RowMatrix s = spsa_minimize(wall, RowMatrix::Constant(1, 1, 0.995), cfg, &trace);
  // Each one-sided step retreats by eta * c.
  EXPECT_LT(s(0, 0), 0.995);
  EXPECT_GT(s(0, 0), 0.98);
  EXPECT_LE(trace.max_s.front(), 0.995);
  for (double l : trace.loss) EXPECT_TRUE(std::isfinite(l));
}

TEST(Spsa, AbortsAfterRepeatedNonFiniteLoss) {
  int calls = 0;
  const Objective nan = [&](const RowMatrix&) {
    ++calls;
    return std::nan("");
  };
  SpsaSettings cfg;
  cfg.iterations = 100;
  EXPECT_THROW(spsa_minimize(nan, RowMatrix::Ones(1, 2), cfg), NumericError);
  EXPECT_EQ(calls, 2 * 11);
}

TEST(Adam, QuadraticConverges) {
  const GradObjective f = [](const RowMatrix& s, RowMatrix& g) {
    g = 2.0 * (s.array() - 0.7).matrix();
    return quadratic(s);
  };
  AdamSettings cfg;
  cfg.iterations = 500;
  CalibrationTrace trace;
  const RowMatrix s = adam_minimize(f, RowMatrix::Constant(2, 3, 0.1), cfg, &trace);
  EXPECT_LT((s.array() - 0.7).abs().maxCoeff(), 0.01);
  EXPECT_EQ(trace.loss.size(), 500u);
  const GradObjective bad = [](const RowMatrix&, RowMatrix& g) {
    g.setConstant(std::nan(""));
    return 0.0;
  };
  EXPECT_THROW(adam_minimize(bad, RowMatrix::Ones(1, 1), cfg), NumericError);
}

struct GradCase {
  Variant variant;
  ScaleTarget target;
  Granularity granularity;
};

class FactorGradients : public ::testing::TestWithParam<GradCase> {};

TEST_P(FactorGradients, MatchFiniteDifferences) {
  const auto [variant, target, granularity] = GetParam();
  const auto model = build_model(tiny_config(variant));
  const auto set = tiny_set(2, 16);
  const int rows = factor_rows(model, granularity);
  ScalingFactors s = init_factors(model.config().n_layers, rows, 9, target, granularity);
  s.values = (s.values.array() + 0.5).matrix();
  RowMatrix grad;
  calibration_loss_and_grad(model, s, set, grad);
  ASSERT_EQ(grad.rows(), s.values.rows());
  ASSERT_EQ(grad.cols(), s.values.cols());
  for (Eigen::Index i = 0; i < s.values.size(); ++i) {
    const double keep = s.values.data()[i];
    const double h = 1e-5;
    s.values.data()[i] = keep + h;
    const double up = eval_loss(model, s, set);
    s.values.data()[i] = keep - h;
    const double down = eval_loss(model, s, set);
    s.values.data()[i] = keep;
    const double fd = (up - down) / (2 * h);
    EXPECT_LT(std::abs(fd - grad.data()[i]) / std::max(1e-4, std::abs(fd)), 1e-4)
        << i << " fd=" << fd << " an=" << grad.data()[i];
  }
}

INSTANTIATE_TEST_SUITE_P(
    Cases, FactorGradients,
    ::testing::Values(GradCase{Variant::Mamba, ScaleTarget::A, Granularity::Layer},
                      GradCase{Variant::Mamba, ScaleTarget::Delta, Granularity::Layer},
                      GradCase{Variant::Mamba, ScaleTarget::A, Granularity::Group},
                      GradCase{Variant::Mamba2, ScaleTarget::Delta, Granularity::Group},
                      GradCase{Variant::Mamba2, ScaleTarget::A, Granularity::Layer}));

TEST(Calibrate, FrozenModelAndDeterminism) {
  const auto model = build_model(tiny_config());
  const std::string before = model.checksum();
  CalibrationConfig cfg;
  cfg.iterations = 20;
  cfg.calib_set = tiny_set(2, 24);
  cfg.seed = 4;
  const auto s0 = init_factors(2, 1, 4, ScaleTarget::A, Granularity::Layer);
  const auto a = spsa_calibrate(model, cfg, s0);
  const auto b = spsa_calibrate(model, cfg, s0);
  EXPECT_EQ(model.checksum(), before);
  EXPECT_EQ(a.factors.values, b.factors.values);
  EXPECT_EQ(a.trace.loss, b.trace.loss);
  EXPECT_EQ(a.trace.loss.size(), 20u);
  const auto g = grad_calibrate(model, cfg, s0);
  EXPECT_EQ(model.checksum(), before);
  EXPECT_LT(g.trace.loss.back(), g.trace.loss.front());

  CalibrationConfig empty = cfg;
  empty.calib_set.clear();
  EXPECT_THROW(spsa_calibrate(model, empty, s0), ConfigError);
}

TEST(FactorsIo, JsonRoundTrip) {
  ScalingFactors s;
  s.values.resize(2, 3);
  s.values << 0.1, 0.25, 1.0 / 3.0, 2.0, 0.001, 7.5;
  s.target = ScaleTarget::Delta;
  s.granularity = Granularity::Group;
  const auto path = temp_file("factors.json");
  write_scaling_factors(s, {{"note", "x"}}, path);
  const auto back = read_scaling_factors(path);
  EXPECT_EQ(back.values, s.values);
  EXPECT_EQ(back.target, ScaleTarget::Delta);
  EXPECT_EQ(back.granularity, Granularity::Group);
  EXPECT_EQ(factors_to_json(s)["layers"].size(), 3u);
  std::filesystem::remove(path);
  EXPECT_THROW(read_scaling_factors(path), IoError);
  EXPECT_THROW(factors_from_json(nlohmann::json{{"target", "A"}}), ConfigError);
}

TEST(FactorsIo, TraceCsv) {
  CalibrationTrace t{{1.5, 1.25}, {0.1, 0.2}, {0.9, 0.8}};
  const auto path = temp_file("trace.csv");
  write_calibration_trace_csv(t, path);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "iteration,loss,min_S,max_S");
  std::getline(in, line);
  EXPECT_EQ(line.rfind("0,1.5,", 0), 0u);
  std::filesystem::remove(path);
}
