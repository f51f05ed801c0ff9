#include "ssmlab/norm_lab.hpp"
#include "ssmlab/quadrature.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace ssmlab;

TEST(ClosedForm, FrozenUniformValue) {
  // Reference value from an independent adaptive quadrature of 1/(1-x^2) on [0.5, 0.9] / 0.4.
  EXPECT_NEAR(closed_form_norm(0.5, 0.9, 1.0), 2.307283363, 1e-9);
  EXPECT_NEAR(closed_form_norm(0.5, 0.9, 3.0), 3.0 * 2.307283363, 3e-9);
}

TEST(ClosedForm, DegenerateLimit) {
  EXPECT_NEAR(closed_form_norm(0.7, 0.7, 2.0), 2.0 / (1 - 0.49), 1e-12);
  EXPECT_NEAR(closed_form_norm(0.7, 0.7 + 1e-9, 1.0), 1.0 / (1 - 0.49), 1e-6);
  EXPECT_THROW(closed_form_norm(0.5, 1.0, 1.0), NumericError);
  EXPECT_THROW(closed_form_norm(0.9, 0.5, 1.0), ConfigError);
}

TEST(LogRatio, PrintedExpression) {
  EXPECT_NEAR(log_ratio_norm(0.5, 0.9, 1.0), 1.7163, 5e-5);
  EXPECT_NEAR(log_ratio_norm(0.6, 0.6, 1.0), 0.6 / 0.64, 1e-12);
}

TEST(Rates, KnownValues) {
  EXPECT_NEAR(rate_mamba(0.1, 0.9), 0.09226, 1e-5);
  EXPECT_NEAR(rate_mamba2(0.1, 0.9), 0.47368, 1e-5);
  // Mamba2 grows faster than Mamba for the same lambda.
  for (double l : {0.1, 0.5, 0.99}) EXPECT_GT(rate_mamba2(1.0, l), rate_mamba(1.0, l));
}

TEST(GeneralIntegral, UniformMatchesClosedForm) {
  const auto p = Density::uniform(0.5, 0.9);
  EXPECT_NEAR(general_integral(p, 1.0) / closed_form_norm(0.5, 0.9, 1.0), 1.0, 1e-8);
  EXPECT_THROW(general_integral(Density::uniform(0.5, 1.0), 1.0), NumericError);
  Density bad = p;
  bad.pdf = [](double) { return 1.0; };
  EXPECT_THROW(general_integral(bad, 1.0), ConfigError);
}

TEST(Quadrature, SmoothIntegrands) {
  EXPECT_NEAR(integrate([](double x) { return std::sin(x); }, 0.0, M_PI).value, 2.0, 1e-12);
  EXPECT_NEAR(integrate([](double x) { return 1.0 / (1 - x * x); }, 0.0, 0.999999).value,
              std::atanh(0.999999), 1e-8);
}

TEST(Density, TriangularSamplesMatchMoments) {
  const auto p = Density::triangular(0.2, 0.8, 0.9);
  Rng rng(4);
  double mean = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double x = p.sample(rng);
    ASSERT_GE(x, 0.2);
    ASSERT_LE(x, 0.9);
    mean += x;
  }
  EXPECT_NEAR(mean / n, (0.2 + 0.8 + 0.9) / 3.0, 2e-3);
}

TEST(Lyapunov, ScalarRecursion) {
  const std::vector<double> lam{0.5};
  const std::vector<double> q{2.0};
  const auto tr = lyapunov_trace(lam, q, 3);
  ASSERT_EQ(tr.size(), 3u);
  EXPECT_DOUBLE_EQ(tr[0], 2.0);
  EXPECT_DOUBLE_EQ(tr[1], 0.25 * 2.0 + 2.0);
  EXPECT_DOUBLE_EQ(tr[2], 0.25 * 2.5 + 2.0);
}

TEST(Simulation, SmallInstanceMatchesClosedForm) {
  auto e = NormExperiment::half_inverse_d_preset(64);
  e.t_max = 400;
  e.trials = 64;
  e.seed = 3;
  const auto r = simulate_state_norm(e);
  EXPECT_EQ(r.trace_mean.size(), 400u);
  EXPECT_LT(std::abs(r.mc_estimate - r.closed_form), 4 * r.mc_stderr + 0.05 * r.closed_form);
  EXPECT_NEAR(r.ratio, r.mc_estimate / r.closed_form, 1e-12);
}

TEST(Simulation, PointLawIsGeometricSeries) {
  NormExperiment e;
  e.d = 8;
  e.m = 8;
  e.t_max = 200;
  e.trials = 2000;
  e.lambda_law = PointLaw{0.6};
  e.sigma_b2 = 0.1;
  e.seed = 9;
  const auto r = simulate_state_norm(e);
  EXPECT_NEAR(r.closed_form, r.e_bx2 / (1 - 0.36), 1e-9 * r.closed_form);
  EXPECT_LT(std::abs(r.mc_estimate - r.closed_form), 4 * r.mc_stderr);
}

TEST(Simulation, Validation) {
  NormExperiment e;
  e.d = 0;
  EXPECT_THROW(simulate_state_norm(e), ConfigError);
  e = NormExperiment{};
  e.lambda_law = UniformLaw{0.5, 1.0};
  EXPECT_THROW(simulate_state_norm(e), ConfigError);
}

TEST(InputNormBound, BoundHoldsAndIsTight) {
  EXPECT_DOUBLE_EQ(lemma1_bound(2.0, 0.5, 16), 4.0);
  const auto r = lemma1_check(1.0, 1.0, 16, 2000, 5);
  EXPECT_EQ(r.violations, 0);
  EXPECT_LE(r.max_observed, r.bound * (1 + 1e-12));
  // Identity B with the all-ones x attains the bound exactly.
  const RowMatrix eye = RowMatrix::Identity(16, 16);
  EXPECT_NEAR(spectral_norm(eye), 1.0, 1e-12);
  EXPECT_NEAR((eye * Vector::Ones(16)).norm(), lemma1_bound(1.0, 1.0, 16), 1e-12);
}

TEST(SpectralNorm, DiagonalMatrix) {
  RowMatrix b = RowMatrix::Zero(3, 3);
  b.diagonal() << 0.5, -3.0, 2.0;
  EXPECT_NEAR(spectral_norm(b), 3.0, 1e-10);
}

TEST(Asymptotes, UniformFamilies) {
  const DensityFamily uni = [](double hi) { return Density::uniform(0.0, hi); };
  // p(1) = 1 for U[0, lambda_max] as lambda_max -> 1.
  const std::vector<double> near_one{0.999, 0.9999, 0.99999, 0.999999};
  const auto fit = asymptote_fit(uni, near_one, 1.0);
  EXPECT_NEAR(fit.predicted, 0.5, 1e-15);
  EXPECT_LT(fit.rel_error, 0.1);
  // atanh(x) / x -> 1, so the integral approaches p(0) lambda_max = 1.
  const std::vector<double> small{1e-1, 1e-2, 1e-3};
  const auto v = vanishing_fit(uni, small);
  EXPECT_NEAR(v.rel_error_at_smallest, std::atanh(1e-3) / 1e-3 - 1.0, 1e-9);
  EXPECT_NEAR(v.slope, 1.0, 0.01);
}
