#pragma once

// Numerical checks of the steady-state norm of h_t = Lambda h_{t-1} + B x_t with
// random diagonal Lambda, Gaussian rows of B and x_t ~ N(0, I_m).

#include "ssmlab/common.hpp"
#include "ssmlab/rng.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <variant>
#include <vector>

namespace ssmlab {

class ToyModel;
struct ModelScales;

// A probability density on [lo, hi] with a known upper bound for rejection sampling.
struct Density {
  std::function<double(double)> pdf;
  double lo = 0.0;
  double hi = 0.0;
  double pdf_max = 0.0;

  static Density uniform(double lo, double hi);
  // Triangular density on [lo, hi] peaking at mode (mode may equal lo or hi).
  static Density triangular(double lo, double mode, double hi);

  double sample(Rng& rng) const;
};

struct UniformLaw {
  double lo = 0.5;
  double hi = 0.9;
};

struct PointLaw {
  double lambda = 0.0;
};

using LambdaLaw = std::variant<UniformLaw, Density, PointLaw>;

struct NormExperiment {
  int d = 512;
  int m = 512;
  int t_max = 5000;
  int trials = 64;
  LambdaLaw lambda_law = UniformLaw{};
  double sigma_b2 = 1.0 / 1024.0;  // per-component variance of each row of B
  std::uint64_t seed = 0;

  // Row covariance (1/(2d)) I.
  static NormExperiment half_inverse_d_preset(int d);
  // Row covariance (1/sqrt(d)) I.
  static NormExperiment inverse_sqrt_d_preset(int d);

  void validate() const;
};

struct NormResult {
  double mc_estimate = 0.0;  // mean of ||h_{t_max}||^2 over trials
  double mc_stderr = 0.0;
  double closed_form = 0.0;  // predicted E||h_inf||^2 using the sampled E||Bx||^2
  double ratio = 0.0;
  double e_bx2 = 0.0;  // mean over trials of ||B||_F^2
  std::vector<double> trace_mean;
  std::vector<double> trace_stderr;
};

NormResult simulate_state_norm(const NormExperiment& e);

// Exact E||h_t||^2, t = 1..t_max, from h_0 = 0 for fixed eigenvalues and row
// energies q_i = ||b_i||^2 (per-unit Lyapunov recursion s <- lambda^2 s + q).
std::vector<double> lyapunov_trace(std::span<const double> lambdas, std::span<const double> q,
                                   int t_max);

// E||h_inf||^2 for lambda ~ U[lo, hi]: e_bx2 * (atanh(hi) - atanh(lo)) / (hi - lo),
// with the lo == hi limit e_bx2 / (1 - lambda^2).
double closed_form_norm(double lambda_min, double lambda_max, double e_bx2);

// e_bx2 * log((1 - lo^2) / (1 - hi^2)) / (2 (hi - lo)). This is the uniform
// average of lambda / (1 - lambda^2), not of 1 / (1 - lambda^2); it is kept as
// the reference for the growth rates below. lo == hi gives e_bx2 lambda / (1 - lambda^2).
double log_ratio_norm(double lambda_min, double lambda_max, double e_bx2);

// e_bx2 * integral of p(lambda) / (1 - lambda^2) over the support. Throws when
// p does not integrate to 1 within 1e-6 or the support reaches 1.
double general_integral(const Density& p, double e_bx2);

double rate_mamba(double delta, double lambda);
double rate_mamba2(double delta, double lambda);

double lemma1_bound(double sigma_b, double sigma_x, int d);

// Largest singular value by power iteration on B^T B.
double spectral_norm(const RowMatrix& b, int max_iter = 20000, double tol = 1e-15);

struct Lemma1Result {
  double bound = 0.0;
  double max_observed = 0.0;
  long long samples = 0;
  long long violations = 0;
};

// Samples Gaussian B rescaled to spectral norm sigma_b and x with |x_i| <= sigma_x
// (box-uniform, random sign corners and the corner aligned with the top right
// singular vector). Observations above bound * (1 + 1e-12) count as violations.
Lemma1Result lemma1_check(double sigma_b, double sigma_x, int d, long long samples,
                          std::uint64_t seed, int matrices = 4);

struct AsymptoteFit {
  double slope = 0.0;
  double intercept = 0.0;
  double predicted = 0.0;
  double rel_error = 0.0;
};

using DensityFamily = std::function<Density(double lambda_max)>;

// Least-squares fit of I(lambda_max) against -log(1 - lambda_max); predicted = p(1)/2.
AsymptoteFit asymptote_fit(const DensityFamily& family, std::span<const double> sweep,
                           double p_at_one);

struct VanishingFit {
  double slope = 0.0;          // fit of I through the origin against p(0) * lambda_max
  double max_rel_error = 0.0;  // max |I / (p(0) lambda_max) - 1| over the sweep
  double rel_error_at_smallest = 0.0;
};

VanishingFit vanishing_fit(const DensityFamily& family, std::span<const double> sweep);

struct StateNormRow {
  int length = 0;
  int layer = 0;
  double max_norm = 0.0;
  double min_norm = 0.0;
};

// Per-layer max/min of channel state norms over every step of every sequence,
// for each prefix length. Sequences are truncated to each length in turn.
std::vector<StateNormRow> track_model_state_norms(const ToyModel& model,
                                                  std::span<const std::vector<int>> sequences,
                                                  std::span<const int> lengths,
                                                  const ModelScales* scales = nullptr);

void write_norm_trace_csv(const NormResult& result, const std::filesystem::path& path);
void write_state_norms_csv(std::span<const StateNormRow> rows, const std::filesystem::path& path);

}  // namespace ssmlab
