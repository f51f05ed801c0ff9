#include "ssmlab/norm_lab.hpp"

#include "ssmlab/csv.hpp"
#include "ssmlab/parallel.hpp"
#include "ssmlab/quadrature.hpp"
#include "ssmlab/toy_model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace ssmlab {

Density Density::uniform(double lo, double hi) {
  require(lo < hi, "Density::uniform: empty support");
  const double p = 1.0 / (hi - lo);
  return Density{[=](double x) { return (x >= lo && x <= hi) ? p : 0.0; }, lo, hi, p};
}

Density Density::triangular(double lo, double mode, double hi) {
  require(lo < hi && lo <= mode && mode <= hi, "Density::triangular: need lo <= mode <= hi");
  const double width = hi - lo;
  auto pdf = [=](double x) {
    if (x < lo || x > hi) return 0.0;
    if (x < mode) return 2.0 * (x - lo) / (width * (mode - lo));
    if (x > mode) return 2.0 * (hi - x) / (width * (hi - mode));
    return 2.0 / width;
  };
  return Density{pdf, lo, hi, 2.0 / width};
}

double Density::sample(Rng& rng) const {
  for (;;) {
    const double x = rng.uniform(lo, hi);
    if (rng.uniform(0.0, pdf_max) <= pdf(x)) return x;
  }
}

NormExperiment NormExperiment::half_inverse_d_preset(int d) {
  NormExperiment e;
  e.d = d;
  e.m = d;
  e.sigma_b2 = 1.0 / (2.0 * d);
  return e;
}

NormExperiment NormExperiment::inverse_sqrt_d_preset(int d) {
  NormExperiment e;
  e.d = d;
  e.m = d;
  e.sigma_b2 = 1.0 / std::sqrt(static_cast<double>(d));
  return e;
}

namespace {

struct LawBounds {
  double lo;
  double hi;
};

LawBounds bounds_of(const LambdaLaw& law) {
  return std::visit(
      [](const auto& l) -> LawBounds {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, UniformLaw>) {
          return {l.lo, l.hi};
        } else if constexpr (std::is_same_v<T, PointLaw>) {
          return {l.lambda, l.lambda};
        } else {
          return {l.lo, l.hi};
        }
      },
      law);
}

double sample_lambda(const LambdaLaw& law, Rng& rng) {
  return std::visit(
      [&rng](const auto& l) -> double {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, UniformLaw>) {
          return rng.uniform(l.lo, l.hi);
        } else if constexpr (std::is_same_v<T, PointLaw>) {
          return l.lambda;
        } else {
          return l.sample(rng);
        }
      },
      law);
}

double predicted_norm(const LambdaLaw& law, double e_bx2) {
  return std::visit(
      [e_bx2](const auto& l) -> double {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, UniformLaw>) {
          return closed_form_norm(l.lo, l.hi, e_bx2);
        } else if constexpr (std::is_same_v<T, PointLaw>) {
          return closed_form_norm(l.lambda, l.lambda, e_bx2);
        } else {
          return general_integral(l, e_bx2);
        }
      },
      law);
}

}  // namespace

void NormExperiment::validate() const {
  require(d >= 1 && m >= 1, "NormExperiment: d and m must be >= 1");
  require(t_max >= 1, "NormExperiment: t_max must be >= 1");
  require(trials >= 1, "NormExperiment: trials must be >= 1");
  require(sigma_b2 >= 0.0, "NormExperiment: sigma_b2 must be non-negative");
  const auto b = bounds_of(lambda_law);
  require(b.lo >= 0.0 && b.lo <= b.hi, "NormExperiment: need 0 <= lambda_min <= lambda_max");
  require(b.hi < 1.0, "NormExperiment: lambda_max must be below 1");
}

NormResult simulate_state_norm(const NormExperiment& e) {
  e.validate();
  const int d = e.d;
  const int m = e.m;
  const int T = e.t_max;
  const double sigma_b = std::sqrt(e.sigma_b2);
  constexpr int kChunk = 64;

  std::vector<std::vector<double>> traces(static_cast<std::size_t>(e.trials));
  std::vector<double> energies(static_cast<std::size_t>(e.trials));

  parallel_for(static_cast<std::size_t>(e.trials), [&](std::size_t trial) {
    Rng rng(derive_seed(e.seed, trial));
    Vector lambda(d);
    for (int i = 0; i < d; ++i) {
      lambda[i] = sample_lambda(e.lambda_law, rng);
      if (!(lambda[i] < 1.0)) throw NumericError("simulate_state_norm: sampled lambda >= 1");
    }
    Eigen::MatrixXd b(d, m);
    for (int j = 0; j < m; ++j) {
      for (int i = 0; i < d; ++i) b(i, j) = sigma_b * rng.normal();
    }
    energies[trial] = b.squaredNorm();

    auto& trace = traces[trial];
    trace.resize(static_cast<std::size_t>(T));
    Vector h = Vector::Zero(d);
    Eigen::MatrixXd x(m, kChunk);
    Eigen::MatrixXd bx(d, kChunk);
    for (int t0 = 0; t0 < T; t0 += kChunk) {
      const int n = std::min(kChunk, T - t0);
      for (int k = 0; k < n; ++k) {
        for (int j = 0; j < m; ++j) x(j, k) = rng.normal();
      }
      bx.leftCols(n).noalias() = b * x.leftCols(n);
      for (int k = 0; k < n; ++k) {
        h = lambda.cwiseProduct(h) + bx.col(k);
        trace[static_cast<std::size_t>(t0 + k)] = h.squaredNorm();
      }
    }
  });

  NormResult r;
  const double n = e.trials;
  r.trace_mean.assign(static_cast<std::size_t>(T), 0.0);
  r.trace_stderr.assign(static_cast<std::size_t>(T), 0.0);
  for (int t = 0; t < T; ++t) {
    double sum = 0.0;
    for (const auto& tr : traces) sum += tr[static_cast<std::size_t>(t)];
    const double mean = sum / n;
    double ss = 0.0;
    for (const auto& tr : traces) {
      const double dv = tr[static_cast<std::size_t>(t)] - mean;
      ss += dv * dv;
    }
    r.trace_mean[static_cast<std::size_t>(t)] = mean;
    r.trace_stderr[static_cast<std::size_t>(t)] =
        e.trials > 1 ? std::sqrt(ss / (n - 1.0) / n) : 0.0;
  }
  double e_sum = 0.0;
  for (double e : energies) e_sum += e;
  r.e_bx2 = e_sum / n;
  r.mc_estimate = r.trace_mean.back();
  r.mc_stderr = r.trace_stderr.back();
  r.closed_form = predicted_norm(e.lambda_law, r.e_bx2);
  r.ratio = r.closed_form > 0.0 ? r.mc_estimate / r.closed_form : 1.0;
  return r;
}

std::vector<double> lyapunov_trace(std::span<const double> lambdas, std::span<const double> q,
                                   int t_max) {
  require(lambdas.size() == q.size(), "lyapunov_trace: size mismatch");
  std::vector<double> s(lambdas.size(), 0.0);
  std::vector<double> out(static_cast<std::size_t>(std::max(0, t_max)));
  for (auto& v : out) {
    double total = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      s[i] = lambdas[i] * lambdas[i] * s[i] + q[i];
      total += s[i];
    }
    v = total;
  }
  return out;
}

namespace {

void check_interval(double lo, double hi, double e_bx2, const char* who) {
  require(lo >= 0.0 && lo <= hi, std::string(who) + ": need 0 <= lambda_min <= lambda_max");
  if (!(hi < 1.0)) {
    throw NumericError(std::string(who) + ": lambda_max >= 1 makes the stationary norm diverge");
  }
  require(e_bx2 >= 0.0, std::string(who) + ": E||Bx||^2 must be non-negative");
}

}  // namespace

double closed_form_norm(double lambda_min, double lambda_max, double e_bx2) {
  check_interval(lambda_min, lambda_max, e_bx2, "closed_form_norm");
  if (lambda_min == lambda_max) return e_bx2 / (1.0 - lambda_max * lambda_max);
  const double width = lambda_max - lambda_min;
  // atanh(hi) - atanh(lo) without cancellation.
  const double diff = std::atanh(width / (1.0 - lambda_min * lambda_max));
  return e_bx2 * diff / width;
}

double log_ratio_norm(double lambda_min, double lambda_max, double e_bx2) {
  check_interval(lambda_min, lambda_max, e_bx2, "log_ratio_norm");
  const double hi2 = 1.0 - lambda_max * lambda_max;
  if (lambda_min == lambda_max) return e_bx2 * lambda_max / hi2;
  const double width = lambda_max - lambda_min;
  return e_bx2 * std::log1p(width * (lambda_max + lambda_min) / hi2) / (2.0 * width);
}

double general_integral(const Density& p, double e_bx2) {
  require(p.lo >= 0.0 && p.lo < p.hi, "general_integral: invalid support");
  require(e_bx2 >= 0.0, "general_integral: E||Bx||^2 must be non-negative");
  if (!(p.hi < 1.0)) {
    throw NumericError("general_integral: support touching 1 is not integrable");
  }
  const double mass = integrate(p.pdf, p.lo, p.hi, 1e-12).value;
  if (std::abs(mass - 1.0) > 1e-6) {
    throw ConfigError("general_integral: density integrates to " + std::to_string(mass) +
                      ", not 1");
  }
  const auto& pdf = p.pdf;
  const double integral =
      integrate([&pdf](double l) { return pdf(l) / (1.0 - l * l); }, p.lo, p.hi, 1e-9).value;
  return e_bx2 * integral;
}

namespace {

void check_rate_args(double delta, double lambda, const char* who) {
  require(delta > 0.0, std::string(who) + ": delta must be positive");
  if (!(lambda > 0.0 && lambda < 1.0)) {
    throw ConfigError(std::string(who) + ": lambda must lie strictly inside (0, 1)");
  }
}

}  // namespace

double rate_mamba(double delta, double lambda) {
  check_rate_args(delta, lambda, "rate_mamba");
  return delta / (2.0 * lambda) * -std::log1p(-lambda * lambda);
}

double rate_mamba2(double delta, double lambda) {
  check_rate_args(delta, lambda, "rate_mamba2");
  return delta * lambda / (1.0 - lambda * lambda);
}

double lemma1_bound(double sigma_b, double sigma_x, int d) {
  require(sigma_b >= 0.0 && sigma_x >= 0.0 && d >= 1, "lemma1_bound: invalid arguments");
  return sigma_b * sigma_x * std::sqrt(static_cast<double>(d));
}

namespace {

struct PowerResult {
  double sigma = 0.0;
  Vector v;
};

PowerResult power_iteration(const RowMatrix& b, int max_iter, double tol) {
  const Eigen::Index n = b.cols();
  Rng rng(0x5eed);
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = rng.normal();
  v.normalize();
  double est = 0.0;
  for (int it = 0; it < max_iter; ++it) {
    const Vector w = b.transpose() * (b * v);
    const double next = v.dot(w);
    const double wn = w.norm();
    if (wn == 0.0) return {0.0, v};
    v = w / wn;
    if (std::abs(next - est) <= tol * next) {
      est = next;
      break;
    }
    est = next;
  }
  // Rayleigh quotient with the converged vector.
  return {(b * v).norm(), v};
}

}  // namespace

double spectral_norm(const RowMatrix& b, int max_iter, double tol) {
  return power_iteration(b, max_iter, tol).sigma;
}

Lemma1Result lemma1_check(double sigma_b, double sigma_x, int d, long long samples,
                          std::uint64_t seed, int matrices) {
  require(samples >= 1 && matrices >= 1, "lemma1_check: need at least one sample");
  Lemma1Result r;
  r.bound = lemma1_bound(sigma_b, sigma_x, d);
  const double limit = r.bound * (1.0 + 1e-12);
  Rng rng(seed);
  Vector x(d);
  for (int k = 0; k < matrices; ++k) {
    RowMatrix b(d, d);
    for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = rng.normal();
    const auto top = power_iteration(b, 20000, 1e-15);
    if (top.sigma > 0.0) b *= sigma_b / top.sigma;
    const long long count = samples / matrices + (k < samples % matrices ? 1 : 0);
    for (long long s = 0; s < count; ++s) {
      if (s == 0) {
        for (int i = 0; i < d; ++i) x[i] = top.v[i] >= 0.0 ? sigma_x : -sigma_x;
      } else if (s % 2 == 1) {
        for (int i = 0; i < d; ++i) x[i] = sigma_x * rng.rademacher();
      } else {
        for (int i = 0; i < d; ++i) x[i] = rng.uniform(-sigma_x, sigma_x);
      }
      const double obs = (b * x).norm();
      r.max_observed = std::max(r.max_observed, obs);
      if (obs > limit) ++r.violations;
      ++r.samples;
    }
  }
  return r;
}

AsymptoteFit asymptote_fit(const DensityFamily& family, std::span<const double> sweep,
                           double p_at_one) {
  require(sweep.size() >= 2, "asymptote_fit: need at least two sweep points");
  require(p_at_one > 0.0, "asymptote_fit: p(1) must be positive");
  std::vector<double> xs;
  std::vector<double> ys;
  for (double lm : sweep) {
    require(lm > 0.0 && lm < 1.0, "asymptote_fit: sweep values must lie in (0, 1)");
    xs.push_back(-std::log1p(-lm));
    ys.push_back(general_integral(family(lm), 1.0));
  }
  const double n = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
  }
  AsymptoteFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  fit.predicted = p_at_one / 2.0;
  fit.rel_error = std::abs(fit.slope - fit.predicted) / fit.predicted;
  return fit;
}

VanishingFit vanishing_fit(const DensityFamily& family, std::span<const double> sweep) {
  require(!sweep.empty(), "vanishing_fit: empty sweep");
  VanishingFit fit;
  double sxy = 0.0, sxx = 0.0;
  double smallest = std::numeric_limits<double>::infinity();
  for (double lm : sweep) {
    require(lm > 0.0 && lm < 1.0, "vanishing_fit: sweep values must lie in (0, 1)");
    const Density p = family(lm);
    const double x = p.pdf(p.lo) * lm;
    const double y = general_integral(p, 1.0);
    sxy += x * y;
    sxx += x * x;
    const double rel = std::abs(y / x - 1.0);
    fit.max_rel_error = std::max(fit.max_rel_error, rel);
    if (lm < smallest) {
      smallest = lm;
      fit.rel_error_at_smallest = rel;
    }
  }
  fit.slope = sxy / sxx;
  return fit;
}

std::vector<StateNormRow> track_model_state_norms(const ToyModel& model,
                                                  std::span<const std::vector<int>> sequences,
                                                  std::span<const int> lengths,
                                                  const ModelScales* scales) {
  require(!sequences.empty(), "track_model_state_norms: no sequences");
  require(!lengths.empty(), "track_model_state_norms: no lengths");
  for (std::size_t i = 1; i < lengths.size(); ++i) {
    require(lengths[i] > lengths[i - 1], "track_model_state_norms: lengths must be ascending");
  }
  const int longest = lengths.back();
  const int n_layers = model.config().n_layers;

  // The scan is causal, so one pass over the longest prefix gives every
  // shorter prefix's statistics.
  struct SeqStats {
    std::vector<std::vector<double>> max_norm;  // [layer][t]
    std::vector<std::vector<double>> min_norm;
  };
  std::vector<SeqStats> stats(sequences.size());
  parallel_for(sequences.size(), [&](std::size_t s) {
    const auto& seq = sequences[s];
    require(static_cast<int>(seq.size()) >= longest,
            "track_model_state_norms: sequence shorter than the longest length");
    const auto fwd =
        forward(model, std::span<const int>(seq.data(), static_cast<std::size_t>(longest)), scales);
    for (int l = 0; l < n_layers; ++l) {
      stats[s].max_norm.push_back(fwd.traces[static_cast<std::size_t>(l)].channel_norm_max);
      stats[s].min_norm.push_back(fwd.traces[static_cast<std::size_t>(l)].channel_norm_min);
    }
  });

  std::vector<StateNormRow> rows;
  for (int len : lengths) {
    require(len >= 1, "track_model_state_norms: lengths must be positive");
    for (int l = 0; l < n_layers; ++l) {
      StateNormRow row{len, l, 0.0, std::numeric_limits<double>::infinity()};
      for (const auto& st : stats) {
        const auto& mx = st.max_norm[static_cast<std::size_t>(l)];
        const auto& mn = st.min_norm[static_cast<std::size_t>(l)];
        for (int t = 0; t < len; ++t) {
          row.max_norm = std::max(row.max_norm, mx[static_cast<std::size_t>(t)]);
          row.min_norm = std::min(row.min_norm, mn[static_cast<std::size_t>(t)]);
        }
      }
      rows.push_back(row);
    }
  }
  return rows;
}

void write_norm_trace_csv(const NormResult& result, const std::filesystem::path& path) {
  CsvWriter csv(path, {"t", "mc_mean", "mc_stderr", "closed_form"});
  for (std::size_t t = 0; t < result.trace_mean.size(); ++t) {
    csv.row({std::to_string(t + 1), format_double(result.trace_mean[t]),
             format_double(result.trace_stderr[t]), format_double(result.closed_form)});
  }
}

void write_state_norms_csv(std::span<const StateNormRow> rows, const std::filesystem::path& path) {
  CsvWriter csv(path, {"length", "layer", "max_norm", "min_norm"});
  for (const auto& r : rows) {
    csv.row({std::to_string(r.length), std::to_string(r.layer), format_double(r.max_norm),
             format_double(r.min_norm)});
  }
}

}  // namespace ssmlab
