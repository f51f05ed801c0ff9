#include "ssmlab/ssm_core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace ssmlab {

const char* to_string(Variant v) { return v == Variant::Mamba ? "mamba" : "mamba2"; }

Variant parse_variant(const std::string& s) {
  if (s == "mamba") return Variant::Mamba;
  if (s == "mamba2") return Variant::Mamba2;
  throw ConfigError("unknown variant '" + s + "' (expected mamba or mamba2)");
}

SsmLayerParams SsmLayerParams::zeros(Variant variant, int d_model, int d_state, int n_heads) {
  require(d_model > 0 && d_state > 0, "SsmLayerParams: dimensions must be positive");
  SsmLayerParams p;
  p.variant = variant;
  p.d_model = d_model;
  p.d_state = d_state;
  p.n_heads = variant == Variant::Mamba ? 1 : n_heads;
  require(p.n_heads > 0 && d_model % p.n_heads == 0,
          "SsmLayerParams: d_model must be divisible by n_heads");
  const int g = p.groups();
  p.a = variant == Variant::Mamba ? RowMatrix::Ones(d_model, d_state) : RowMatrix::Ones(g, 1);
  p.w_delta = RowMatrix::Zero(g, d_model);
  p.b_delta = Vector::Zero(g);
  p.w_b = RowMatrix::Zero(d_state, d_model);
  p.w_c = RowMatrix::Zero(d_state, d_model);
  p.d_skip = Vector::Zero(d_model);
  return p;
}

void SsmLayerParams::validate() const {
  require(d_model > 0 && d_state > 0, "SsmLayerParams: dimensions must be positive");
  if (variant == Variant::Mamba2) {
    require(n_heads > 0 && d_model % n_heads == 0,
            "SsmLayerParams: d_model must be divisible by n_heads");
    require(a.rows() == n_heads && a.cols() == 1, "SsmLayerParams: Mamba2 a must be n_heads x 1");
  } else {
    require(a.rows() == d_model && a.cols() == d_state,
            "SsmLayerParams: Mamba a must be d_model x d_state");
  }
  const int g = groups();
  require(w_delta.rows() == g && w_delta.cols() == d_model, "SsmLayerParams: w_delta shape");
  require(b_delta.size() == g, "SsmLayerParams: b_delta shape");
  require(w_b.rows() == d_state && w_b.cols() == d_model, "SsmLayerParams: w_b shape");
  require(w_c.rows() == d_state && w_c.cols() == d_model, "SsmLayerParams: w_c shape");
  require(d_skip.size() == d_model, "SsmLayerParams: d_skip shape");
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    require(a.data()[i] > 0.0 && std::isfinite(a.data()[i]),
            "SsmLayerParams: every a entry must be positive and finite");
  }
}

LayerScales LayerScales::identity(int groups) {
  return LayerScales{Vector::Ones(groups), Vector::Ones(groups)};
}

void LayerScales::validate(int groups) const {
  require(a.size() == groups && delta.size() == groups,
          "LayerScales: expected " + std::to_string(groups) + " entries per scale");
  for (int g = 0; g < groups; ++g) {
    require(a[g] > 0.0 && delta[g] > 0.0 && std::isfinite(a[g]) && std::isfinite(delta[g]),
            "LayerScales: scales must be positive and finite");
  }
}

double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

namespace {

void require_finite(const double* data, Eigen::Index n, const char* what) {
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!std::isfinite(data[i])) throw NumericError(std::string(what) + ": non-finite input");
  }
}

// a * a_scale per (channel, state) for Mamba, per head for Mamba2.
RowMatrix scaled_a(const SsmLayerParams& p, const LayerScales& s) {
  RowMatrix out = p.a;
  // Rows of a are exactly the scale groups in both variants.
  for (Eigen::Index r = 0; r < out.rows(); ++r) out.row(r) *= s.a[r];
  return out;
}

}  // namespace

DiscretizedStep discretize(const SsmLayerParams& params, const Eigen::Ref<const Vector>& x,
                           const LayerScales& scales) {
  params.validate();
  const int g = params.groups();
  scales.validate(g);
  require(x.size() == params.d_model, "discretize: input has wrong width");
  require_finite(x.data(), x.size(), "discretize");

  DiscretizedStep step;
  const Vector pre = params.w_delta * x + params.b_delta;
  step.delta.resize(g);
  for (int k = 0; k < g; ++k) step.delta[k] = softplus(pre[k]) * scales.delta[k];
  const Vector b = params.w_b * x;
  step.c = params.w_c * x;

  const RowMatrix as = scaled_a(params, scales);
  step.a_bar.resize(params.d_model, params.d_state);
  step.b_bar.resize(params.d_model, params.d_state);
  for (int c = 0; c < params.d_model; ++c) {
    const int grp = params.group_of(c);
    const double dl = step.delta[grp];
    for (int i = 0; i < params.d_state; ++i) {
      const double a = params.variant == Variant::Mamba ? as(c, i) : as(grp, 0);
      step.a_bar(c, i) = std::exp(-(dl * a));
      step.b_bar(c, i) = dl * b[i];
    }
  }
  return step;
}

ScanResult selective_scan(const SsmLayerParams& params, const RowMatrix& u,
                          const LayerScales& scales, const RowMatrix& h0,
                          const ScanOptions& options) {
  params.validate();
  const int groups = params.groups();
  scales.validate(groups);
  const int T = static_cast<int>(u.rows());
  const int D = params.d_model;
  const int N = params.d_state;
  require(T >= 1, "selective_scan: sequence must have at least one step");
  require(u.cols() == D, "selective_scan: input has wrong width");
  require_finite(u.data(), u.size(), "selective_scan");

  RowMatrix pre = u * params.w_delta.transpose();
  pre.rowwise() += params.b_delta.transpose();
  const RowMatrix bmat = u * params.w_b.transpose();
  const RowMatrix cmat = u * params.w_c.transpose();
  RowMatrix delta(T, groups);
  for (int t = 0; t < T; ++t) {
    for (int k = 0; k < groups; ++k) delta(t, k) = softplus(pre(t, k)) * scales.delta[k];
  }
  const RowMatrix as = scaled_a(params, scales);

  RowMatrix h;
  if (h0.size() == 0) {
    h = RowMatrix::Zero(D, N);
  } else {
    require(h0.rows() == D && h0.cols() == N, "selective_scan: h0 has wrong shape");
    require_finite(h0.data(), h0.size(), "selective_scan h0");
    h = h0;
  }

  ScanTape* tape = options.tape;
  const std::size_t state_size = static_cast<std::size_t>(D) * static_cast<std::size_t>(N);
  if (tape) {
    tape->u = u;
    tape->delta_pre = pre;
    tape->delta = delta;
    tape->b = bmat;
    tape->c = cmat;
    tape->h.assign((static_cast<std::size_t>(T) + 1) * state_size, 0.0);
    std::copy(h.data(), h.data() + state_size, tape->h.begin());
  }

  ScanResult result;
  result.y.resize(T, D);
  if (options.record_norms) {
    result.state_norm.resize(T);
    result.channel_norm_max.resize(T);
    result.channel_norm_min.resize(T);
  }

  const bool mamba = params.variant == Variant::Mamba;
  for (int t = 0; t < T; ++t) {
    const double* brow = bmat.data() + static_cast<std::size_t>(t) * N;
    const double* crow = cmat.data() + static_cast<std::size_t>(t) * N;
    double total = 0.0;
    double cmax = 0.0;
    double cmin = std::numeric_limits<double>::infinity();
    for (int c = 0; c < D; ++c) {
      const int grp = params.group_of(c);
      const double dl = delta(t, grp);
      const double uc = u(t, c);
      double* hc = h.data() + static_cast<std::size_t>(c) * N;
      double yc = 0.0;
      double sq = 0.0;
      if (mamba) {
        const double* ac = as.data() + static_cast<std::size_t>(c) * N;
        for (int i = 0; i < N; ++i) {
          const double abar = std::exp(-(dl * ac[i]));
          const double hv = abar * hc[i] + dl * brow[i] * uc;
          hc[i] = hv;
          yc += crow[i] * hv;
          sq += hv * hv;
        }
      } else {
        const double abar = std::exp(-(dl * as(grp, 0)));
        for (int i = 0; i < N; ++i) {
          const double hv = abar * hc[i] + dl * brow[i] * uc;
          hc[i] = hv;
          yc += crow[i] * hv;
          sq += hv * hv;
        }
      }
      result.y(t, c) = yc + params.d_skip[c] * uc;
      total += sq;
      cmax = std::max(cmax, sq);
      cmin = std::min(cmin, sq);
    }
    if (!std::isfinite(total)) throw ScanOverflow(options.layer, t);
    if (options.record_norms) {
      result.state_norm[t] = std::sqrt(total);
      result.channel_norm_max[t] = std::sqrt(cmax);
      result.channel_norm_min[t] = std::sqrt(cmin);
    }
    if (tape) {
      std::copy(h.data(), h.data() + state_size,
                tape->h.begin() + static_cast<std::ptrdiff_t>((t + 1) * state_size));
    }
  }
  result.final_state.h = std::move(h);
  result.final_state.t = T;
  return result;
}

ScanGrads scan_backward(const SsmLayerParams& params, const LayerScales& scales,
                        const ScanTape& tape, const RowMatrix& dy) {
  const int T = static_cast<int>(tape.u.rows());
  const int D = params.d_model;
  const int N = params.d_state;
  const int groups = params.groups();
  require(dy.rows() == T && dy.cols() == D, "scan_backward: dy has wrong shape");
  const bool mamba = params.variant == Variant::Mamba;
  const RowMatrix as = scaled_a(params, scales);

  ScanGrads g;
  g.du = RowMatrix::Zero(T, D);
  g.a = RowMatrix::Zero(params.a.rows(), params.a.cols());
  g.d_skip = Vector::Zero(D);
  g.scale_a = Vector::Zero(groups);
  g.scale_delta = Vector::Zero(groups);
  RowMatrix d_delta = RowMatrix::Zero(T, groups);
  RowMatrix db = RowMatrix::Zero(T, N);
  RowMatrix dc = RowMatrix::Zero(T, N);

  // Running dL/dh_t, one row per channel.
  RowMatrix grad_h = RowMatrix::Zero(D, N);
  for (int t = T - 1; t >= 0; --t) {
    const double* h_prev = tape.state(t);
    const double* h_cur = tape.state(t + 1);
    const double* brow = tape.b.data() + static_cast<std::size_t>(t) * N;
    const double* crow = tape.c.data() + static_cast<std::size_t>(t) * N;
    double* dbrow = db.data() + static_cast<std::size_t>(t) * N;
    double* dcrow = dc.data() + static_cast<std::size_t>(t) * N;
    for (int c = 0; c < D; ++c) {
      const int grp = params.group_of(c);
      const double dl = tape.delta(t, grp);
      const double uc = tape.u(t, c);
      const double dyc = dy(t, c);
      const double* hp = h_prev + static_cast<std::size_t>(c) * N;
      const double* hn = h_cur + static_cast<std::size_t>(c) * N;
      double* gh = grad_h.data() + static_cast<std::size_t>(c) * N;

      g.d_skip[c] += dyc * uc;
      double du = dyc * params.d_skip[c];
      double d_dl = 0.0;
      double d_scale_a = 0.0;
      double d_a_head = 0.0;
      const double sa = scales.a[grp];
      for (int i = 0; i < N; ++i) {
        dcrow[i] += dyc * hn[i];
        const double gi = gh[i] + dyc * crow[i];
        const double a_raw = params.a_at(c, i);
        const double a_eff = mamba ? as(c, i) : as(grp, 0);
        const double abar = std::exp(-(dl * a_eff));
        const double d_abar = gi * hp[i] * abar;  // times d(abar)/d(exponent) = abar
        d_dl += -d_abar * a_eff + gi * brow[i] * uc;
        d_scale_a += -d_abar * dl * a_raw;
        if (mamba) {
          g.a(c, i) += -d_abar * dl * sa;
        } else {
          d_a_head += -d_abar * dl * sa;
        }
        dbrow[i] += gi * dl * uc;
        du += gi * dl * brow[i];
        gh[i] = gi * abar;
      }
      if (!mamba) g.a(grp, 0) += d_a_head;
      g.scale_a[grp] += d_scale_a;
      d_delta(t, grp) += d_dl;
      g.du(t, c) += du;
    }
  }

  RowMatrix d_pre(T, groups);
  for (int t = 0; t < T; ++t) {
    for (int k = 0; k < groups; ++k) {
      const double pre = tape.delta_pre(t, k);
      d_pre(t, k) = d_delta(t, k) * scales.delta[k] * sigmoid(pre);
      g.scale_delta[k] += d_delta(t, k) * softplus(pre);
    }
  }
  g.w_delta = d_pre.transpose() * tape.u;
  g.b_delta = d_pre.colwise().sum().transpose();
  g.w_b = db.transpose() * tape.u;
  g.w_c = dc.transpose() * tape.u;
  g.du.noalias() += d_pre * params.w_delta;
  g.du.noalias() += db * params.w_b;
  g.du.noalias() += dc * params.w_c;
  return g;
}

MixingResult materialize_mixing_matrix(const SsmLayerParams& params, const RowMatrix& u,
                                       const LayerScales& scales) {
  const int T = static_cast<int>(u.rows());
  require(T >= 1, "materialize_mixing_matrix: sequence must have at least one step");
  if (T > kMaxMaterializedLength) {
    throw ConfigError("materialize_mixing_matrix: length " + std::to_string(T) +
                      " exceeds the limit of " + std::to_string(kMaxMaterializedLength));
  }
  const int D = params.d_model;
  const int N = params.d_state;
  std::vector<DiscretizedStep> steps;
  steps.reserve(static_cast<std::size_t>(T));
  for (int t = 0; t < T; ++t) steps.push_back(discretize(params, u.row(t).transpose(), scales));

  MixingResult out;
  out.m.assign(static_cast<std::size_t>(D), RowMatrix::Zero(T, T));
  out.y.resize(T, D);
  Vector prod(N);
  for (int c = 0; c < D; ++c) {
    RowMatrix& m = out.m[static_cast<std::size_t>(c)];
    for (int j = 0; j < T; ++j) {
      for (int k = 0; k < N; ++k) prod[k] = steps[j].b_bar(c, k);
      m(j, j) = steps[j].c.dot(prod);
      for (int i = j + 1; i < T; ++i) {
        for (int k = 0; k < N; ++k) prod[k] *= steps[i].a_bar(c, k);
        m(i, j) = steps[i].c.dot(prod);
      }
    }
    out.y.col(c) = m * u.col(c) + params.d_skip[c] * u.col(c);
  }
  return out;
}

TransitionProduct cumulative_transition(std::span<const double> a_diag,
                                        std::span<const double> deltas) {
  require_finite(a_diag.data(), static_cast<Eigen::Index>(a_diag.size()), "cumulative_transition");
  require_finite(deltas.data(), static_cast<Eigen::Index>(deltas.size()), "cumulative_transition");
  for (double d : deltas) require(d > 0.0, "cumulative_transition: deltas must be positive");

  const auto n = static_cast<Eigen::Index>(a_diag.size());
  TransitionProduct out;
  out.stepwise = Vector::Ones(n);
  double total = 0.0;
  for (double d : deltas) {
    total += d;
    for (Eigen::Index i = 0; i < n; ++i) out.stepwise[i] *= std::exp(-a_diag[i] * d);
  }
  out.summed.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    out.summed[i] = std::exp(-a_diag[i] * total);
    const double scale = std::max(std::abs(out.summed[i]), std::abs(out.stepwise[i]));
    if (scale > 0.0) {
      out.max_rel_diff =
          std::max(out.max_rel_diff, std::abs(out.stepwise[i] - out.summed[i]) / scale);
    }
  }
  return out;
}

}  // namespace ssmlab
