#pragma once

// Discretized selective state-space recurrence.
//
// One layer maps a sequence u_1..u_T of d_model-vectors to outputs y_t through
// a diagonal state per channel:
//
//   delta_t = softplus(W_delta u_t + b_delta) * delta_scale
//   abar_t  = exp(-delta_t * a_scale * a)          (elementwise, in (0,1))
//   bbar_t  = delta_t (outer) (W_b u_t)             (simplified Euler input map)
//   h_t     = abar_t * h_{t-1} + bbar_t * u_t       (per channel)
//   y_t     = <W_c u_t, h_t> + d_skip * u_t
//
// Mamba layers have a separate a-row, delta and scale entry for every channel.
// Mamba2 layers share one scalar a, one delta and one scale entry per head.

#include "ssmlab/common.hpp"

#include <span>
#include <vector>

namespace ssmlab {

enum class Variant { Mamba, Mamba2 };

const char* to_string(Variant v);
Variant parse_variant(const std::string& s);

struct SsmLayerParams {
  Variant variant = Variant::Mamba;
  int d_model = 0;
  int d_state = 0;
  int n_heads = 1;  // Mamba2 only

  RowMatrix a;        // positive; Mamba: d_model x d_state, Mamba2: n_heads x 1
  RowMatrix w_delta;  // groups x d_model
  Vector b_delta;     // groups
  RowMatrix w_b;      // d_state x d_model
  RowMatrix w_c;      // d_state x d_model
  Vector d_skip;      // d_model

  static SsmLayerParams zeros(Variant variant, int d_model, int d_state, int n_heads = 1);

  // Number of independent (delta, scale) groups: channels for Mamba, heads for Mamba2.
  int groups() const { return variant == Variant::Mamba ? d_model : n_heads; }
  int head_dim() const { return variant == Variant::Mamba ? 1 : d_model / n_heads; }
  int group_of(int channel) const {
    return variant == Variant::Mamba ? channel : channel / head_dim();
  }
  double a_at(int channel, int state) const {
    return variant == Variant::Mamba ? a(channel, state) : a(channel / head_dim(), 0);
  }

  // Throws ConfigError on shape mismatch or a non-positive a entry.
  void validate() const;
};

// Per-group multipliers on a and on delta. Identity is all ones.
struct LayerScales {
  Vector a;
  Vector delta;

  static LayerScales identity(int groups);
  void validate(int groups) const;
};

struct DiscretizedStep {
  RowMatrix a_bar;  // d_model x d_state
  RowMatrix b_bar;  // d_model x d_state, delta of the channel's group times B_t
  Vector c;         // d_state
  Vector delta;     // groups
};

struct ScanState {
  RowMatrix h;  // d_model x d_state
  int t = 0;
};

double softplus(double x);
double sigmoid(double x);

DiscretizedStep discretize(const SsmLayerParams& params, const Eigen::Ref<const Vector>& x,
                           const LayerScales& scales);

// Intermediate values retained for the reverse pass.
struct ScanTape {
  RowMatrix u;          // T x d_model
  RowMatrix delta_pre;  // T x groups, before softplus
  RowMatrix delta;      // T x groups, after softplus and delta_scale
  RowMatrix b;          // T x d_state
  RowMatrix c;          // T x d_state
  std::vector<double> h;  // (T + 1) x d_model x d_state, h_0 first

  const double* state(int t) const {
    return h.data() + static_cast<std::size_t>(t) * static_cast<std::size_t>(u.cols()) *
                          static_cast<std::size_t>(b.cols());
  }
};

struct ScanResult {
  RowMatrix y;  // T x d_model
  ScanState final_state;
  std::vector<double> state_norm;        // ||h_t||_2 over the whole layer state
  std::vector<double> channel_norm_max;  // max over channels of ||h_{t,c}||_2
  std::vector<double> channel_norm_min;
};

struct ScanOptions {
  int layer = -1;            // reported in ScanOverflow
  ScanTape* tape = nullptr;  // filled when non-null
  bool record_norms = true;
};

// Sequential recurrence over the rows of u. h0 defaults to zeros when empty.
// Throws ScanOverflow on the first step whose state is not finite.
ScanResult selective_scan(const SsmLayerParams& params, const RowMatrix& u,
                          const LayerScales& scales, const RowMatrix& h0 = {},
                          const ScanOptions& options = {});

struct ScanGrads {
  RowMatrix du;
  RowMatrix a;
  RowMatrix w_delta;
  Vector b_delta;
  RowMatrix w_b;
  RowMatrix w_c;
  Vector d_skip;
  Vector scale_a;
  Vector scale_delta;
};

// Reverse pass of selective_scan (h0 = 0) given dL/dy. Gradients are with
// respect to the raw a entries, the projections, the input and both scales.
ScanGrads scan_backward(const SsmLayerParams& params, const LayerScales& scales,
                        const ScanTape& tape, const RowMatrix& dy);

struct MixingResult {
  std::vector<RowMatrix> m;  // one lower-triangular T x T matrix per channel
  RowMatrix y;               // y[:, c] = m[c] * u[:, c] + d_skip[c] * u[:, c]
};

inline constexpr int kMaxMaterializedLength = 4096;

// Builds M[i][j] = <c_i, (prod_{t=j+1..i} abar_t) * bbar_j> per channel from
// per-step discretizations. Throws ConfigError when T exceeds
// kMaxMaterializedLength.
MixingResult materialize_mixing_matrix(const SsmLayerParams& params, const RowMatrix& u,
                                       const LayerScales& scales);

struct TransitionProduct {
  Vector stepwise;  // prod_t exp(-a * delta_t)
  Vector summed;    // exp(-a * sum_t delta_t)
  double max_rel_diff = 0.0;
};

TransitionProduct cumulative_transition(std::span<const double> a_diag,
                                        std::span<const double> deltas);

}  // namespace ssmlab
