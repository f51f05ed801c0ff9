#pragma once

// Small language model built from diagonal selective-SSM blocks:
//
//   x_0 = embed[token]
//   x_{l+1} = x_l + W_out,l * ssm_l(rmsnorm(x_l) * g_l)
//   logits = readout * (rmsnorm(x_L) * g_final)
//
// Gradients are derived by hand for exactly this architecture.

#include "ssmlab/common.hpp"
#include "ssmlab/ssm_core.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace ssmlab {

struct ToyModelConfig {
  int vocab_size = 64;
  int d_model = 128;
  int d_state = 16;
  int n_layers = 4;
  Variant variant = Variant::Mamba;
  int n_heads = 1;
  int train_length = 256;
  std::uint64_t seed = 0;
  // a is spread log-uniformly over [a_min, a_max]; the delta bias so that
  // softplus(bias) is log-uniform over [delta_min, delta_max].
  double a_min = 0.05;
  double a_max = 8.0;
  double delta_min = 0.01;
  double delta_max = 0.1;

  void validate() const;
};

void to_json(nlohmann::json& j, const ToyModelConfig& c);
void from_json(const nlohmann::json& j, ToyModelConfig& c);

struct Block {
  Vector norm_w;
  SsmLayerParams ssm;
  RowMatrix w_out;  // d_model x d_model
};

struct ParamView {
  std::string name;
  double* data;
  Eigen::Index rows;
  Eigen::Index cols;
  bool positive;  // trained in log space
  Eigen::Index size() const { return rows * cols; }
};

struct ConstParamView {
  std::string name;
  const double* data;
  Eigen::Index rows;
  Eigen::Index cols;
  Eigen::Index size() const { return rows * cols; }
};

class ToyModel {
 public:
  ToyModel() = default;
  // All parameters allocated with their final shapes and zero values (a = 1).
  explicit ToyModel(const ToyModelConfig& cfg);

  const ToyModelConfig& config() const { return cfg_; }

  RowMatrix embed;  // vocab x d_model
  std::vector<Block> blocks;
  Vector final_norm_w;
  RowMatrix readout;  // vocab x d_model

  long long train_steps = 0;
  double final_train_loss = std::numeric_limits<double>::quiet_NaN();

  std::vector<ParamView> params();
  std::vector<ConstParamView> params() const;
  std::size_t parameter_count() const;
  std::vector<SsmLayerParams> ssm_layers() const;

  // Same shapes, every entry zero (a included); used as a gradient buffer.
  ToyModel zeros_like() const;

  // SHA-256 over parameter names, shapes and values, as lowercase hex.
  std::string checksum() const;

 private:
  ToyModelConfig cfg_;
};

std::size_t expected_parameter_count(const ToyModelConfig& cfg);

ToyModel build_model(const ToyModelConfig& cfg);

// Per-layer scale hooks applied at discretization time.
struct ModelScales {
  std::vector<LayerScales> layers;

  static ModelScales identity(const ToyModel& model);
};

struct LayerTrace {
  std::vector<double> state_norm;
  std::vector<double> channel_norm_max;
  std::vector<double> channel_norm_min;
};

struct ForwardResult {
  RowMatrix logits;  // T x vocab; row t predicts token t + 1
  std::vector<LayerTrace> traces;
};

ForwardResult forward(const ToyModel& model, std::span<const int> tokens,
                      const ModelScales* scales = nullptr);

// loss_mask[t] != 0 marks token t as a prediction target (t >= 1). An empty
// mask targets every token after the first.
struct TokenSample {
  std::vector<int> tokens;
  std::vector<std::uint8_t> loss_mask;
};

struct LossStats {
  double nll_sum = 0.0;
  long long count = 0;
  double mean() const { return count ? nll_sum / static_cast<double>(count) : 0.0; }
};

struct ScaleGrads {
  std::vector<Vector> a;      // per layer, per group
  std::vector<Vector> delta;

  static ScaleGrads zeros(const ToyModel& model);
  void add(const ScaleGrads& other);
};

LossStats sequence_loss(const ToyModel& model, const TokenSample& sample,
                        const ModelScales* scales = nullptr);

// Summed next-token NLL and its gradient. Gradients are accumulated (added)
// into *param_grads and *scale_grads when they are non-null.
LossStats loss_and_grad(const ToyModel& model, const TokenSample& sample,
                        const ModelScales* scales, ToyModel* param_grads,
                        ScaleGrads* scale_grads);

struct TrainConfig {
  int steps = 2000;
  int batch = 8;
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 1.0;
  int warmup = 100;
  double min_lr_fraction = 0.1;  // cosine decay floor
};

using SampleSource = std::function<TokenSample(std::uint64_t index)>;

struct TrainResult {
  std::vector<double> loss_curve;  // mean loss per step
  double final_loss = 0.0;         // mean over the last min(50, steps) steps
};

using TrainProgress = std::function<void(int step, double loss)>;

// Adam on every parameter; a is updated in log space so it stays positive.
// Sample i of step k is source(k * batch + i). Aborts with NumericError when
// the loss stays above 10x its initial value for 100 consecutive steps.
TrainResult train(ToyModel& model, const SampleSource& source, const TrainConfig& cfg,
                  const TrainProgress& progress = {});

struct PplRow {
  int length = 0;
  int windows = 0;
  double mean_nll = 0.0;
  double ppl = 0.0;
};

// exp(mean next-token NLL) over up to max_windows non-overlapping windows of
// each length, started at evenly spaced offsets across corpus.
std::vector<PplRow> perplexity_by_length(const ToyModel& model, std::span<const int> corpus,
                                         std::span<const int> lengths,
                                         const ModelScales* scales = nullptr,
                                         int max_windows = 8);

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const ToyModel& model, const std::filesystem::path& path);
ToyModel load_checkpoint(const std::filesystem::path& path);

}  // namespace ssmlab
