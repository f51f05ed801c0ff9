#pragma once

// Experiment orchestration behind the ssmlab CLI. Each command reads an
// ExperimentConfig, writes CSV artifacts into one output directory and always
// leaves a manifest.json there, including on failure.

#include "ssmlab/calibration.hpp"
#include "ssmlab/data_tasks.hpp"
#include "ssmlab/toy_model.hpp"

#include <json.hpp>

#include <cstdint>
#include <exception>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace ssmlab {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr const char* kOutputRootEnv = "SSMLAB_OUTPUT_ROOT";

enum class Task { Lm, Passkey };

struct CalibrationSettings {
  std::string method = "spsa";  // spsa | grad
  std::vector<std::string> targets{"A", "Delta"};
  std::string granularity = "layer";
  double c = 0.01;
  double eta = 0.05;
  int iterations = 300;
  int sequences = 20;
  int length = 2048;
  double constant_factor = 2.0;
  std::string init = "uniform";  // uniform (random in (0, 1]) or ones
};

struct EvalSettings {
  std::vector<int> lengths{256, 512, 1024, 2048, 4096};
  int windows = 8;
  std::vector<int> passkey_lengths{256, 512, 1024};
  std::vector<double> depths{0.0, 0.25, 0.5, 0.75, 1.0};
  int per_cell = 10;
};

struct NormLabSettings {
  int d = 512;
  int m = 512;
  int t_max = 5000;
  int trials = 64;
  double lambda_lo = 0.5;
  double lambda_hi = 0.9;
  double sigma_b2 = 0.0;  // 0 means 1 / (2 d)
  long long lemma_samples = 100000;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  Task task = Task::Lm;
  ToyModelConfig model;
  TrainConfig train;
  CalibrationSettings calibration;
  EvalSettings eval;
  NormLabSettings normlab;
  std::string corpus;  // optional text file for the lm task (byte tokens)
  std::string filler;  // optional text file for passkey filler
  BabbleConfig babble;
  std::string output_dir;

  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& cfg);
// Overlays j onto cfg. Unknown keys raise ConfigError naming their path.
void apply_json(ExperimentConfig& cfg, const nlohmann::json& j);
// Parse errors report the byte offset in the file.
ExperimentConfig load_config(const std::filesystem::path& path);

// Seeded data for the configured task.
SampleSource train_source(const ExperimentConfig& cfg);
std::vector<int> heldout_corpus(const ExperimentConfig& cfg, std::size_t tokens);
std::vector<TokenSample> calibration_set(const ExperimentConfig& cfg);

ToyModel train_from_config(const ExperimentConfig& cfg, TrainResult* result = nullptr,
                           const TrainProgress& progress = {});

ScalingFactors calibrate_from_config(const ToyModel& model, const ExperimentConfig& cfg,
                                     ScaleTarget target, CalibrationTrace* trace = nullptr);

struct StrategyRow {
  std::string strategy;
  std::vector<double> values;  // one per eval length
};

// Baseline, constant and calibrated scaling of A and Delta evaluated on the
// same suite: perplexity for the lm task, mean passkey accuracy otherwise.
std::vector<StrategyRow> compare_strategies(const ToyModel& model, const ExperimentConfig& cfg,
                                            std::vector<int>* lengths_out = nullptr);

struct CommandOptions {
  std::string checkpoint;
  std::string factors;
  std::string target = "A";
  std::string out;  // exact output directory; overrides naming
  std::string out_root;
};

int exit_code_for(const std::exception_ptr& error);

// Runs one CLI verb. Returns the process exit code; never throws.
int run_command(const std::string& command, const ExperimentConfig& cfg,
                const CommandOptions& opts);

}  // namespace ssmlab
