// ssmlab: train toy SSM language models, verify state-norm theory and
// calibrate spectrum scaling factors.
//
//   ssmlab train --config exp.json --out runs/base
//   ssmlab calibrate --checkpoint runs/base/model.ssmx --target A
//   ssmlab compare --checkpoint runs/base/model.ssmx --seed 3

#include "ssmlab/harness.hpp"
#include "ssmlab/parallel.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <optional>

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> task;
  std::optional<int> steps;
  std::optional<int> iterations;
  std::optional<int> calib_length;
  std::optional<int> calib_sequences;
  std::optional<std::string> method;
  std::optional<std::string> granularity;
  std::vector<int> lengths;
  std::vector<int> passkey_lengths;
  int threads = 1;
  ssmlab::CommandOptions opts;
};

void add_common(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "JSON experiment config");
  cmd->add_option("--seed", f.seed, "Base seed (overrides config)");
  cmd->add_option("--threads", f.threads, "Worker thread cap")->check(CLI::PositiveNumber);
  cmd->add_option("--out", f.opts.out, "Exact output directory");
  cmd->add_option("--out-root", f.opts.out_root,
                  "Parent for <command>_<timestamp>_<seed>/ (default $SSMLAB_OUTPUT_ROOT or runs)");
}

void add_model_input(CLI::App* cmd, Flags& f, bool factors) {
  cmd->add_option("--checkpoint", f.opts.checkpoint, "Model checkpoint")->required();
  if (factors) cmd->add_option("--factors", f.opts.factors, "scaling_factors.json to apply");
}

void add_calibration(CLI::App* cmd, Flags& f) {
  cmd->add_option("--task", f.task, "lm or passkey");
  cmd->add_option("--iterations", f.iterations, "Calibration iterations");
  cmd->add_option("--calib-length", f.calib_length, "Calibration sequence length");
  cmd->add_option("--calib-sequences", f.calib_sequences, "Calibration set size");
  cmd->add_option("--method", f.method, "spsa or grad");
  cmd->add_option("--granularity", f.granularity, "layer or group");
}

ssmlab::ExperimentConfig resolve(const Flags& f) {
  ssmlab::ExperimentConfig cfg;
  if (!f.config.empty()) cfg = ssmlab::load_config(f.config);
  if (f.seed) cfg.seed = *f.seed;
  if (f.task) ssmlab::apply_json(cfg, {{"task", *f.task}});
  if (f.steps) cfg.train.steps = *f.steps;
  if (f.iterations) cfg.calibration.iterations = *f.iterations;
  if (f.calib_length) cfg.calibration.length = *f.calib_length;
  if (f.calib_sequences) cfg.calibration.sequences = *f.calib_sequences;
  if (f.method) cfg.calibration.method = *f.method;
  if (f.granularity) cfg.calibration.granularity = *f.granularity;
  if (!f.lengths.empty()) cfg.eval.lengths = f.lengths;
  if (!f.passkey_lengths.empty()) cfg.eval.passkey_lengths = f.passkey_lengths;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Selective SSM length-generalization lab"};
  app.require_subcommand(1);
  Flags f;

  auto* train = app.add_subcommand("train", "Train a toy model; writes model.ssmx and loss_curve.csv");
  add_common(train, f);
  train->add_option("--task", f.task, "lm or passkey");
  train->add_option("--steps", f.steps, "Training steps");

  auto* spectrum = app.add_subcommand("spectrum", "Per-layer eigenvalue heatmap of a checkpoint");
  add_common(spectrum, f);
  add_model_input(spectrum, f, false);

  auto* normlab = app.add_subcommand("normlab", "Monte Carlo checks of the state-norm theory");
  add_common(normlab, f);

  auto* calibrate = app.add_subcommand("calibrate", "Calibrate scaling factors on a frozen model");
  add_common(calibrate, f);
  add_model_input(calibrate, f, false);
  add_calibration(calibrate, f);
  calibrate->add_option("--target", f.opts.target, "A or Delta")
      ->check(CLI::IsMember({"A", "Delta", "a", "delta"}));

  auto* eval_ppl = app.add_subcommand("eval-ppl", "Perplexity and state norms by context length");
  add_common(eval_ppl, f);
  add_model_input(eval_ppl, f, true);
  eval_ppl->add_option("--lengths", f.lengths, "Evaluation lengths");

  auto* eval_passkey = app.add_subcommand("eval-passkey", "Passkey retrieval accuracy grid");
  add_common(eval_passkey, f);
  add_model_input(eval_passkey, f, true);
  eval_passkey->add_option("--lengths", f.passkey_lengths, "Passkey lengths");

  auto* compare = app.add_subcommand("compare", "Baseline vs constant vs calibrated scaling");
  add_common(compare, f);
  add_model_input(compare, f, false);
  add_calibration(compare, f);
  compare->add_option("--lengths", f.lengths, "Perplexity lengths");
  compare->add_option("--passkey-lengths", f.passkey_lengths, "Passkey lengths");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  ssmlab::ExperimentConfig cfg;
  try {
    cfg = resolve(f);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return ssmlab::exit_code_for(std::current_exception());
  }
  ssmlab::set_thread_count(f.threads);
  const auto* sub = app.get_subcommands().front();
  return ssmlab::run_command(sub->get_name(), cfg, f.opts);
}
