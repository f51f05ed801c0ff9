#include "ssmlab/harness.hpp"

#include "ssmlab/csv.hpp"
#include "ssmlab/norm_lab.hpp"
#include "ssmlab/rng.hpp"
#include "ssmlab/spectrum.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <algorithm>
#include <limits>
#include <map>
#include <memory>
#include <set>

namespace ssmlab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Stream tags for derive_seed; each data source gets its own stream.
constexpr std::uint64_t kTrainStream = 0x747261696eULL;
constexpr std::uint64_t kHeldoutStream = 0x68656c64ULL;
constexpr std::uint64_t kCalibStream = 0x63616c6962ULL;
constexpr std::uint64_t kPasskeyEvalStream = 0x706b6576ULL;
constexpr std::uint64_t kModelStream = 0x6d6f64656cULL;
constexpr std::uint64_t kFactorStream = 0x666163ULL;

const char* to_string(Task t) { return t == Task::Lm ? "lm" : "passkey"; }

Task parse_task(const std::string& s) {
  if (s == "lm") return Task::Lm;
  if (s == "passkey") return Task::Passkey;
  throw ConfigError("unknown task '" + s + "' (expected lm or passkey)");
}

void check_keys(const json& j, const std::string& where, const std::set<std::string>& known) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) {
      throw ConfigError("unknown config key '" + (where.empty() ? "" : where + ".") + it.key() + "'");
    }
  }
}

template <class T>
void read(const json& j, const std::string& where, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config key '" + (where.empty() ? "" : where + ".") + key + "': " + e.what());
  }
}

// Corpus file split: the last tenth is held out.
struct TextCorpus {
  std::vector<int> tokens;
  std::size_t split = 0;
};

std::shared_ptr<const TextCorpus> load_corpus(const ExperimentConfig& cfg) {
  auto c = std::make_shared<TextCorpus>();
  c->tokens = load_text_corpus(cfg.corpus);
  c->split = c->tokens.size() - c->tokens.size() / 10;
  return c;
}

FillerSource filler_for(const ExperimentConfig& cfg) {
  return cfg.filler.empty() ? FillerSource{} : FillerSource::from_text_file(cfg.filler);
}

std::string timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
  return buf;
}

fs::path output_dir(const std::string& command, const ExperimentConfig& cfg,
                    const CommandOptions& opts) {
  if (!opts.out.empty()) return opts.out;
  if (!cfg.output_dir.empty()) return cfg.output_dir;
  fs::path root = "runs";
  if (!opts.out_root.empty()) {
    root = opts.out_root;
  } else if (const char* env = std::getenv(kOutputRootEnv); env && *env) {
    root = env;
  }
  return root / (command + "_" + timestamp() + "_" + std::to_string(cfg.seed));
}

ToyModel require_checkpoint(const CommandOptions& opts, json& manifest) {
  if (opts.checkpoint.empty()) throw ConfigError("this command needs --checkpoint");
  if (!fs::exists(opts.checkpoint)) throw IoError("checkpoint not found: " + opts.checkpoint);
  ToyModel model = load_checkpoint(opts.checkpoint);
  manifest["checkpoint"] = opts.checkpoint;
  manifest["checkpoint_sha256"] = model.checksum();
  return model;
}

std::optional<ModelScales> optional_factors(const ToyModel& model, const CommandOptions& opts,
                                            json& manifest) {
  if (opts.factors.empty()) return std::nullopt;
  const auto s = read_scaling_factors(opts.factors);
  manifest["factors"] = opts.factors;
  return to_model_scales(model, s);
}

std::vector<int> sorted_lengths(std::vector<int> v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

std::size_t corpus_tokens_needed(const ExperimentConfig& cfg) {
  const auto lengths = sorted_lengths(cfg.eval.lengths);
  return lengths.empty() ? 0
                         : static_cast<std::size_t>(lengths.back()) *
                               static_cast<std::size_t>(cfg.eval.windows);
}

double mean_ppl_or_inf(const ToyModel& model, std::span<const int> corpus, int length,
                       const ModelScales* scales, int windows) {
  const int lengths[] = {length};
  try {
    return perplexity_by_length(model, corpus, lengths, scales, windows).front().ppl;
  } catch (const NumericError&) {
    return std::numeric_limits<double>::infinity();
  }
}

void write_ppl_csv(const std::vector<PplRow>& rows, const fs::path& path) {
  CsvWriter csv(path, {"length", "windows", "mean_nll", "ppl"});
  for (const auto& r : rows) {
    csv.row({std::to_string(r.length), std::to_string(r.windows), format_double(r.mean_nll),
             format_double(r.ppl)});
  }
}

// --- commands -------------------------------------------------------------

void cmd_train(const ExperimentConfig& cfg, const CommandOptions&, const fs::path& dir,
               json& manifest) {
  TrainResult result;
  const auto started = std::chrono::steady_clock::now();
  const ToyModel model = train_from_config(cfg, &result, [&](int step, double loss) {
    if (step % 100 == 0) {
      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
      std::fprintf(stderr, "step %d loss %.4f (%.0fs)\n", step, loss, secs);
    }
  });
  save_checkpoint(model, dir / "model.ssmx");
  CsvWriter csv(dir / "loss_curve.csv", {"step", "loss"});
  for (std::size_t i = 0; i < result.loss_curve.size(); ++i) {
    csv.row({std::to_string(i), format_double(result.loss_curve[i])});
  }
  manifest["final_train_loss"] = result.final_loss;
  manifest["parameters"] = model.parameter_count();
  manifest["checkpoint_sha256"] = model.checksum();
}

void cmd_spectrum(const ExperimentConfig&, const CommandOptions& opts, const fs::path& dir,
                  json& manifest) {
  const ToyModel model = require_checkpoint(opts, manifest);
  const auto layers = model.ssm_layers();
  const auto report = spectrum_heatmap(layers);
  write_heatmap_csv(report, dir / "spectrum_heatmap.csv");
  CsvWriter csv(dir / "spectrum_summary.csv",
                {"layer", "lambda_max", "lambda_min", "frac_above_0.99", "frac_below_0.01"});
  for (std::size_t l = 0; l < report.summary.size(); ++l) {
    const auto& s = report.summary[l];
    csv.row({std::to_string(l), format_double(s.lambda_max), format_double(s.lambda_min),
             format_double(s.frac_above_099), format_double(s.frac_below_001)});
  }
}

void cmd_normlab(const ExperimentConfig& cfg, const CommandOptions&, const fs::path& dir,
                 json& manifest) {
  const auto& n = cfg.normlab;
  NormExperiment ex;
  ex.d = n.d;
  ex.m = n.m;
  ex.t_max = n.t_max;
  ex.trials = n.trials;
  ex.lambda_law = UniformLaw{n.lambda_lo, n.lambda_hi};
  ex.sigma_b2 = n.sigma_b2 > 0.0 ? n.sigma_b2 : 1.0 / (2.0 * n.d);
  ex.seed = cfg.seed;
  const auto r = simulate_state_norm(ex);
  write_norm_trace_csv(r, dir / "norm_trace.csv");
  {
    CsvWriter csv(dir / "norm_summary.csv",
                  {"mc_estimate", "mc_stderr", "closed_form", "ratio", "e_bx2", "z_score"});
    const double z = r.mc_stderr > 0.0 ? (r.mc_estimate - r.closed_form) / r.mc_stderr : 0.0;
    csv.row(std::vector<double>{r.mc_estimate, r.mc_stderr, r.closed_form, r.ratio, r.e_bx2, z});
  }
  {
    // Uniform densities on [0, lambda_max]: p(1) -> 1 for the divergent
    // regime, p(0) lambda_max = 1 for the vanishing one.
    const DensityFamily family = [](double lm) { return Density::uniform(0.0, lm); };
    const double near_one[] = {0.999, 0.9999, 0.99999, 0.999999};
    const double near_zero[] = {0.1, 0.03, 0.01, 0.003, 0.001};
    const auto div = asymptote_fit(family, near_one, 1.0);
    const auto van = vanishing_fit(family, near_zero);
    CsvWriter csv(dir / "asymptotes.csv", {"regime", "fitted", "predicted", "rel_error"});
    csv.row({"divergent_slope", format_double(div.slope), format_double(div.predicted),
             format_double(div.rel_error)});
    csv.row({"vanishing_ratio", format_double(van.slope), "1",
             format_double(van.rel_error_at_smallest)});
  }
  {
    CsvWriter csv(dir / "lemma1.csv", {"d", "bound", "max_observed", "samples", "violations"});
    for (int d : {4, 64, 512}) {
      const auto l = lemma1_check(1.0 / std::sqrt(static_cast<double>(d)), 1.0, d, n.lemma_samples,
                                  derive_seed(cfg.seed, static_cast<std::uint64_t>(d)));
      csv.row({std::to_string(d), format_double(l.bound), format_double(l.max_observed),
               std::to_string(l.samples), std::to_string(l.violations)});
    }
  }
  manifest["mc_estimate"] = r.mc_estimate;
  manifest["closed_form"] = r.closed_form;
}

void cmd_calibrate(const ExperimentConfig& cfg, const CommandOptions& opts, const fs::path& dir,
                   json& manifest) {
  const ToyModel model = require_checkpoint(opts, manifest);
  const ScaleTarget target = parse_target(opts.target);
  CalibrationTrace trace;
  const auto factors = calibrate_from_config(model, cfg, target, &trace);
  write_calibration_trace_csv(trace, dir / "calibration_trace.csv");
  json extra;
  extra["seed"] = cfg.seed;
  extra["config"] = to_json(cfg)["calibration"];
  write_scaling_factors(factors, extra, dir / "scaling_factors.json");
  if (model.checksum() != manifest["checkpoint_sha256"].get<std::string>()) {
    throw NumericError("calibration modified the frozen model");
  }
}

void cmd_eval_ppl(const ExperimentConfig& cfg, const CommandOptions& opts, const fs::path& dir,
                  json& manifest) {
  const ToyModel model = require_checkpoint(opts, manifest);
  const auto scales = optional_factors(model, opts, manifest);
  const ModelScales* sp = scales ? &*scales : nullptr;
  const auto lengths = sorted_lengths(cfg.eval.lengths);
  const auto corpus = heldout_corpus(cfg, corpus_tokens_needed(cfg));
  write_ppl_csv(perplexity_by_length(model, corpus, lengths, sp, cfg.eval.windows),
                dir / "ppl_by_length.csv");

  std::vector<std::vector<int>> seqs;
  const auto longest = static_cast<std::size_t>(lengths.back());
  for (std::size_t w = 0; w < static_cast<std::size_t>(cfg.eval.windows) &&
                          (w + 1) * longest <= corpus.size();
       ++w) {
    seqs.emplace_back(corpus.begin() + static_cast<std::ptrdiff_t>(w * longest),
                      corpus.begin() + static_cast<std::ptrdiff_t>((w + 1) * longest));
  }
  write_state_norms_csv(track_model_state_norms(model, seqs, lengths, sp), dir / "state_norms.csv");
}

void cmd_eval_passkey(const ExperimentConfig& cfg, const CommandOptions& opts, const fs::path& dir,
                      json& manifest) {
  const ToyModel model = require_checkpoint(opts, manifest);
  const auto scales = optional_factors(model, opts, manifest);
  const auto grid = passkey_grid_eval(model, cfg.eval.passkey_lengths, cfg.eval.depths,
                                      cfg.eval.per_cell, scales ? &*scales : nullptr,
                                      derive_seed(cfg.seed, kPasskeyEvalStream), filler_for(cfg));
  write_passkey_grid_csv(grid, dir / "passkey_accuracy.csv", dir / "passkey_solved.csv");
}

void cmd_compare(const ExperimentConfig& cfg, const CommandOptions& opts, const fs::path& dir,
                 json& manifest) {
  const ToyModel model = require_checkpoint(opts, manifest);
  std::vector<int> lengths;
  const auto rows = compare_strategies(model, cfg, &lengths);
  std::vector<std::string> header{"strategy"};
  for (int l : lengths) header.push_back(std::to_string(l));
  CsvWriter csv(dir / "compare.csv", header);
  for (const auto& r : rows) {
    std::vector<std::string> cells{r.strategy};
    for (double v : r.values) cells.push_back(format_double(v));
    csv.row(cells);
  }
  manifest["metric"] = cfg.task == Task::Lm ? "ppl" : "passkey_accuracy";
  if (model.checksum() != manifest["checkpoint_sha256"].get<std::string>()) {
    throw NumericError("calibration modified the frozen model");
  }
}

}  // namespace

// --- config ---------------------------------------------------------------

void ExperimentConfig::validate() const {
  model.validate();
  require(train.steps >= 0 && train.batch >= 1, "train.steps must be >= 0 and train.batch >= 1");
  require(train.lr >= 0.0, "train.lr must be non-negative");
  const auto& c = calibration;
  require(c.method == "spsa" || c.method == "grad", "calibration.method must be spsa or grad");
  for (const auto& t : c.targets) parse_target(t);
  parse_granularity(c.granularity);
  require(c.c > 0.0 && c.eta > 0.0, "calibration.c and calibration.eta must be positive");
  require(c.iterations >= 0, "calibration.iterations must be non-negative");
  require(c.sequences >= 1, "calibration.sequences must be >= 1");
  require(c.length >= 2, "calibration.length must be >= 2");
  require(c.constant_factor > 0.0, "calibration.constant_factor must be positive");
  require(c.init == "uniform" || c.init == "ones", "calibration.init must be uniform or ones");
  require(babble.topics >= 1 && babble.topics <= 16, "data.topics must be in [1, 16]");
  require(babble.topic_weight >= 0.0 && babble.topic_weight <= 1.0 &&
              babble.topic_switch >= 0.0 && babble.topic_switch <= 1.0 &&
              babble.period_rate >= 0.0 && babble.period_rate < 1.0,
          "data.topic_weight, topic_switch and period_rate must be probabilities");
  require(!eval.lengths.empty(), "eval.lengths must not be empty");
  for (int l : eval.lengths) require(l >= 2, "eval.lengths entries must be >= 2");
  require(eval.windows >= 1, "eval.windows must be >= 1");
  for (int l : eval.passkey_lengths) {
    require(l >= kPasskeyOverhead,
            "eval.passkey_lengths entries must be >= " + std::to_string(kPasskeyOverhead));
  }
  for (double d : eval.depths) require(d >= 0.0 && d <= 1.0, "eval.depths must lie in [0, 1]");
  require(eval.per_cell >= 1, "eval.per_cell must be >= 1");
  require(normlab.d >= 1 && normlab.m >= 1 && normlab.t_max >= 1 && normlab.trials >= 2,
          "normlab: d, m, t_max must be >= 1 and trials >= 2");
  require(normlab.lambda_lo >= 0.0 && normlab.lambda_lo <= normlab.lambda_hi &&
              normlab.lambda_hi < 1.0,
          "normlab: need 0 <= lambda_lo <= lambda_hi < 1");
  if (task == Task::Passkey) {
    require(model.train_length >= kPasskeyOverhead, "model.train_length too short for passkey");
    require(calibration.length >= kPasskeyOverhead, "calibration.length too short for passkey");
    require(model.vocab_size >= vocab::kSize, "passkey needs model.vocab_size >= 64");
  }
  if (!corpus.empty()) {
    require(fs::exists(corpus), "corpus file not found: " + corpus);
    require(model.vocab_size >= 256, "byte-level corpus needs model.vocab_size >= 256");
  } else if (task == Task::Lm) {
    require(model.vocab_size >= vocab::kSize, "synthetic lm task needs model.vocab_size >= 64");
  }
  if (!filler.empty()) require(fs::exists(filler), "filler file not found: " + filler);
}

json to_json(const ExperimentConfig& cfg) {
  const auto& t = cfg.train;
  const auto& c = cfg.calibration;
  const auto& e = cfg.eval;
  const auto& n = cfg.normlab;
  return {
      {"seed", cfg.seed},
      {"task", to_string(cfg.task)},
      {"model", cfg.model},
      {"train",
       {{"steps", t.steps}, {"batch", t.batch}, {"lr", t.lr}, {"beta1", t.beta1},
        {"beta2", t.beta2}, {"eps", t.eps}, {"grad_clip", t.grad_clip}, {"warmup", t.warmup},
        {"min_lr_fraction", t.min_lr_fraction}}},
      {"calibration",
       {{"method", c.method}, {"targets", c.targets}, {"granularity", c.granularity},
        {"c", c.c}, {"eta", c.eta}, {"iterations", c.iterations}, {"sequences", c.sequences},
        {"length", c.length}, {"constant_factor", c.constant_factor}, {"init", c.init}}},
      {"eval",
       {{"lengths", e.lengths}, {"windows", e.windows}, {"passkey_lengths", e.passkey_lengths},
        {"depths", e.depths}, {"per_cell", e.per_cell}}},
      {"normlab",
       {{"d", n.d}, {"m", n.m}, {"t_max", n.t_max}, {"trials", n.trials},
        {"lambda_lo", n.lambda_lo}, {"lambda_hi", n.lambda_hi}, {"sigma_b2", n.sigma_b2},
        {"lemma_samples", n.lemma_samples}}},
      {"data",
       {{"corpus", cfg.corpus}, {"filler", cfg.filler}, {"topics", cfg.babble.topics},
        {"topic_weight", cfg.babble.topic_weight}, {"topic_switch", cfg.babble.topic_switch},
        {"period_rate", cfg.babble.period_rate}}},
      {"output_dir", cfg.output_dir},
  };
}

void apply_json(ExperimentConfig& cfg, const json& j) {
  check_keys(j, "", {"seed", "task", "model", "train", "calibration", "eval", "normlab", "data",
                     "output_dir"});
  read(j, "", "seed", cfg.seed);
  if (j.contains("task")) {
    std::string task;
    read(j, "", "task", task);
    cfg.task = parse_task(task);
  }
  read(j, "", "output_dir", cfg.output_dir);
  if (j.contains("model")) {
    const auto& m = j["model"];
    check_keys(m, "model", {"vocab_size", "d_model", "d_state", "n_layers", "variant", "n_heads",
                            "train_length", "seed", "a_min", "a_max", "delta_min", "delta_max"});
    json merged = cfg.model;
    merged.update(m);
    try {
      cfg.model = merged.get<ToyModelConfig>();
    } catch (const json::exception& e) {
      throw ConfigError(std::string("config section 'model': ") + e.what());
    }
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    check_keys(t, "train", {"steps", "batch", "lr", "beta1", "beta2", "eps", "grad_clip",
                            "warmup", "min_lr_fraction"});
    auto& o = cfg.train;
    read(t, "train", "steps", o.steps);
    read(t, "train", "batch", o.batch);
    read(t, "train", "lr", o.lr);
    read(t, "train", "beta1", o.beta1);
    read(t, "train", "beta2", o.beta2);
    read(t, "train", "eps", o.eps);
    read(t, "train", "grad_clip", o.grad_clip);
    read(t, "train", "warmup", o.warmup);
    read(t, "train", "min_lr_fraction", o.min_lr_fraction);
  }
  if (j.contains("calibration")) {
    const auto& c = j["calibration"];
    check_keys(c, "calibration", {"method", "targets", "granularity", "c", "eta", "iterations",
                                  "sequences", "length", "constant_factor", "init"});
    auto& o = cfg.calibration;
    read(c, "calibration", "method", o.method);
    read(c, "calibration", "targets", o.targets);
    read(c, "calibration", "granularity", o.granularity);
    read(c, "calibration", "c", o.c);
    read(c, "calibration", "eta", o.eta);
    read(c, "calibration", "iterations", o.iterations);
    read(c, "calibration", "sequences", o.sequences);
    read(c, "calibration", "length", o.length);
    read(c, "calibration", "constant_factor", o.constant_factor);
    read(c, "calibration", "init", o.init);
  }
  if (j.contains("eval")) {
    const auto& e = j["eval"];
    check_keys(e, "eval", {"lengths", "windows", "passkey_lengths", "depths", "per_cell"});
    auto& o = cfg.eval;
    read(e, "eval", "lengths", o.lengths);
    read(e, "eval", "windows", o.windows);
    read(e, "eval", "passkey_lengths", o.passkey_lengths);
    read(e, "eval", "depths", o.depths);
    read(e, "eval", "per_cell", o.per_cell);
  }
  if (j.contains("normlab")) {
    const auto& n = j["normlab"];
    check_keys(n, "normlab", {"d", "m", "t_max", "trials", "lambda_lo", "lambda_hi", "sigma_b2",
                              "lemma_samples"});
    auto& o = cfg.normlab;
    read(n, "normlab", "d", o.d);
    read(n, "normlab", "m", o.m);
    read(n, "normlab", "t_max", o.t_max);
    read(n, "normlab", "trials", o.trials);
    read(n, "normlab", "lambda_lo", o.lambda_lo);
    read(n, "normlab", "lambda_hi", o.lambda_hi);
    read(n, "normlab", "sigma_b2", o.sigma_b2);
    read(n, "normlab", "lemma_samples", o.lemma_samples);
  }
  if (j.contains("data")) {
    const auto& d = j["data"];
    check_keys(d, "data", {"corpus", "filler", "topics", "topic_weight", "topic_switch",
                           "period_rate"});
    read(d, "data", "corpus", cfg.corpus);
    read(d, "data", "filler", cfg.filler);
    read(d, "data", "topics", cfg.babble.topics);
    read(d, "data", "topic_weight", cfg.babble.topic_weight);
    read(d, "data", "topic_switch", cfg.babble.topic_switch);
    read(d, "data", "period_rate", cfg.babble.period_rate);
  }
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": parse error at byte " + std::to_string(e.byte) + ": " +
                      e.what());
  }
  ExperimentConfig cfg;
  apply_json(cfg, j);
  return cfg;
}

// --- data -----------------------------------------------------------------

SampleSource train_source(const ExperimentConfig& cfg) {
  const std::uint64_t seed = derive_seed(cfg.seed, kTrainStream);
  const int len = cfg.model.train_length;
  if (cfg.task == Task::Passkey) {
    auto filler = std::make_shared<const FillerSource>(filler_for(cfg));
    return [seed, len, filler](std::uint64_t i) {
      Rng rng(derive_seed(seed, i));
      return gen_passkey(derive_seed(seed, i, 1), len, rng.uniform(), *filler).sample;
    };
  }
  if (!cfg.corpus.empty()) {
    auto corpus = load_corpus(cfg);
    require(corpus->split > static_cast<std::size_t>(len),
            "corpus too small for train_length " + std::to_string(len));
    return [seed, len, corpus](std::uint64_t i) {
      Rng rng(derive_seed(seed, i));
      const auto span = corpus->split - static_cast<std::size_t>(len);
      const auto start = static_cast<std::size_t>(rng.engine()() % (span + 1));
      TokenSample s;
      s.tokens.assign(corpus->tokens.begin() + static_cast<std::ptrdiff_t>(start),
                      corpus->tokens.begin() + static_cast<std::ptrdiff_t>(start) + len);
      return s;
    };
  }
  return [seed, len, b = cfg.babble](std::uint64_t i) {
    TokenSample s;
    s.tokens = babble(derive_seed(seed, i), static_cast<std::size_t>(len), b);
    return s;
  };
}

std::vector<int> heldout_corpus(const ExperimentConfig& cfg, std::size_t tokens) {
  if (!cfg.corpus.empty()) {
    auto corpus = load_corpus(cfg);
    return {corpus->tokens.begin() + static_cast<std::ptrdiff_t>(corpus->split),
            corpus->tokens.end()};
  }
  return babble(derive_seed(cfg.seed, kHeldoutStream), tokens, cfg.babble);
}

std::vector<TokenSample> calibration_set(const ExperimentConfig& cfg) {
  const auto& c = cfg.calibration;
  const std::uint64_t seed = derive_seed(cfg.seed, kCalibStream);
  std::vector<TokenSample> set;
  if (cfg.task == Task::Passkey) {
    const auto filler = filler_for(cfg);
    for (int k = 0; k < c.sequences; ++k) {
      const double depth = c.sequences == 1 ? 0.5 : static_cast<double>(k) / (c.sequences - 1);
      set.push_back(gen_passkey(derive_seed(seed, static_cast<std::uint64_t>(k)), c.length, depth,
                                filler)
                        .sample);
    }
    return set;
  }
  if (!cfg.corpus.empty()) {
    // Calibration windows come from the training portion, never the held-out tail.
    auto corpus = load_corpus(cfg);
    const auto len = static_cast<std::size_t>(c.length);
    require(corpus->split >= len, "corpus too small for calibration.length");
    Rng rng(seed);
    for (int k = 0; k < c.sequences; ++k) {
      const auto start = static_cast<std::size_t>(rng.engine()() % (corpus->split - len + 1));
      TokenSample s;
      s.tokens.assign(corpus->tokens.begin() + static_cast<std::ptrdiff_t>(start),
                      corpus->tokens.begin() + static_cast<std::ptrdiff_t>(start + len));
      set.push_back(std::move(s));
    }
    return set;
  }
  for (int k = 0; k < c.sequences; ++k) {
    TokenSample s;
    s.tokens = babble(derive_seed(seed, static_cast<std::uint64_t>(k)),
                      static_cast<std::size_t>(c.length), cfg.babble);
    set.push_back(std::move(s));
  }
  return set;
}

ToyModel train_from_config(const ExperimentConfig& cfg, TrainResult* result,
                           const TrainProgress& progress) {
  cfg.validate();
  ToyModelConfig mc = cfg.model;
  if (mc.seed == 0) mc.seed = derive_seed(cfg.seed, kModelStream);
  ToyModel model = build_model(mc);
  auto r = train(model, train_source(cfg), cfg.train, progress);
  if (result) *result = std::move(r);
  return model;
}

ScalingFactors calibrate_from_config(const ToyModel& model, const ExperimentConfig& cfg,
                                     ScaleTarget target, CalibrationTrace* trace) {
  const auto& c = cfg.calibration;
  const Granularity g = parse_granularity(c.granularity);
  CalibrationConfig cc;
  cc.c = c.c;
  cc.eta = c.eta;
  cc.iterations = c.iterations;
  cc.seed = derive_seed(cfg.seed, kCalibStream, target == ScaleTarget::A ? 1 : 2);
  cc.calib_set = calibration_set(cfg);
  ScalingFactors s0 = c.init == "ones"
                          ? ones_factors(model, target, g)
                          : init_factors(static_cast<int>(model.blocks.size()), factor_rows(model, g),
                                         derive_seed(cfg.seed, kFactorStream), target, g);
  auto r = c.method == "grad" ? grad_calibrate(model, cc, s0) : spsa_calibrate(model, cc, s0);
  if (trace) *trace = std::move(r.trace);
  return r.factors;
}

std::vector<StrategyRow> compare_strategies(const ToyModel& model, const ExperimentConfig& cfg,
                                            std::vector<int>* lengths_out) {
  struct Strategy {
    std::string name;
    std::optional<ModelScales> scales;
  };
  const double k = cfg.calibration.constant_factor;
  std::vector<Strategy> strategies;
  strategies.push_back({"baseline", std::nullopt});
  strategies.push_back({"constant_A", constant_scaling(model, k, ScaleTarget::A)});
  strategies.push_back({"constant_Delta", constant_scaling(model, k, ScaleTarget::Delta)});
  strategies.push_back({"calibrated_A", to_model_scales(model, calibrate_from_config(model, cfg, ScaleTarget::A))});
  strategies.push_back({"calibrated_Delta", to_model_scales(model, calibrate_from_config(model, cfg, ScaleTarget::Delta))});

  std::vector<StrategyRow> rows;
  if (cfg.task == Task::Lm) {
    const auto lengths = sorted_lengths(cfg.eval.lengths);
    const auto corpus = heldout_corpus(cfg, corpus_tokens_needed(cfg));
    for (const auto& s : strategies) {
      StrategyRow row{s.name, {}};
      for (int len : lengths) {
        row.values.push_back(mean_ppl_or_inf(model, corpus, len, s.scales ? &*s.scales : nullptr,
                                             cfg.eval.windows));
      }
      rows.push_back(std::move(row));
    }
    if (lengths_out) *lengths_out = lengths;
  } else {
    const auto filler = filler_for(cfg);
    for (const auto& s : strategies) {
      const auto grid = passkey_grid_eval(model, cfg.eval.passkey_lengths, cfg.eval.depths,
                                          cfg.eval.per_cell, s.scales ? &*s.scales : nullptr,
                                          derive_seed(cfg.seed, kPasskeyEvalStream), filler);
      StrategyRow row{s.name, {}};
      for (Eigen::Index i = 0; i < grid.accuracy.rows(); ++i) row.values.push_back(grid.accuracy.row(i).mean());
      rows.push_back(std::move(row));
    }
    if (lengths_out) *lengths_out = cfg.eval.passkey_lengths;
  }
  return rows;
}

// --- dispatch -------------------------------------------------------------

int exit_code_for(const std::exception_ptr& error) {
  try {
    std::rethrow_exception(error);
  } catch (const ConfigError&) {
    return 2;
  } catch (const NumericError&) {
    return 3;
  } catch (const IoError&) {
    return 4;
  } catch (const fs::filesystem_error&) {
    return 4;
  } catch (const json::exception&) {
    return 2;
  } catch (...) {
    return 1;
  }
}

int run_command(const std::string& command, const ExperimentConfig& cfg,
                const CommandOptions& opts) {
  using Handler = void (*)(const ExperimentConfig&, const CommandOptions&, const fs::path&, json&);
  static const std::map<std::string, Handler> handlers{
      {"train", cmd_train},         {"spectrum", cmd_spectrum},
      {"normlab", cmd_normlab},     {"calibrate", cmd_calibrate},
      {"eval-ppl", cmd_eval_ppl},   {"eval-passkey", cmd_eval_passkey},
      {"compare", cmd_compare},
  };
  const auto it = handlers.find(command);
  if (it == handlers.end()) {
    std::cerr << "error: unknown command '" << command << "'\n";
    return 2;
  }

  fs::path dir;
  try {
    dir = output_dir(command, cfg, opts);
    fs::create_directories(dir);
  } catch (const std::exception& e) {
    std::cerr << "error: cannot create output directory: " << e.what() << '\n';
    return 4;
  }

  const auto started = std::chrono::steady_clock::now();
  json manifest;
  manifest["command"] = command;
  manifest["version"] = kVersion;
  manifest["seed"] = cfg.seed;
  manifest["config"] = to_json(cfg);
  if (command == "calibrate") manifest["target"] = opts.target;

  int code = 0;
  try {
    cfg.validate();
    it->second(cfg, opts, dir, manifest);
    manifest["status"] = "ok";
  } catch (...) {
    const auto error = std::current_exception();
    code = exit_code_for(error);
    std::string what = "unknown error";
    try {
      std::rethrow_exception(error);
    } catch (const std::exception& e) {
      what = e.what();
    } catch (...) {
    }
    manifest["status"] = "error";
    manifest["error"] = what;
    std::cerr << "error: " << what << '\n';
  }
  manifest["exit_code"] = code;
  manifest["wall_time_s"] =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  manifest["output_dir"] = dir.string();
  std::ofstream out(dir / "manifest.json");
  out << manifest.dump(2) << '\n';
  if (!out) {
    std::cerr << "error: cannot write manifest in " << dir << '\n';
    return code ? code : 4;
  }
  std::cout << dir.string() << '\n';
  return code;
}

}  // namespace ssmlab
