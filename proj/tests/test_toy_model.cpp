#include "ssmlab/toy_model.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

using namespace ssmlab;
using namespace ssmlab::testing;

namespace {

TokenSample random_sample(std::uint64_t seed, int length, int vocab) {
  Rng rng(seed);
  TokenSample s;
  for (int t = 0; t < length; ++t) s.tokens.push_back(rng.index(vocab));
  return s;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("ssmlab_" + name);
}

std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

double central(const std::function<double()>& f, double* x, double h) {
  const double keep = *x;
  *x = keep + h;
  const double up = f();
  *x = keep - h;
  const double down = f();
  *x = keep;
  return (up - down) / (2 * h);
}

class ModelVariants : public ::testing::TestWithParam<Variant> {};

}  // namespace

TEST(ToyModelConfig, Validation) {
  auto c = tiny_config();
  EXPECT_NO_THROW(c.validate());
  c.n_heads = 3;
  c.variant = Variant::Mamba2;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.d_state = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ToyModel, ParameterCountMatchesViews) {
  for (auto v : {Variant::Mamba, Variant::Mamba2}) {
    const auto model = build_model(tiny_config(v));
    std::size_t n = 0;
    for (const auto& p : model.params()) n += static_cast<std::size_t>(p.size());
    EXPECT_EQ(n, model.parameter_count());
    EXPECT_EQ(n, expected_parameter_count(model.config()));
  }
}

TEST(ToyModel, InitIsSeededAndInRange) {
  const auto cfg = tiny_config();
  const auto a = build_model(cfg);
  const auto b = build_model(cfg);
  EXPECT_EQ(a.checksum(), b.checksum());
  auto other = cfg;
  other.seed = 8;
  EXPECT_NE(build_model(other).checksum(), a.checksum());
  for (const auto& layer : a.ssm_layers()) {
    EXPECT_GE(layer.a.minCoeff(), cfg.a_min * (1 - 1e-12));
    EXPECT_LE(layer.a.maxCoeff(), cfg.a_max * (1 + 1e-12));
    for (Eigen::Index g = 0; g < layer.b_delta.size(); ++g) {
      const double d = softplus(layer.b_delta[g]);
      EXPECT_GE(d, cfg.delta_min * (1 - 1e-9));
      EXPECT_LE(d, cfg.delta_max * (1 + 1e-9));
    }
  }
}

TEST(Forward, LogitShapeAndCausality) {
  const auto model = build_model(tiny_config());
  auto s = random_sample(1, 12, 64);
  const auto r1 = forward(model, s.tokens);
  EXPECT_EQ(r1.logits.rows(), 12);
  EXPECT_EQ(r1.logits.cols(), 64);
  EXPECT_EQ(r1.traces.size(), 2u);
  s.tokens[8] = (s.tokens[8] + 1) % 64;
  const auto r2 = forward(model, s.tokens);
  EXPECT_EQ(r1.logits.topRows(8), r2.logits.topRows(8));
  EXPECT_NE(r1.logits.row(8), r2.logits.row(8));
}

TEST(Forward, RejectsOutOfVocabTokens) {
  const auto model = build_model(tiny_config());
  const std::vector<int> bad{1, 64};
  EXPECT_THROW(forward(model, bad), ConfigError);
  EXPECT_THROW(forward(model, std::vector<int>{}), ConfigError);
}

TEST(Loss, MaskSelectsTargets) {
  const auto model = build_model(tiny_config());
  auto s = random_sample(2, 10, 64);
  const auto all = sequence_loss(model, s);
  EXPECT_EQ(all.count, 9);
  s.loss_mask.assign(10, 0);
  s.loss_mask[4] = 1;
  s.loss_mask[9] = 1;
  const auto two = sequence_loss(model, s);
  EXPECT_EQ(two.count, 2);
  EXPECT_LT(two.nll_sum, all.nll_sum);
  const auto via_grad = loss_and_grad(model, s, nullptr, nullptr, nullptr);
  EXPECT_DOUBLE_EQ(via_grad.nll_sum, two.nll_sum);
}

TEST_P(ModelVariants, ParameterGradientsMatchFiniteDifferences) {
  auto model = build_model(tiny_config(GetParam()));
  const auto sample = random_sample(3, 16, 64);
  auto grads = model.zeros_like();
  loss_and_grad(model, sample, nullptr, &grads, nullptr);
  const auto f = [&] { return sequence_loss(model, sample).nll_sum; };
  auto views = model.params();
  auto gviews = grads.params();
  double worst = 0.0;
  for (std::size_t p = 0; p < views.size(); ++p) {
    for (Eigen::Index k = 0; k < views[p].size(); ++k) {
      const double fd = central(f, views[p].data + k, 1e-5);
      const double an = gviews[p].data[k];
      const double err = std::abs(fd - an) / std::max(1e-3, std::abs(fd));
      worst = std::max(worst, err);
      EXPECT_LT(err, 1e-4) << views[p].name << "[" << k << "] fd=" << fd << " an=" << an;
    }
  }
  RecordProperty("worst_rel_error", std::to_string(worst));
}

TEST_P(ModelVariants, ScaleGradientsMatchFiniteDifferences) {
  const auto model = build_model(tiny_config(GetParam()));
  const auto sample = random_sample(4, 16, 64);
  auto scales = ModelScales::identity(model);
  for (std::size_t l = 0; l < scales.layers.size(); ++l) {
    scales.layers[l] = random_scales(10 + l, static_cast<int>(scales.layers[l].a.size()));
  }
  auto g = ScaleGrads::zeros(model);
  loss_and_grad(model, sample, &scales, nullptr, &g);
  const auto f = [&] { return sequence_loss(model, sample, &scales).nll_sum; };
  for (std::size_t l = 0; l < scales.layers.size(); ++l) {
    for (Eigen::Index k = 0; k < scales.layers[l].a.size(); ++k) {
      const double fa = central(f, scales.layers[l].a.data() + k, 1e-6);
      const double fd = central(f, scales.layers[l].delta.data() + k, 1e-6);
      EXPECT_LT(std::abs(fa - g.a[l][k]) / std::max(1e-3, std::abs(fa)), 1e-4) << l << "," << k;
      EXPECT_LT(std::abs(fd - g.delta[l][k]) / std::max(1e-3, std::abs(fd)), 1e-4) << l << "," << k;
    }
  }
}

INSTANTIATE_TEST_SUITE_P(Variants, ModelVariants,
                         ::testing::Values(Variant::Mamba, Variant::Mamba2));

TEST(ScaleGrads, Accumulate) {
  const auto model = build_model(tiny_config());
  auto a = ScaleGrads::zeros(model);
  auto b = ScaleGrads::zeros(model);
  b.a[1][0] = 2.0;
  b.delta[0][3] = -1.0;
  a.add(b);
  a.add(b);
  EXPECT_EQ(a.a[1][0], 4.0);
  EXPECT_EQ(a.delta[0][3], -2.0);
}

TEST(Train, LossDecreasesOnRepeatingPattern) {
  auto cfg = tiny_config();
  auto model = build_model(cfg);
  const SampleSource src = [](std::uint64_t i) {
    TokenSample s;
    for (int t = 0; t < 32; ++t) s.tokens.push_back(static_cast<int>((t + i) % 5) + 2);
    return s;
  };
  TrainConfig tc;
  tc.steps = 150;
  tc.batch = 2;
  tc.lr = 1e-2;
  tc.warmup = 10;
  int calls = 0;
  const auto r = train(model, src, tc, [&](int, double) { ++calls; });
  ASSERT_EQ(r.loss_curve.size(), 150u);
  EXPECT_LT(r.final_loss, 0.5 * r.loss_curve.front());
  EXPECT_EQ(model.train_steps, 150);
  EXPECT_GT(calls, 0);
  for (const auto& layer : model.ssm_layers()) EXPECT_GT(layer.a.minCoeff(), 0.0);
}

TEST(Train, IsDeterministic) {
  const auto cfg = tiny_config();
  const SampleSource src = [](std::uint64_t i) { return random_sample(i, 16, 64); };
  TrainConfig tc;
  tc.steps = 10;
  tc.batch = 2;
  auto a = build_model(cfg);
  auto b = build_model(cfg);
  train(a, src, tc);
  train(b, src, tc);
  EXPECT_EQ(a.checksum(), b.checksum());
}

TEST(Perplexity, WindowsAndValues) {
  const auto model = build_model(tiny_config());
  const auto corpus = random_sample(5, 400, 64).tokens;
  const std::vector<int> lengths{16, 64, 500};
  const auto rows = perplexity_by_length(model, corpus, std::span(lengths.data(), 2), nullptr, 4);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].windows, 4);
  EXPECT_NEAR(rows[0].ppl, std::exp(rows[0].mean_nll), 1e-12);
  // A uniform-ish random model sits near the vocabulary size.
  EXPECT_GT(rows[1].ppl, 20.0);
  EXPECT_LT(rows[1].ppl, 200.0);
  EXPECT_THROW(perplexity_by_length(model, corpus, lengths), ConfigError);
}

TEST(Checkpoint, RoundTripIsBitwise) {
  auto model = build_model(tiny_config(Variant::Mamba2));
  model.train_steps = 42;
  model.final_train_loss = 1.25;
  const auto p1 = temp_file("rt1.ssmx");
  const auto p2 = temp_file("rt2.ssmx");
  save_checkpoint(model, p1);
  const auto back = load_checkpoint(p1);
  EXPECT_EQ(back.checksum(), model.checksum());
  EXPECT_EQ(back.train_steps, 42);
  EXPECT_EQ(back.final_train_loss, 1.25);
  EXPECT_EQ(back.config().variant, Variant::Mamba2);
  save_checkpoint(back, p2);
  EXPECT_EQ(read_bytes(p1), read_bytes(p2));
  const auto sample = random_sample(6, 20, 64);
  EXPECT_EQ(forward(model, sample.tokens).logits, forward(back, sample.tokens).logits);
  std::filesystem::remove(p1);
  std::filesystem::remove(p2);
}

TEST(Checkpoint, CorruptAndVersionErrors) {
  const auto model = build_model(tiny_config());
  const auto p = temp_file("bad.ssmx");
  save_checkpoint(model, p);
  const std::string bytes = read_bytes(p);

  {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  EXPECT_THROW(load_checkpoint(p), FormatError);

  std::string magic = bytes;
  magic[0] = 'X';
  {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(magic.data(), static_cast<std::streamsize>(magic.size()));
  }
  EXPECT_THROW(load_checkpoint(p), FormatError);

  std::string version = bytes;
  version[4] = 9;
  {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(version.data(), static_cast<std::streamsize>(version.size()));
  }
  EXPECT_THROW(load_checkpoint(p), VersionError);

  std::filesystem::remove(p);
  EXPECT_THROW(load_checkpoint(p), IoError);
}
