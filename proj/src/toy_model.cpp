#include "ssmlab/toy_model.hpp"

#include "ssmlab/parallel.hpp"
#include "ssmlab/rng.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <numbers>

namespace ssmlab {

void ToyModelConfig::validate() const {
  require(vocab_size > 0, "model.vocab_size must be positive");
  require(d_model > 0, "model.d_model must be positive");
  require(d_state > 0, "model.d_state must be positive");
  require(n_layers > 0, "model.n_layers must be positive");
  require(train_length >= 32, "model.train_length must be at least 32");
  if (variant == Variant::Mamba2) {
    require(n_heads > 0 && d_model % n_heads == 0,
            "model.n_heads must be positive and divide d_model");
  }
  require(a_min > 0.0 && a_max >= a_min, "model.a_min/a_max must satisfy 0 < a_min <= a_max");
  require(delta_min > 0.0 && delta_max >= delta_min,
          "model.delta_min/delta_max must satisfy 0 < delta_min <= delta_max");
}

void to_json(nlohmann::json& j, const ToyModelConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},
                     {"d_state", c.d_state},       {"n_layers", c.n_layers},
                     {"variant", to_string(c.variant)},
                     {"n_heads", c.n_heads},       {"train_length", c.train_length},
                     {"seed", c.seed},             {"a_min", c.a_min},
                     {"a_max", c.a_max},           {"delta_min", c.delta_min},
                     {"delta_max", c.delta_max}};
}

void from_json(const nlohmann::json& j, ToyModelConfig& c) {
  const ToyModelConfig defaults;
  c.vocab_size = j.value("vocab_size", defaults.vocab_size);
  c.d_model = j.value("d_model", defaults.d_model);
  c.d_state = j.value("d_state", defaults.d_state);
  c.n_layers = j.value("n_layers", defaults.n_layers);
  c.variant = parse_variant(j.value("variant", std::string(to_string(defaults.variant))));
  c.n_heads = j.value("n_heads", defaults.n_heads);
  c.train_length = j.value("train_length", defaults.train_length);
  c.seed = j.value("seed", defaults.seed);
  c.a_min = j.value("a_min", defaults.a_min);
  c.a_max = j.value("a_max", defaults.a_max);
  c.delta_min = j.value("delta_min", defaults.delta_min);
  c.delta_max = j.value("delta_max", defaults.delta_max);
}

ToyModel::ToyModel(const ToyModelConfig& cfg) : cfg_(cfg) {
  cfg.validate();
  const int V = cfg.vocab_size;
  const int D = cfg.d_model;
  embed = RowMatrix::Zero(V, D);
  blocks.resize(static_cast<std::size_t>(cfg.n_layers));
  for (auto& b : blocks) {
    b.norm_w = Vector::Ones(D);
    b.ssm = SsmLayerParams::zeros(cfg.variant, D, cfg.d_state, cfg.n_heads);
    b.w_out = RowMatrix::Zero(D, D);
  }
  final_norm_w = Vector::Ones(D);
  readout = RowMatrix::Zero(V, D);
}

std::vector<ParamView> ToyModel::params() {
  std::vector<ParamView> out;
  auto add = [&out](std::string name, auto& m, bool positive = false) {
    out.push_back(ParamView{std::move(name), m.data(), m.rows(), m.cols(), positive});
  };
  add("embed", embed);
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    auto& b = blocks[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    add(p + "norm_w", b.norm_w);
    add(p + "a", b.ssm.a, true);
    add(p + "w_delta", b.ssm.w_delta);
    add(p + "b_delta", b.ssm.b_delta);
    add(p + "w_b", b.ssm.w_b);
    add(p + "w_c", b.ssm.w_c);
    add(p + "d_skip", b.ssm.d_skip);
    add(p + "w_out", b.w_out);
  }
  add("final_norm_w", final_norm_w);
  add("readout", readout);
  return out;
}

std::vector<ConstParamView> ToyModel::params() const {
  auto views = const_cast<ToyModel*>(this)->params();
  std::vector<ConstParamView> out;
  out.reserve(views.size());
  for (auto& v : views) out.push_back(ConstParamView{std::move(v.name), v.data, v.rows, v.cols});
  return out;
}

std::size_t ToyModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& v : params()) n += static_cast<std::size_t>(v.size());
  return n;
}

std::vector<SsmLayerParams> ToyModel::ssm_layers() const {
  std::vector<SsmLayerParams> out;
  out.reserve(blocks.size());
  for (const auto& b : blocks) out.push_back(b.ssm);
  return out;
}

ToyModel ToyModel::zeros_like() const {
  ToyModel z(cfg_);
  for (auto& v : z.params()) std::fill(v.data, v.data + v.size(), 0.0);
  return z;
}

std::string ToyModel::checksum() const {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) {
    throw Error("checksum: SHA-256 unavailable");
  }
  for (const auto& v : params()) {
    EVP_DigestUpdate(ctx.get(), v.name.data(), v.name.size());
    const std::int64_t shape[2] = {static_cast<std::int64_t>(v.rows),
                                   static_cast<std::int64_t>(v.cols)};
    EVP_DigestUpdate(ctx.get(), shape, sizeof shape);
    EVP_DigestUpdate(ctx.get(), v.data, static_cast<std::size_t>(v.size()) * sizeof(double));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), digest, &len);
  std::string hex;
  hex.reserve(2 * len);
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

std::size_t expected_parameter_count(const ToyModelConfig& cfg) {
  const std::size_t V = static_cast<std::size_t>(cfg.vocab_size);
  const std::size_t D = static_cast<std::size_t>(cfg.d_model);
  const std::size_t N = static_cast<std::size_t>(cfg.d_state);
  const bool mamba = cfg.variant == Variant::Mamba;
  const std::size_t G = mamba ? D : static_cast<std::size_t>(cfg.n_heads);
  const std::size_t a = mamba ? D * N : G;
  const std::size_t per_layer = D + a + G * D + G + 2 * N * D + D + D * D;
  return 2 * V * D + D + static_cast<std::size_t>(cfg.n_layers) * per_layer;
}

namespace {

double inverse_softplus(double y) { return y + std::log(-std::expm1(-y)); }

double log_spread(double lo, double hi, int i, int n) {
  if (n <= 1) return std::sqrt(lo * hi);
  return lo * std::pow(hi / lo, static_cast<double>(i) / (n - 1));
}

}  // namespace

ToyModel build_model(const ToyModelConfig& cfg) {
  ToyModel m(cfg);
  Rng rng(derive_seed(cfg.seed, 0x6d6f64656cULL));
  const int D = cfg.d_model;
  const int N = cfg.d_state;
  const double proj_std = 1.0 / std::sqrt(static_cast<double>(D));

  for (Eigen::Index i = 0; i < m.embed.size(); ++i) m.embed.data()[i] = rng.normal();
  for (auto& b : m.blocks) {
    auto& s = b.ssm;
    if (cfg.variant == Variant::Mamba) {
      for (int c = 0; c < D; ++c) {
        for (int i = 0; i < N; ++i) s.a(c, i) = log_spread(cfg.a_min, cfg.a_max, i, N);
      }
    } else {
      for (int h = 0; h < s.n_heads; ++h) s.a(h, 0) = log_spread(cfg.a_min, cfg.a_max, h, s.n_heads);
    }
    for (Eigen::Index i = 0; i < s.w_delta.size(); ++i) s.w_delta.data()[i] = proj_std * rng.normal();
    const double log_lo = std::log(cfg.delta_min);
    const double log_hi = std::log(cfg.delta_max);
    for (int g = 0; g < s.groups(); ++g) {
      s.b_delta[g] = inverse_softplus(std::exp(rng.uniform(log_lo, log_hi)));
    }
    for (Eigen::Index i = 0; i < s.w_b.size(); ++i) s.w_b.data()[i] = proj_std * rng.normal();
    for (Eigen::Index i = 0; i < s.w_c.size(); ++i) s.w_c.data()[i] = proj_std * rng.normal();
    s.d_skip.setOnes();
    const double out_std = proj_std / std::sqrt(2.0 * cfg.n_layers);
    for (Eigen::Index i = 0; i < b.w_out.size(); ++i) b.w_out.data()[i] = out_std * rng.normal();
  }
  for (Eigen::Index i = 0; i < m.readout.size(); ++i) m.readout.data()[i] = proj_std * rng.normal();
  return m;
}

ModelScales ModelScales::identity(const ToyModel& model) {
  ModelScales s;
  for (const auto& b : model.blocks) s.layers.push_back(LayerScales::identity(b.ssm.groups()));
  return s;
}

ScaleGrads ScaleGrads::zeros(const ToyModel& model) {
  ScaleGrads g;
  for (const auto& b : model.blocks) {
    g.a.push_back(Vector::Zero(b.ssm.groups()));
    g.delta.push_back(Vector::Zero(b.ssm.groups()));
  }
  return g;
}

void ScaleGrads::add(const ScaleGrads& other) {
  for (std::size_t l = 0; l < a.size(); ++l) {
    a[l] += other.a[l];
    delta[l] += other.delta[l];
  }
}

namespace {

constexpr double kRmsEps = 1e-6;

struct NormCache {
  RowMatrix xhat;
  Vector inv_rms;
};

RowMatrix rmsnorm(const RowMatrix& x, const Vector& g, NormCache* cache) {
  const Eigen::Index T = x.rows();
  const double D = static_cast<double>(x.cols());
  RowMatrix xhat(T, x.cols());
  Vector inv(T);
  for (Eigen::Index t = 0; t < T; ++t) {
    inv[t] = 1.0 / std::sqrt(x.row(t).squaredNorm() / D + kRmsEps);
    xhat.row(t) = x.row(t) * inv[t];
  }
  RowMatrix out = xhat * g.asDiagonal();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_rms = std::move(inv);
  }
  return out;
}

RowMatrix rmsnorm_backward(const NormCache& cache, const Vector& g, const RowMatrix& dy,
                           Vector& dg) {
  const Eigen::Index T = dy.rows();
  const double D = static_cast<double>(dy.cols());
  RowMatrix dx(T, dy.cols());
  dg += (dy.cwiseProduct(cache.xhat)).colwise().sum().transpose();
  for (Eigen::Index t = 0; t < T; ++t) {
    const auto xh = cache.xhat.row(t);
    const Eigen::RowVectorXd dxhat = dy.row(t).cwiseProduct(g.transpose());
    const double proj = dxhat.dot(xh) / D;
    dx.row(t) = (dxhat - xh * proj) * cache.inv_rms[t];
  }
  return dx;
}

struct LayerCache {
  NormCache norm;
  ScanTape tape;
  RowMatrix y;
};

struct ModelTape {
  std::vector<LayerCache> layers;
  NormCache final_norm;
  RowMatrix z;
};

void check_tokens(const ToyModel& model, std::span<const int> tokens) {
  require(!tokens.empty(), "forward: empty token sequence");
  const int V = model.config().vocab_size;
  for (int tok : tokens) {
    if (tok < 0 || tok >= V) {
      throw ConfigError("forward: token id " + std::to_string(tok) + " outside vocabulary of " +
                        std::to_string(V));
    }
  }
}

const LayerScales& layer_scales(const ModelScales* scales, const ModelScales& identity,
                                std::size_t l) {
  return scales ? scales->layers[l] : identity.layers[l];
}

ForwardResult run_forward(const ToyModel& model, std::span<const int> tokens,
                          const ModelScales* scales, ModelTape* tape, bool record_norms) {
  check_tokens(model, tokens);
  const auto n_layers = model.blocks.size();
  if (scales) {
    require(scales->layers.size() == n_layers, "forward: scales do not match layer count");
  }
  const ModelScales identity = scales ? ModelScales{} : ModelScales::identity(model);
  const auto T = static_cast<Eigen::Index>(tokens.size());

  RowMatrix x(T, model.config().d_model);
  for (Eigen::Index t = 0; t < T; ++t) x.row(t) = model.embed.row(tokens[static_cast<std::size_t>(t)]);

  ForwardResult result;
  if (tape) tape->layers.resize(n_layers);
  for (std::size_t l = 0; l < n_layers; ++l) {
    const auto& block = model.blocks[l];
    LayerCache* cache = tape ? &tape->layers[l] : nullptr;
    const RowMatrix u = rmsnorm(x, block.norm_w, cache ? &cache->norm : nullptr);
    ScanOptions opts;
    opts.layer = static_cast<int>(l);
    opts.tape = cache ? &cache->tape : nullptr;
    opts.record_norms = record_norms;
    auto scan = selective_scan(block.ssm, u, layer_scales(scales, identity, l), {}, opts);
    x.noalias() += scan.y * block.w_out.transpose();
    if (record_norms) {
      result.traces.push_back(LayerTrace{std::move(scan.state_norm),
                                         std::move(scan.channel_norm_max),
                                         std::move(scan.channel_norm_min)});
    }
    if (cache) cache->y = std::move(scan.y);
  }
  const RowMatrix z = rmsnorm(x, model.final_norm_w, tape ? &tape->final_norm : nullptr);
  result.logits = z * model.readout.transpose();
  if (tape) tape->z = z;
  return result;
}

bool is_target(const TokenSample& s, std::size_t t) {
  return s.loss_mask.empty() || s.loss_mask[t] != 0;
}

}  // namespace

ForwardResult forward(const ToyModel& model, std::span<const int> tokens,
                      const ModelScales* scales) {
  return run_forward(model, tokens, scales, nullptr, true);
}

LossStats loss_and_grad(const ToyModel& model, const TokenSample& sample,
                        const ModelScales* scales, ToyModel* param_grads,
                        ScaleGrads* scale_grads) {
  const auto& tokens = sample.tokens;
  require(sample.loss_mask.empty() || sample.loss_mask.size() == tokens.size(),
          "loss: mask length must match token count");
  const bool need_grad = param_grads || scale_grads;
  ModelTape tape;
  const auto fwd = run_forward(model, tokens, scales, need_grad ? &tape : nullptr, false);
  const RowMatrix& logits = fwd.logits;
  const auto T = static_cast<Eigen::Index>(tokens.size());

  LossStats stats;
  RowMatrix dlogits;
  if (need_grad) dlogits = RowMatrix::Zero(T, logits.cols());
  for (Eigen::Index t = 0; t + 1 < T; ++t) {
    const auto next = static_cast<std::size_t>(t + 1);
    if (!is_target(sample, next)) continue;
    const int target = tokens[next];
    const auto row = logits.row(t);
    const double mx = row.maxCoeff();
    const double sum = (row.array() - mx).exp().sum();
    const double lse = mx + std::log(sum);
    stats.nll_sum += lse - row[target];
    ++stats.count;
    if (need_grad) {
      dlogits.row(t) = (row.array() - lse).exp();
      dlogits(t, target) -= 1.0;
    }
  }
  if (!std::isfinite(stats.nll_sum)) throw NumericError("loss: non-finite loss");
  if (!need_grad || stats.count == 0) return stats;

  ToyModel scratch;
  ToyModel* g = param_grads;
  if (!g) {
    scratch = model.zeros_like();
    g = &scratch;
  }
  const ModelScales identity = scales ? ModelScales{} : ModelScales::identity(model);

  g->readout.noalias() += dlogits.transpose() * tape.z;
  const RowMatrix dz = dlogits * model.readout;
  RowMatrix dx = rmsnorm_backward(tape.final_norm, model.final_norm_w, dz, g->final_norm_w);
  for (std::size_t li = model.blocks.size(); li-- > 0;) {
    const auto& block = model.blocks[li];
    auto& gb = g->blocks[li];
    const auto& cache = tape.layers[li];
    gb.w_out.noalias() += dx.transpose() * cache.y;
    const RowMatrix dy = dx * block.w_out;
    const auto sg = scan_backward(block.ssm, layer_scales(scales, identity, li), cache.tape, dy);
    gb.ssm.a += sg.a;
    gb.ssm.w_delta += sg.w_delta;
    gb.ssm.b_delta += sg.b_delta;
    gb.ssm.w_b += sg.w_b;
    gb.ssm.w_c += sg.w_c;
    gb.ssm.d_skip += sg.d_skip;
    if (scale_grads) {
      scale_grads->a[li] += sg.scale_a;
      scale_grads->delta[li] += sg.scale_delta;
    }
    dx += rmsnorm_backward(cache.norm, block.norm_w, sg.du, gb.norm_w);
  }
  for (Eigen::Index t = 0; t < T; ++t) g->embed.row(tokens[static_cast<std::size_t>(t)]) += dx.row(t);
  return stats;
}

LossStats sequence_loss(const ToyModel& model, const TokenSample& sample,
                        const ModelScales* scales) {
  return loss_and_grad(model, sample, scales, nullptr, nullptr);
}

TrainResult train(ToyModel& model, const SampleSource& source, const TrainConfig& cfg,
                  const TrainProgress& progress) {
  require(cfg.steps >= 0 && cfg.batch >= 1, "train: steps must be >= 0 and batch >= 1");
  require(cfg.lr >= 0.0, "train: learning rate must be non-negative");
  auto views = model.params();
  std::vector<std::vector<double>> m1(views.size());
  std::vector<std::vector<double>> m2(views.size());
  for (std::size_t p = 0; p < views.size(); ++p) {
    m1[p].assign(static_cast<std::size_t>(views[p].size()), 0.0);
    m2[p].assign(static_cast<std::size_t>(views[p].size()), 0.0);
  }

  TrainResult result;
  double initial_loss = 0.0;
  int diverged_for = 0;
  const auto batch = static_cast<std::size_t>(cfg.batch);
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<ToyModel> grads(batch);
    std::vector<LossStats> stats(batch);
    parallel_for(batch, [&](std::size_t i) {
      const auto sample = source(static_cast<std::uint64_t>(step) * batch + i);
      grads[i] = model.zeros_like();
      stats[i] = loss_and_grad(model, sample, nullptr, &grads[i], nullptr);
    });
    LossStats total;
    for (std::size_t i = 0; i < batch; ++i) {
      total.nll_sum += stats[i].nll_sum;
      total.count += stats[i].count;
    }
    const double loss = total.mean();
    result.loss_curve.push_back(loss);
    if (progress) progress(step, loss);
    if (step == 0) initial_loss = loss;
    diverged_for = (loss > 10.0 * initial_loss || !std::isfinite(loss)) ? diverged_for + 1 : 0;
    if (diverged_for >= 100) {
      throw NumericError("train: loss above 10x its initial value for 100 steps (step " +
                         std::to_string(step) + ")");
    }
    if (total.count == 0) continue;

    auto gviews = grads[0].params();
    for (std::size_t i = 1; i < batch; ++i) {
      auto other = grads[i].params();
      for (std::size_t p = 0; p < gviews.size(); ++p) {
        for (Eigen::Index k = 0; k < gviews[p].size(); ++k) gviews[p].data[k] += other[p].data[k];
      }
    }
    const double inv_count = 1.0 / static_cast<double>(total.count);
    double sq = 0.0;
    for (std::size_t p = 0; p < gviews.size(); ++p) {
      for (Eigen::Index k = 0; k < gviews[p].size(); ++k) {
        double gk = gviews[p].data[k] * inv_count;
        if (views[p].positive) gk *= views[p].data[k];  // d/d(log a)
        gviews[p].data[k] = gk;
        sq += gk * gk;
      }
    }
    const double gnorm = std::sqrt(sq);
    const double clip = (cfg.grad_clip > 0.0 && gnorm > cfg.grad_clip) ? cfg.grad_clip / gnorm : 1.0;

    double lr = cfg.lr;
    if (step < cfg.warmup) {
      lr *= static_cast<double>(step + 1) / cfg.warmup;
    } else if (cfg.steps > cfg.warmup) {
      const double progress_frac =
          static_cast<double>(step - cfg.warmup) / static_cast<double>(cfg.steps - cfg.warmup);
      const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress_frac));
      lr *= cfg.min_lr_fraction + (1.0 - cfg.min_lr_fraction) * cosine;
    }
    const double bc1 = 1.0 - std::pow(cfg.beta1, step + 1);
    const double bc2 = 1.0 - std::pow(cfg.beta2, step + 1);
    for (std::size_t p = 0; p < views.size(); ++p) {
      auto& v = views[p];
      for (Eigen::Index k = 0; k < v.size(); ++k) {
        const double gk = gviews[p].data[k] * clip;
        double& a1 = m1[p][static_cast<std::size_t>(k)];
        double& a2 = m2[p][static_cast<std::size_t>(k)];
        a1 = cfg.beta1 * a1 + (1.0 - cfg.beta1) * gk;
        a2 = cfg.beta2 * a2 + (1.0 - cfg.beta2) * gk * gk;
        const double upd = lr * (a1 / bc1) / (std::sqrt(a2 / bc2) + cfg.eps);
        if (v.positive) {
          v.data[k] *= std::exp(-upd);
        } else {
          v.data[k] -= upd;
        }
      }
    }
  }
  model.train_steps += cfg.steps;
  const std::size_t tail = std::min<std::size_t>(50, result.loss_curve.size());
  if (tail > 0) {
    double s = 0.0;
    for (std::size_t i = result.loss_curve.size() - tail; i < result.loss_curve.size(); ++i) {
      s += result.loss_curve[i];
    }
    result.final_loss = s / static_cast<double>(tail);
    model.final_train_loss = result.final_loss;
  }
  return result;
}

std::vector<PplRow> perplexity_by_length(const ToyModel& model, std::span<const int> corpus,
                                         std::span<const int> lengths, const ModelScales* scales,
                                         int max_windows) {
  require(max_windows >= 1, "perplexity_by_length: max_windows must be >= 1");
  for (std::size_t i = 1; i < lengths.size(); ++i) {
    require(lengths[i] > lengths[i - 1], "perplexity_by_length: lengths must be ascending");
  }
  std::vector<PplRow> rows;
  for (int len : lengths) {
    require(len >= 2, "perplexity_by_length: lengths must be at least 2");
    const auto available = static_cast<int>(corpus.size() / static_cast<std::size_t>(len));
    if (available < 1) {
      throw ConfigError("perplexity_by_length: length " + std::to_string(len) + " needs at least " +
                        std::to_string(len) + " tokens, corpus has " +
                        std::to_string(corpus.size()));
    }
    const int n = std::min(available, max_windows);
    // Windows are spread evenly, so shorter lengths score prefixes of the
    // same stretches of text that longer lengths see.
    const std::size_t stride = corpus.size() / static_cast<std::size_t>(n);
    std::vector<LossStats> stats(static_cast<std::size_t>(n));
    parallel_for(stats.size(), [&](std::size_t w) {
      TokenSample s;
      const auto begin = corpus.begin() + static_cast<std::ptrdiff_t>(w * stride);
      s.tokens.assign(begin, begin + len);
      stats[w] = sequence_loss(model, s, scales);
    });
    LossStats total;
    for (const auto& s : stats) {
      total.nll_sum += s.nll_sum;
      total.count += s.count;
    }
    rows.push_back(PplRow{len, n, total.mean(), std::exp(total.mean())});
  }
  return rows;
}

}  // namespace ssmlab
