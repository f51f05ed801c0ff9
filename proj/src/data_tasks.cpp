#include "ssmlab/data_tasks.hpp"

#include "ssmlab/csv.hpp"
#include "ssmlab/parallel.hpp"
#include "ssmlab/rng.hpp"

#include <array>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

namespace ssmlab {

namespace vocab {

std::string token_name(int token) {
  switch (token) {
    case kPad: return "<pad>";
    case kBos: return "<bos>";
    case kPeriod: return ".";
    case kIntro: return "<intro>";
    case kKey: return "<key>";
    case kQuery: return "<query>";
    case kAnswer: return "<answer>";
    case kSep: return "<sep>";
    default: break;
  }
  if (token >= kDigit0 && token < kDigit0 + 10) return std::string(1, static_cast<char>('0' + token - kDigit0));
  if (token >= kFirstWord && token < kSize) return "w" + std::to_string(token - kFirstWord);
  return "<" + std::to_string(token) + ">";
}

}  // namespace vocab

namespace {

constexpr int kSuccessors = 3;
constexpr int kTopicWords = 12;
constexpr int kMaxTopics = 16;

// The language itself is fixed; only sampling depends on the caller's seed.
struct Grammar {
  std::array<std::array<int, kSuccessors>, vocab::kWordCount> next{};
  std::array<std::array<int, kTopicWords>, kMaxTopics> topic{};

  Grammar() {
    Rng rng(0x67726d6dULL);
    for (auto& row : next) {
      for (auto& w : row) w = rng.index(vocab::kWordCount);
    }
    for (auto& row : topic) {
      for (auto& w : row) w = rng.index(vocab::kWordCount);
    }
  }
};

const Grammar& grammar() {
  static const Grammar g;
  return g;
}

}  // namespace

std::vector<int> babble(std::uint64_t seed, std::size_t n, const BabbleConfig& cfg) {
  require(cfg.topics >= 1 && cfg.topics <= kMaxTopics, "babble: topics must be in [1, 16]");
  const auto& g = grammar();
  Rng rng(derive_seed(seed, 0x626162ULL));
  int topic = rng.index(cfg.topics);
  int prev = rng.index(vocab::kWordCount);
  std::vector<int> out;
  out.reserve(n);
  while (out.size() < n) {
    if (rng.uniform() < cfg.topic_switch) topic = rng.index(cfg.topics);
    if (rng.uniform() < cfg.period_rate) {
      out.push_back(vocab::kPeriod);
      continue;
    }
    int word;
    if (rng.uniform() < cfg.topic_weight) {
      word = g.topic[static_cast<std::size_t>(topic)][static_cast<std::size_t>(rng.index(kTopicWords))];
    } else {
      // Successor weights 0.6 / 0.3 / 0.1.
      const double u = rng.uniform();
      const int k = u < 0.6 ? 0 : (u < 0.9 ? 1 : 2);
      word = g.next[static_cast<std::size_t>(prev)][static_cast<std::size_t>(k)];
    }
    prev = word;
    out.push_back(vocab::kFirstWord + word);
  }
  return out;
}

FillerSource FillerSource::from_text_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open filler text " + path.string());
  FillerSource f;
  std::string word;
  while (in >> word) {
    const auto h = std::hash<std::string>{}(word);
    f.words_.push_back(vocab::kFirstWord + static_cast<int>(h % vocab::kWordCount));
  }
  if (f.words_.empty()) throw ConfigError("filler text " + path.string() + " contains no words");
  return f;
}

std::vector<int> FillerSource::generate(std::uint64_t seed, std::size_t n) const {
  if (words_.empty()) return babble(seed, n, babble_);
  Rng rng(seed);
  std::size_t pos = static_cast<std::size_t>(rng.index(static_cast<int>(words_.size())));
  std::vector<int> out(n);
  for (auto& t : out) {
    t = words_[pos];
    pos = (pos + 1) % words_.size();
  }
  return out;
}

PasskeySample gen_passkey(std::uint64_t seed, int length, double depth, const FillerSource& filler) {
  if (length < kPasskeyOverhead) {
    throw ConfigError("gen_passkey: length " + std::to_string(length) + " is below the minimum of " +
                      std::to_string(kPasskeyOverhead));
  }
  require(depth >= 0.0 && depth <= 1.0, "gen_passkey: depth must lie in [0, 1]");
  Rng rng(derive_seed(seed, 0x706b6579ULL));
  std::vector<int> digits(kPasskeyDigits);
  for (auto& d : digits) d = rng.index(10);

  const int fill = length - kPasskeyOverhead;
  const int before = static_cast<int>(std::lround(depth * fill));
  const auto text = filler.generate(derive_seed(seed, 0x66696c6cULL), static_cast<std::size_t>(fill));

  PasskeySample s;
  s.depth = depth;
  s.length = length;
  auto& tok = s.sample.tokens;
  tok.reserve(static_cast<std::size_t>(length));
  tok.push_back(vocab::kBos);
  tok.push_back(vocab::kIntro);
  tok.insert(tok.end(), text.begin(), text.begin() + before);
  tok.push_back(vocab::kKey);
  s.span_begin = static_cast<int>(tok.size());
  for (int d : digits) tok.push_back(vocab::kDigit0 + d);
  s.span_end = static_cast<int>(tok.size());
  tok.push_back(vocab::kPeriod);
  tok.insert(tok.end(), text.begin() + before, text.end());
  tok.push_back(vocab::kQuery);
  tok.push_back(vocab::kAnswer);
  s.answer_begin = static_cast<int>(tok.size());
  for (int d : digits) tok.push_back(vocab::kDigit0 + d);

  s.sample.loss_mask.assign(tok.size(), 0);
  for (std::size_t i = static_cast<std::size_t>(s.answer_begin); i < tok.size(); ++i) {
    s.sample.loss_mask[i] = 1;
  }
  s.passkey = decode_digits(std::span<const int>(tok).subspan(
      static_cast<std::size_t>(s.span_begin), kPasskeyDigits));
  return s;
}

std::string decode_digits(std::span<const int> tokens) {
  std::string out;
  for (int t : tokens) {
    if (t < vocab::kDigit0 || t >= vocab::kDigit0 + 10) {
      throw ConfigError("decode_digits: token " + vocab::token_name(t) + " is not a digit");
    }
    out.push_back(static_cast<char>('0' + t - vocab::kDigit0));
  }
  return out;
}

CopySample gen_copy(std::uint64_t seed, int length, int pattern_len) {
  require(pattern_len >= 1 && 2 * pattern_len < length,
          "gen_copy: need 1 <= pattern_len < length / 2");
  require(length >= 2 * pattern_len + 2, "gen_copy: length too small for BOS and SEP");
  Rng rng(derive_seed(seed, 0x636f7079ULL));
  CopySample c;
  c.pattern.resize(static_cast<std::size_t>(pattern_len));
  for (auto& p : c.pattern) p = vocab::kFirstWord + rng.index(vocab::kWordCount);
  const int fill = length - 2 - 2 * pattern_len;
  const auto text = babble(derive_seed(seed, 0x66696c6cULL), static_cast<std::size_t>(fill));

  auto& tok = c.sample.tokens;
  tok.push_back(vocab::kBos);
  tok.insert(tok.end(), c.pattern.begin(), c.pattern.end());
  tok.insert(tok.end(), text.begin(), text.end());
  tok.push_back(vocab::kSep);
  const auto copy_begin = tok.size();
  tok.insert(tok.end(), c.pattern.begin(), c.pattern.end());
  c.sample.loss_mask.assign(tok.size(), 0);
  for (auto i = copy_begin; i < tok.size(); ++i) c.sample.loss_mask[i] = 1;
  return c;
}

bool exact_match(const ToyModel& model, const TokenSample& sample, const ModelScales* scales) {
  const auto fwd = forward(model, sample.tokens, scales);
  for (std::size_t t = 1; t < sample.tokens.size(); ++t) {
    if (!sample.loss_mask.empty() && !sample.loss_mask[t]) continue;
    Eigen::Index best = 0;
    fwd.logits.row(static_cast<Eigen::Index>(t - 1)).maxCoeff(&best);
    if (best != sample.tokens[t]) return false;
  }
  return true;
}

int PasskeyGrid::solved_count(int length) const {
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    if (lengths[i] == length) return static_cast<int>(solved.row(static_cast<Eigen::Index>(i)).count());
  }
  throw ConfigError("PasskeyGrid: length " + std::to_string(length) + " not in grid");
}

PasskeyGrid passkey_grid_eval(const ToyModel& model, std::span<const int> lengths,
                              std::span<const double> depths, int n_per_cell,
                              const ModelScales* scales, std::uint64_t seed,
                              const FillerSource& filler) {
  require(n_per_cell >= 1, "passkey_grid_eval: n_per_cell must be >= 1");
  PasskeyGrid grid;
  grid.lengths.assign(lengths.begin(), lengths.end());
  grid.depths.assign(depths.begin(), depths.end());
  const auto nl = static_cast<Eigen::Index>(lengths.size());
  const auto nd = static_cast<Eigen::Index>(depths.size());
  grid.accuracy = RowMatrix::Zero(nl, nd);
  grid.solved.setConstant(nl, nd, false);

  const std::size_t per_cell = static_cast<std::size_t>(n_per_cell);
  const std::size_t total = static_cast<std::size_t>(nl * nd) * per_cell;
  std::vector<std::uint8_t> correct(total, 0);
  parallel_for(total, [&](std::size_t k) {
    const std::size_t cell = k / per_cell;
    const std::size_t li = cell / static_cast<std::size_t>(nd);
    const std::size_t di = cell % static_cast<std::size_t>(nd);
    const auto s = gen_passkey(derive_seed(seed, static_cast<std::uint64_t>(lengths[li]),
                                           di * 1000003ULL + k % per_cell),
                               lengths[li], depths[di], filler);
    correct[k] = exact_match(model, s.sample, scales) ? 1 : 0;
  });
  for (Eigen::Index li = 0; li < nl; ++li) {
    for (Eigen::Index di = 0; di < nd; ++di) {
      const std::size_t cell = static_cast<std::size_t>(li * nd + di);
      int hits = 0;
      for (std::size_t j = 0; j < per_cell; ++j) hits += correct[cell * per_cell + j];
      grid.accuracy(li, di) = static_cast<double>(hits) / n_per_cell;
      grid.solved(li, di) = hits == n_per_cell;
    }
  }
  return grid;
}

void write_passkey_grid_csv(const PasskeyGrid& grid, const std::filesystem::path& accuracy_path,
                            const std::filesystem::path& solved_path) {
  std::vector<std::string> header{"length"};
  for (double d : grid.depths) header.push_back(format_double(d));
  CsvWriter acc(accuracy_path, header);
  CsvWriter sol(solved_path, header);
  for (std::size_t i = 0; i < grid.lengths.size(); ++i) {
    std::vector<std::string> a{std::to_string(grid.lengths[i])};
    std::vector<std::string> s{std::to_string(grid.lengths[i])};
    for (std::size_t j = 0; j < grid.depths.size(); ++j) {
      a.push_back(format_double(grid.accuracy(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))));
      s.push_back(grid.solved(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) ? "1" : "0");
    }
    acc.row(a);
    sol.row(s);
  }
}

std::vector<int> load_text_corpus(const std::filesystem::path& path, std::optional<int> boundary) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open corpus " + path.string());
  const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  std::vector<int> out;
  out.reserve(bytes.size() + 1);
  if (boundary) out.push_back(*boundary);
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    out.push_back(static_cast<unsigned char>(bytes[i]));
    if (boundary && bytes[i] == '\n' && i > 0 && bytes[i - 1] == '\n') out.push_back(*boundary);
  }
  return out;
}

}  // namespace ssmlab
