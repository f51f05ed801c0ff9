#pragma once

#include "ssmlab/toy_model.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ssmlab {

// Symbolic vocabulary shared by the synthetic tasks.
namespace vocab {
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kDigit0 = 2;  // digits occupy kDigit0 .. kDigit0 + 9
inline constexpr int kPeriod = 12;
inline constexpr int kIntro = 13;   // "a pass key is hidden in this text"
inline constexpr int kKey = 14;     // "the pass key is"
inline constexpr int kQuery = 15;   // "what is the pass key?"
inline constexpr int kAnswer = 16;  // "the pass key is" (answer prompt)
inline constexpr int kSep = 17;     // copy-task delimiter
inline constexpr int kFirstWord = 18;
inline constexpr int kSize = 64;
inline constexpr int kWordCount = kSize - kFirstWord;

std::string token_name(int token);
}  // namespace vocab

// Seeded babble: each word follows a small fixed successor table, mixed with
// draws from the current topic's preferred words. The topic switches with
// probability topic_switch per token, so topic identity is a slowly varying
// latent that rewards long memory.
struct BabbleConfig {
  int topics = 4;
  double topic_weight = 0.5;
  double topic_switch = 1.0 / 512.0;
  double period_rate = 0.08;
};

std::vector<int> babble(std::uint64_t seed, std::size_t n, const BabbleConfig& cfg = {});

// Filler text for passkey samples: seeded babble by default, or the words of
// a local text file hashed onto the word tokens.
class FillerSource {
 public:
  FillerSource() = default;
  static FillerSource from_text_file(const std::filesystem::path& path);

  std::vector<int> generate(std::uint64_t seed, std::size_t n) const;

 private:
  std::vector<int> words_;  // empty means babble
  BabbleConfig babble_;
};

inline constexpr int kPasskeyDigits = 5;
// BOS, INTRO, KEY + digits + PERIOD, QUERY, ANSWER + digits.
inline constexpr int kPasskeyOverhead = 2 + (1 + kPasskeyDigits + 1) + 2 + kPasskeyDigits;

struct PasskeySample {
  TokenSample sample;  // loss mask on the trailing answer digits
  int span_begin = 0;  // embedded key digits occupy [span_begin, span_end)
  int span_end = 0;
  int answer_begin = 0;  // first answer digit after the query
  double depth = 0.0;
  int length = 0;
  std::string passkey;
};

PasskeySample gen_passkey(std::uint64_t seed, int length, double depth,
                          const FillerSource& filler = {});

std::string decode_digits(std::span<const int> tokens);

struct CopySample {
  TokenSample sample;  // loss mask on the reproduced pattern
  std::vector<int> pattern;
};

// BOS, pattern, filler, SEP, pattern. Requires 1 <= pattern_len < length / 2.
CopySample gen_copy(std::uint64_t seed, int length, int pattern_len);

// True when the argmax prediction at every masked position equals its target.
// With teacher forcing this coincides with greedy decoding's exact match: both
// agree up to the first wrong digit, and either one wrong digit fails the sample.
bool exact_match(const ToyModel& model, const TokenSample& sample,
                 const ModelScales* scales = nullptr);

struct PasskeyGrid {
  std::vector<int> lengths;
  std::vector<double> depths;
  RowMatrix accuracy;  // lengths x depths
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> solved;

  int solved_count(int length) const;
};

PasskeyGrid passkey_grid_eval(const ToyModel& model, std::span<const int> lengths,
                              std::span<const double> depths, int n_per_cell,
                              const ModelScales* scales, std::uint64_t seed,
                              const FillerSource& filler = {});

void write_passkey_grid_csv(const PasskeyGrid& grid, const std::filesystem::path& accuracy_path,
                            const std::filesystem::path& solved_path);

// Raw bytes as tokens (vocabulary 256). When boundary is set it is inserted at
// the start and after every blank line.
std::vector<int> load_text_corpus(const std::filesystem::path& path,
                                  std::optional<int> boundary = std::nullopt);

}  // namespace ssmlab
