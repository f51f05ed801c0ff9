// Binary checkpoint container:
//
//   "SSMX" | u32 version | u32 n | n bytes of UTF-8 JSON header
//   u32 tensor count
//   per tensor: u32 name length | name | u32 ndim (2) | u64 rows | u64 cols |
//               rows * cols little-endian f64, row-major
//
// The JSON header holds the model config, the training-step count and the
// final training loss.

#include "ssmlab/toy_model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

namespace ssmlab {

namespace {

constexpr char kMagic[4] = {'S', 'S', 'M', 'X'};
constexpr std::uint32_t kMaxHeaderBytes = 1u << 20;
constexpr std::uint32_t kMaxNameBytes = 1u << 12;

template <class T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

class Reader {
 public:
  Reader(std::ifstream& in, const std::filesystem::path& path) : in_(in), path_(path) {}

  template <class T>
  T get() {
    T v{};
    bytes(reinterpret_cast<char*>(&v), sizeof v);
    return v;
  }

  void bytes(char* dst, std::size_t n) {
    in_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      throw FormatError("corrupt checkpoint " + path_.string() + ": truncated");
    }
  }

 private:
  std::ifstream& in_;
  const std::filesystem::path& path_;
};

}  // namespace

void save_checkpoint(const ToyModel& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");

  nlohmann::json header;
  header["config"] = model.config();
  header["train_steps"] = model.train_steps;
  header["final_train_loss"] =
      std::isfinite(model.final_train_loss) ? nlohmann::json(model.final_train_loss) : nullptr;
  const std::string text = header.dump();

  out.write(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));

  const auto views = model.params();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(views.size()));
  for (const auto& v : views) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(v.name.size()));
    out.write(v.name.data(), static_cast<std::streamsize>(v.name.size()));
    put<std::uint32_t>(out, 2);
    put<std::uint64_t>(out, static_cast<std::uint64_t>(v.rows));
    put<std::uint64_t>(out, static_cast<std::uint64_t>(v.cols));
    out.write(reinterpret_cast<const char*>(v.data),
              static_cast<std::streamsize>(static_cast<std::size_t>(v.size()) * sizeof(double)));
  }
  if (!out) throw IoError("write failed: " + path.string());
}

ToyModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  Reader r(in, path);

  char magic[4];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw FormatError("corrupt checkpoint " + path.string() + ": bad magic bytes");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint " + path.string() + " has format version " +
                       std::to_string(version) + ", expected " +
                       std::to_string(kCheckpointVersion));
  }
  const auto header_len = r.get<std::uint32_t>();
  if (header_len > kMaxHeaderBytes) {
    throw FormatError("corrupt checkpoint " + path.string() + ": oversized header");
  }
  std::string text(header_len, '\0');
  r.bytes(text.data(), text.size());

  ToyModelConfig cfg;
  long long steps = 0;
  double final_loss = std::numeric_limits<double>::quiet_NaN();
  try {
    const auto header = nlohmann::json::parse(text);
    cfg = header.at("config").get<ToyModelConfig>();
    steps = header.value("train_steps", 0LL);
    if (header.contains("final_train_loss") && header["final_train_loss"].is_number()) {
      final_loss = header["final_train_loss"].get<double>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("corrupt checkpoint " + path.string() + ": bad header (" + e.what() + ")");
  }

  ToyModel model(cfg);
  model.train_steps = steps;
  model.final_train_loss = final_loss;
  std::map<std::string, ParamView> expected;
  for (auto& v : model.params()) expected.emplace(v.name, v);

  const auto count = r.get<std::uint32_t>();
  if (count != expected.size()) {
    throw FormatError("corrupt checkpoint " + path.string() + ": expected " +
                      std::to_string(expected.size()) + " tensors, found " + std::to_string(count));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint32_t>();
    if (name_len > kMaxNameBytes) {
      throw FormatError("corrupt checkpoint " + path.string() + ": oversized tensor name");
    }
    std::string name(name_len, '\0');
    r.bytes(name.data(), name.size());
    const auto it = expected.find(name);
    if (it == expected.end()) {
      throw FormatError("corrupt checkpoint " + path.string() + ": unexpected tensor " + name);
    }
    const auto ndim = r.get<std::uint32_t>();
    const auto rows = r.get<std::uint64_t>();
    const auto cols = r.get<std::uint64_t>();
    const auto& v = it->second;
    if (ndim != 2 || rows != static_cast<std::uint64_t>(v.rows) ||
        cols != static_cast<std::uint64_t>(v.cols)) {
      throw FormatError("corrupt checkpoint " + path.string() + ": shape mismatch for " + name);
    }
    r.bytes(reinterpret_cast<char*>(v.data), static_cast<std::size_t>(v.size()) * sizeof(double));
    expected.erase(it);
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw FormatError("corrupt checkpoint " + path.string() + ": trailing bytes");
  }
  for (const auto& b : model.blocks) {
    try {
      b.ssm.validate();
    } catch (const ConfigError& e) {
      throw FormatError("corrupt checkpoint " + path.string() + ": " + e.what());
    }
  }
  return model;
}

}  // namespace ssmlab
