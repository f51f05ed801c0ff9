#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace ssmlab {

// Shortest round-trip decimal representation of v.
std::string format_double(double v);

class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header);

  void row(const std::vector<std::string>& cells);
  void row(const std::vector<double>& values);

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

}  // namespace ssmlab
