#include "ssmlab/spectrum.hpp"

#include "ssmlab/csv.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

namespace ssmlab {

std::vector<double> layer_spectrum(const SsmLayerParams& params) {
  params.validate();
  std::vector<double> out(static_cast<std::size_t>(params.a.size()));
  for (Eigen::Index i = 0; i < params.a.size(); ++i) out[i] = std::exp(-params.a.data()[i]);
  std::sort(out.begin(), out.end(), std::greater<>());
  return out;
}

SpectrumReport spectrum_heatmap(std::span<const SsmLayerParams> layers) {
  require(!layers.empty(), "spectrum_heatmap: model has no layers");
  SpectrumReport report;
  for (const auto& layer : layers) {
    auto row = layer_spectrum(layer);
    SpectrumSummary s;
    s.lambda_max = row.front();
    s.lambda_min = row.back();
    const auto n = static_cast<double>(row.size());
    s.frac_above_099 = std::count_if(row.begin(), row.end(), [](double v) { return v > 0.99; }) / n;
    s.frac_below_001 = std::count_if(row.begin(), row.end(), [](double v) { return v < 0.01; }) / n;
    report.summary.push_back(s);
    report.rows.push_back(std::move(row));
  }
  return report;
}

void write_heatmap_csv(const SpectrumReport& report, const std::filesystem::path& path) {
  std::size_t width = 0;
  for (const auto& row : report.rows) width = std::max(width, row.size());
  std::vector<std::string> header{"layer"};
  for (std::size_t r = 0; r < width; ++r) header.push_back("r" + std::to_string(r));
  CsvWriter csv(path, header);
  for (std::size_t l = 0; l < report.rows.size(); ++l) {
    std::vector<std::string> cells{std::to_string(l)};
    for (double v : report.rows[l]) cells.push_back(format_double(v));
    csv.row(cells);
  }
}

std::vector<double> apply_spectrum_scaling(std::span<const double> lambda, double s) {
  require(s > 0.0 && std::isfinite(s), "apply_spectrum_scaling: s must be positive");
  std::vector<double> out(lambda.size());
  std::transform(lambda.begin(), lambda.end(), out.begin(),
                 [s](double l) { return std::pow(l, s); });
  return out;
}

}  // namespace ssmlab
