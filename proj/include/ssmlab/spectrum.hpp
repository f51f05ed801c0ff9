#pragma once

#include "ssmlab/ssm_core.hpp"

#include <filesystem>
#include <span>
#include <vector>

namespace ssmlab {

struct SpectrumSummary {
  double lambda_max = 0.0;
  double lambda_min = 0.0;
  double frac_above_099 = 0.0;
  double frac_below_001 = 0.0;
};

struct SpectrumReport {
  std::vector<std::vector<double>> rows;  // one descending row per layer
  std::vector<SpectrumSummary> summary;
};

// Eigenvalues exp(-a) of the continuous transition map, sorted descending.
// Mamba2 layers yield one value per head.
std::vector<double> layer_spectrum(const SsmLayerParams& params);

SpectrumReport spectrum_heatmap(std::span<const SsmLayerParams> layers);

// Header `layer,r0,r1,...`; one row per layer.
void write_heatmap_csv(const SpectrumReport& report, const std::filesystem::path& path);

// lambda^s elementwise, the spectral effect of multiplying a by s.
std::vector<double> apply_spectrum_scaling(std::span<const double> lambda, double s);

}  // namespace ssmlab
