#pragma once

#include "conda_dyn/numcore.hpp"

#include <span>
#include <string>
#include <vector>

namespace conda_dyn {

struct MetricReport {
  std::string dataset;
  std::string space;   // "Z", "C" or "-"
  std::string method;
  std::string metric;
  double value = 0.0;
  double std = 0.0;
  long count = 1;
  std::uint64_t seed = 0;
};

/// sqrt(mean over all entries of (pred - truth)^2). Rows are aligned samples.
double rmse(const Matrix& pred, const Matrix& truth);

/// 10 log10(max^2 / mse), capped at 100 dB when mse < 1e-10.
double psnr(const Matrix& a, const Matrix& b, double max_value = 1.0);

/// Mean SSIM over all 8x8 windows (stride 1, uniform weights) with
/// C1 = (0.01 L)^2 and C2 = (0.03 L)^2.
double ssim(const Matrix& a, const Matrix& b, double dynamic_range = 1.0);

struct TaeSummary {
  std::vector<double> per_trajectory;
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation (0 for a single trajectory)
};

/// Sum over frames and coordinates of |pred - truth|.
double total_abs_error(const Matrix& pred, const Matrix& truth);
TaeSummary total_abs_error(std::span<const Matrix> pred, std::span<const Matrix> truth);

/// Disparity after centering, unit Frobenius scaling and the best proper
/// rotation (no reflections); lies in [0, 1].
double procrustes_distance(const Matrix& a, const Matrix& b);

/// Mean and sample standard deviation.
std::pair<double, double> mean_std(std::span<const double> values);

} // namespace conda_dyn
