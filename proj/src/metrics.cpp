#include "conda_dyn/metrics.hpp"

#include <Eigen/SVD>

#include <cmath>
#include <numeric>

namespace conda_dyn {

namespace {
constexpr int kSsimWindow = 8;
constexpr double kPsnrCap = 100.0;

void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw InputError(std::string(what) + ": shapes " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                     " and " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()) + " differ");
  }
  if (a.size() == 0) {
    throw InputError(std::string(what) + ": empty input");
  }
}
} // namespace

double rmse(const Matrix& pred, const Matrix& truth) {
  require_same_shape(pred, truth, "rmse");
  return std::sqrt((pred - truth).squaredNorm() / static_cast<double>(pred.size()));
}

double psnr(const Matrix& a, const Matrix& b, double max_value) {
  require_same_shape(a, b, "psnr");
  if (!(max_value > 0.0)) {
    throw InputError("psnr: max_value must be positive");
  }
  const double mse = (a - b).squaredNorm() / static_cast<double>(a.size());
  if (mse < 1e-10) {
    return kPsnrCap;
  }
  return std::min(kPsnrCap, 10.0 * std::log10(max_value * max_value / mse));
}

double ssim(const Matrix& a, const Matrix& b, double dynamic_range) {
  require_same_shape(a, b, "ssim");
  if (a.rows() < kSsimWindow || a.cols() < kSsimWindow) {
    throw InputError("ssim: images must be at least 8x8");
  }
  const double c1 = std::pow(0.01 * dynamic_range, 2);
  const double c2 = std::pow(0.03 * dynamic_range, 2);
  const double n = kSsimWindow * kSsimWindow;
  double total = 0.0;
  long windows = 0;
  for (Eigen::Index r = 0; r + kSsimWindow <= a.rows(); ++r) {
    for (Eigen::Index c = 0; c + kSsimWindow <= a.cols(); ++c) {
      const auto wa = a.block(r, c, kSsimWindow, kSsimWindow).array();
      const auto wb = b.block(r, c, kSsimWindow, kSsimWindow).array();
      const double ma = wa.sum() / n;
      const double mb = wb.sum() / n;
      const double va = (wa - ma).square().sum() / n;
      const double vb = (wb - mb).square().sum() / n;
      const double cov = ((wa - ma) * (wb - mb)).sum() / n;
      total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++windows;
    }
  }
  return total / static_cast<double>(windows);
}

double total_abs_error(const Matrix& pred, const Matrix& truth) {
  require_same_shape(pred, truth, "total_abs_error");
  return (pred - truth).cwiseAbs().sum();
}

std::pair<double, double> mean_std(std::span<const double> values) {
  if (values.empty()) {
    throw InputError("mean_std: no values");
  }
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() < 2) {
    return {mean, 0.0};
  }
  double ss = 0.0;
  for (double v : values) {
    ss += (v - mean) * (v - mean);
  }
  return {mean, std::sqrt(ss / (n - 1.0))};
}

TaeSummary total_abs_error(std::span<const Matrix> pred, std::span<const Matrix> truth) {
  if (pred.size() != truth.size() || pred.empty()) {
    throw InputError("total_abs_error: trajectory lists are empty or differ in length");
  }
  TaeSummary s;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    s.per_trajectory.push_back(total_abs_error(pred[i], truth[i]));
  }
  std::tie(s.mean, s.std) = mean_std(s.per_trajectory);
  return s;
}

double procrustes_distance(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "procrustes_distance");
  if (a.rows() < 2) {
    throw InputError("procrustes_distance: need at least 2 points");
  }
  Matrix ca = a.rowwise() - a.colwise().mean();
  Matrix cb = b.rowwise() - b.colwise().mean();
  const double na = ca.norm();
  const double nb = cb.norm();
  if (na < 1e-300 || nb < 1e-300) {
    throw InputError("procrustes_distance: shape has zero variance");
  }
  ca /= na;
  cb /= nb;
  Eigen::JacobiSVD<Matrix> svd(ca.transpose() * cb, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Vector s = svd.singularValues();
  const double det = (svd.matrixU() * svd.matrixV().transpose()).determinant();
  if (det < 0.0) {
    s[s.size() - 1] = -s[s.size() - 1];
  }
  const double trace = s.sum();
  return std::clamp(1.0 - trace * trace, 0.0, 1.0);
}

} // namespace conda_dyn
