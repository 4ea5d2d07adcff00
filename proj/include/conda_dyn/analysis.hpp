#pragma once

#include "conda_dyn/numcore.hpp"

#include <span>
#include <string>
#include <vector>

namespace conda_dyn {

// PCA --------------------------------------------------------------------

struct PcaModel {
  Vector mean;
  Matrix components;  // ambient x d, orthonormal columns
  Vector variances;   // descending
  /// Non-empty when trailing components carry (numerically) zero variance.
  std::string warning;
};

/// Top-d eigenvectors of the sample covariance of the rows of `data`.
PcaModel fit_pca(const Matrix& data, int d);
Matrix pca_project(const PcaModel& model, const Matrix& data);
Matrix pca_reconstruct(const PcaModel& model, const Matrix& codes);

// SVM --------------------------------------------------------------------

enum class SvmKernel { linear, rbf };
std::string to_string(SvmKernel k);
SvmKernel svm_kernel_from_string(const std::string& s);

struct SvmConfig {
  SvmKernel kernel = SvmKernel::linear;
  /// RBF width; <= 0 means 1 / (feature count) on standardised features.
  double gamma = 0.0;
  double lambda = 1e-3;
  long steps = 100000;
  std::uint64_t seed = 0;
};

/// Binary soft-margin SVM trained by stochastic subgradient steps on the
/// hinge objective. Labels are 0/1; class 1 is the positive class.
struct SvmModel {
  SvmKernel kernel = SvmKernel::linear;
  double gamma = 1.0;
  double lambda = 1e-3;
  Vector offset;  // feature standardisation
  Vector scale;
  Vector weights;  // linear
  Matrix support;  // rbf: standardised training points
  Vector coef;     // rbf: signed coefficient per training point
  double bias = 0.0;
};

SvmModel train_svm(const Matrix& points, std::span<const int> labels, const SvmConfig& config);
/// Signed decision values, one per row.
Vector svm_decision(const SvmModel& model, const Matrix& points);
std::vector<int> svm_predict(const SvmModel& model, const Matrix& points);

struct ClassifierScore {
  double accuracy = 0.0;
  double f1 = 0.0;
  double auc = 0.0;
};

/// Accuracy and F1 threshold the decision at 0; ROC-AUC is the rank
/// statistic with midranks for ties.
ClassifierScore svm_score(std::span<const double> decision, std::span<const int> labels);
double roc_auc(std::span<const double> score, std::span<const int> labels);

// KDE --------------------------------------------------------------------

/// Regular grid: count[k] nodes per axis starting at lo[k] with spacing step[k].
struct KdeGrid {
  Vector lo;
  Vector step;
  std::vector<int> count;

  std::size_t size() const;
  Vector node(std::size_t flat) const;
};

/// Axis-aligned grid around both point sets with the given margin and at
/// most `spacing` between nodes.
KdeGrid kde_auto_grid(const Matrix& class0, const Matrix& class1, double bandwidth, double margin_bandwidths = 3.0,
                      int max_nodes_per_axis = 64);

/// Scott's rule on the pooled samples: n^(-1/(d+4)) times the mean per-axis
/// standard deviation.
double scott_bandwidth(const Matrix& class0, const Matrix& class1);

struct KdeModel {
  Matrix class0;
  Matrix class1;
  double bandwidth = 0.0;
  KdeGrid grid;
  Vector density0;
  Vector density1;
  Vector delta;  // density1 - density0
  Vector peak0;  // argmax of -delta
  Vector peak1;  // argmax of delta
  bool degenerate = false;
};

double kde_density(const Matrix& samples, double bandwidth, const Eigen::Ref<const Vector>& u);

/// Fits both class densities on `grid`. Needs d <= 3, spacing <= h on every
/// axis and a margin of at least 2h around every sample.
KdeModel kde_fit(const Matrix& class0, const Matrix& class1, double bandwidth, const KdeGrid& grid);
/// Bandwidth by Scott's rule (when <= 0) and an automatic grid.
KdeModel kde_fit(const Matrix& class0, const Matrix& class1, double bandwidth = 0.0);

/// m_class0 + eta (m_class1 - m_class0) for eta in [0, 1].
Vector kde_traverse(const KdeModel& model, double eta);

// Orthogonality probe ----------------------------------------------------

struct ProbeResult {
  double cosine = 0.0;
  Vector beta_tau;
  Vector beta_mu;
  /// Set when the design matrix was singular and a ridge of 1e-8 was added.
  bool regularized = false;
};

/// Fits tau ~ 1 + C and mu ~ 1 + C by least squares and reports
/// |cos(beta_tau, beta_mu)| over the slope coefficients.
ProbeResult orthogonality_probe(const Matrix& embeddings, std::span<const double> taus, std::span<const double> mus);

} // namespace conda_dyn
