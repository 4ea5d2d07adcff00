#include "conda_dyn/analysis.hpp"

#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>

#include <cmath>

using namespace conda_dyn;

namespace {

struct Labeled {
  Matrix points;
  std::vector<int> labels;
};

Labeled two_clusters(Rng& rng, int per_class, double separation, int dim = 2) {
  Labeled out;
  out.points.resize(2 * per_class, dim);
  for (int i = 0; i < 2 * per_class; ++i) {
    const int label = i % 2;
    out.points.row(i) = rng.normal_matrix(1, dim);
    out.points(i, 0) += label == 1 ? separation / 2 : -separation / 2;
    out.labels.push_back(label);
  }
  return out;
}

// Mann-Whitney count over all positive/negative pairs, ties counted half.
double pairwise_auc(const Vector& s, const std::vector<int>& y) {
  double wins = 0.0;
  double pairs = 0.0;
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    for (Eigen::Index j = 0; j < s.size(); ++j) {
      if (y[i] == 1 && y[j] == 0) {
        wins += s(i) > s(j) ? 1.0 : (s(i) == s(j) ? 0.5 : 0.0);
        pairs += 1.0;
      }
    }
  }
  return wins / pairs;
}

} // namespace

TEST(Pca, LineDataAlignsFirstComponent) {
  Rng rng(1);
  Vector dir(4);
  dir << 1.0, -2.0, 0.5, 3.0;
  dir.normalize();
  Matrix data(30, 4);
  for (int i = 0; i < 30; ++i) {
    data.row(i) = (rng.normal() * 3.0) * dir.transpose() + Eigen::RowVectorXd::Constant(4, 1.5);
  }
  const PcaModel m = fit_pca(data, 2);
  EXPECT_GE(std::abs(m.components.col(0).dot(dir)), 1.0 - 1e-8);
  EXPECT_FALSE(m.warning.empty());
}

TEST(Pca, FullRankReconstructsExactly) {
  Rng rng(2);
  const Matrix data = rng.normal_matrix(20, 5);
  const PcaModel m = fit_pca(data, 5);
  EXPECT_LE((pca_reconstruct(m, pca_project(m, data)) - data).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Pca, VariancesMatchDenseEigensolve) {
  Rng rng(3);
  const Matrix data = rng.normal_matrix(50, 6) * rng.normal_matrix(6, 6);
  const Matrix centered = data.rowwise() - data.colwise().mean();
  const Matrix cov = centered.transpose() * centered / 49.0;
  Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
  const Vector ref = es.eigenvalues().reverse();
  const PcaModel m = fit_pca(data, 6);
  for (int k = 0; k < 6; ++k) {
    EXPECT_NEAR(m.variances(k), ref(k), 1e-8 * ref(0));
  }
  EXPECT_LE((m.components.transpose() * m.components - Matrix::Identity(6, 6)).norm(), 1e-10);
}

TEST(Pca, ReconstructionErrorFallsWithDimension) {
  Rng rng(4);
  const Matrix data = rng.normal_matrix(40, 6) * rng.normal_matrix(6, 6);
  double prev = std::numeric_limits<double>::infinity();
  for (int d = 1; d <= 6; ++d) {
    const PcaModel m = fit_pca(data, d);
    const double err = (pca_reconstruct(m, pca_project(m, data)) - data).squaredNorm();
    EXPECT_LE(err, prev + 1e-9);
    prev = err;
  }
  EXPECT_THROW(fit_pca(data.topRows(3), 3), InputError);
}

TEST(Svm, SeparableClustersClassifiedPerfectly) {
  for (SvmKernel kernel : {SvmKernel::linear, SvmKernel::rbf}) {
    Rng rng(5);
    const Labeled train = two_clusters(rng, 60, 8.0);
    const Labeled test = two_clusters(rng, 40, 8.0);
    SvmConfig cfg;
    cfg.kernel = kernel;
    cfg.steps = 20000;
    const SvmModel m = train_svm(train.points, train.labels, cfg);
    const Vector dec = svm_decision(m, test.points);
    const ClassifierScore s = svm_score(std::span(dec.data(), dec.size()), test.labels);
    EXPECT_EQ(s.accuracy, 1.0) << to_string(kernel);
    EXPECT_EQ(s.auc, 1.0);
    EXPECT_EQ(s.f1, 1.0);
  }
}

TEST(Svm, FlippedLabelsMirrorScores) {
  Rng rng(6);
  const Labeled d = two_clusters(rng, 50, 1.0);
  const Vector s = rng.normal_matrix(100, 1) + Matrix(d.points.col(0));
  std::vector<int> flipped;
  for (int l : d.labels) {
    flipped.push_back(1 - l);
  }
  const std::span<const double> sp(s.data(), s.size());
  const double auc = roc_auc(sp, d.labels);
  EXPECT_NEAR(roc_auc(sp, flipped), 1.0 - auc, 1e-15);
  EXPECT_NEAR(auc, pairwise_auc(s, d.labels), 1e-15);
  const ClassifierScore a = svm_score(sp, d.labels);
  const ClassifierScore b = svm_score(sp, flipped);
  EXPECT_NEAR(a.accuracy + b.accuracy, 1.0, 1e-15);
  EXPECT_NE(a.f1, b.f1);
}

TEST(Svm, AucHandlesTiesWithMidranks) {
  const std::vector<double> s{0.0, 0.0, 1.0, 1.0, 2.0};
  const std::vector<int> y{0, 1, 0, 1, 1};
  Vector sv(5);
  sv << 0.0, 0.0, 1.0, 1.0, 2.0;
  EXPECT_NEAR(roc_auc(s, y), pairwise_auc(sv, y), 1e-15);
}

TEST(Svm, RbfNarrowKernelIsLocal) {
  Rng rng(7);
  const Labeled d = two_clusters(rng, 10, 0.5);
  SvmConfig cfg;
  cfg.kernel = SvmKernel::rbf;
  cfg.gamma = 1e4;
  cfg.steps = 5000;
  const SvmModel m = train_svm(d.points, d.labels, cfg);
  const Vector dec = svm_decision(m, d.points);
  for (int i = 0; i < d.points.rows(); ++i) {
    EXPECT_NEAR(dec(i), m.coef(i) + m.bias, 1e-8 * (1.0 + std::abs(dec(i))));
  }
}

TEST(Svm, StableUnderDuplicatedPoint) {
  Rng rng(8);
  const Labeled d = two_clusters(rng, 80, 2.5);
  const Labeled probe = two_clusters(rng, 100, 2.5);
  SvmConfig cfg;
  cfg.kernel = SvmKernel::rbf;
  cfg.steps = 20000;
  const auto a = svm_predict(train_svm(d.points, d.labels, cfg), probe.points);
  Matrix more(d.points.rows() + 1, d.points.cols());
  more << d.points, d.points.row(3);
  std::vector<int> labels = d.labels;
  labels.push_back(d.labels[3]);
  const auto b = svm_predict(train_svm(more, labels, cfg), probe.points);
  int agree = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    agree += a[i] == b[i];
  }
  EXPECT_GE(agree, static_cast<int>(0.95 * a.size()));
}

TEST(Svm, InputChecks) {
  const Matrix p = Matrix::Zero(4, 2);
  const std::vector<int> one{1, 1, 1, 1};
  EXPECT_THROW(train_svm(p, one, {}), InputError);
  const std::vector<int> bad{0, 1, 2, 1};
  EXPECT_THROW(train_svm(p, bad, {}), InputError);
}

TEST(Kde, SingleSamplesPeakAtNearestNodes) {
  Matrix a(1, 2);
  a << -2.0, 1.0;
  Matrix b(1, 2);
  b << 3.0, -1.5;
  const double h = 0.5;
  const KdeModel m = kde_fit(a, b, h, kde_auto_grid(a, b, h));
  for (int k = 0; k < 2; ++k) {
    EXPECT_LE(std::abs(m.peak0(k) - a(0, k)), 0.5 * m.grid.step(k) + 1e-12);
    EXPECT_LE(std::abs(m.peak1(k) - b(0, k)), 0.5 * m.grid.step(k) + 1e-12);
  }
  EXPECT_FALSE(m.degenerate);
}

TEST(Kde, IdenticalClassesAreDegenerate) {
  Rng rng(9);
  const Matrix a = rng.normal_matrix(20, 2);
  const KdeModel m = kde_fit(a, a, 0.0);
  EXPECT_TRUE(m.degenerate);
  EXPECT_LE(m.delta.cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_THROW(kde_traverse(m, 0.5), InputError);
}

TEST(Kde, GaussianCloudPeaksNearMeans) {
  Rng rng(10);
  Matrix a = 0.3 * rng.normal_matrix(400, 2);
  Matrix b = 0.3 * rng.normal_matrix(400, 2);
  a.rowwise() += Eigen::RowVector2d(-2.0, 0.5);
  b.rowwise() += Eigen::RowVector2d(1.5, -1.0);
  const KdeModel m = kde_fit(a, b, 0.0);
  EXPECT_LE((m.peak0 - Eigen::Vector2d(-2.0, 0.5)).cwiseAbs().maxCoeff(), m.grid.step.maxCoeff() + 0.05);
  EXPECT_LE((m.peak1 - Eigen::Vector2d(1.5, -1.0)).cwiseAbs().maxCoeff(), m.grid.step.maxCoeff() + 0.05);
}

TEST(Kde, DensitiesIntegrateToOneAndAreNonNegative) {
  Rng rng(11);
  const Matrix a = rng.normal_matrix(30, 2);
  const Matrix b = rng.normal_matrix(30, 2).array() + 2.0;
  const double h = 0.4;
  const KdeModel m = kde_fit(a, b, h, kde_auto_grid(a, b, h, 5.0, 200));
  const double cell = m.grid.step(0) * m.grid.step(1);
  EXPECT_NEAR(m.density0.sum() * cell, 1.0, 0.02);
  EXPECT_NEAR(m.density1.sum() * cell, 1.0, 0.02);
  EXPECT_GE(m.density0.minCoeff(), 0.0);
  EXPECT_GE(m.density1.minCoeff(), 0.0);
}

TEST(Kde, DensityMatchesClosedForm) {
  Matrix s(2, 1);
  s << 0.0, 1.0;
  const double h = 0.5;
  const double u = 0.3;
  const double ref = 0.5 * (std::exp(-u * u / (2 * h * h)) + std::exp(-(u - 1) * (u - 1) / (2 * h * h))) /
                     (std::sqrt(2 * M_PI) * h);
  EXPECT_NEAR(kde_density(s, h, Vector::Constant(1, u)), ref, 1e-15);
}

TEST(Kde, SwappingClassesNegatesDelta) {
  Rng rng(12);
  const Matrix a = rng.normal_matrix(25, 3);
  const Matrix b = rng.normal_matrix(25, 3).array() + 1.0;
  const double h = 0.6;
  const KdeGrid g = kde_auto_grid(a, b, h, 3.0, 24);
  const KdeModel ab = kde_fit(a, b, h, g);
  const KdeModel ba = kde_fit(b, a, h, g);
  EXPECT_EQ(ab.delta, -ba.delta);
  EXPECT_EQ(ab.peak0, ba.peak1);
  EXPECT_EQ(ab.peak1, ba.peak0);
  for (double eta : {0.0, 0.3, 0.5, 1.0}) {
    // 1 - (1 - eta) differs from eta by rounding for most eta.
    EXPECT_LE((kde_traverse(ab, eta) - kde_traverse(ba, 1.0 - eta)).cwiseAbs().maxCoeff(), 1e-14);
  }
}

TEST(Kde, TraverseEndpointsAndRange) {
  Rng rng(13);
  const Matrix a = rng.normal_matrix(15, 2);
  const Matrix b = rng.normal_matrix(15, 2).array() + 3.0;
  const KdeModel m = kde_fit(a, b, 0.0);
  EXPECT_EQ(kde_traverse(m, 0.0), m.peak0);
  EXPECT_EQ(kde_traverse(m, 1.0), m.peak1);
  EXPECT_LE((kde_traverse(m, 0.5) - 0.5 * (m.peak0 + m.peak1)).norm(), 1e-15);
  EXPECT_THROW(kde_traverse(m, 1.1), InputError);
  EXPECT_THROW(kde_traverse(m, -0.1), InputError);
}

TEST(Kde, GridChecks) {
  Matrix a(1, 1);
  a << 0.0;
  Matrix b(1, 1);
  b << 1.0;
  KdeGrid coarse{Vector::Constant(1, -5.0), Vector::Constant(1, 2.0), {6}};
  EXPECT_THROW(kde_fit(a, b, 0.5, coarse), ConfigError);
  KdeGrid tight{Vector::Constant(1, -0.5), Vector::Constant(1, 0.25), {9}};
  EXPECT_THROW(kde_fit(a, b, 0.5, tight), ConfigError);
  EXPECT_THROW(kde_fit(Matrix::Zero(2, 4), Matrix::Ones(2, 4), 0.5), ConfigError);
}

TEST(Probe, OrthogonalCoordinates) {
  Rng rng(14);
  const int n = 200;
  Matrix c(n, 3);
  std::vector<double> tau(n);
  std::vector<double> mu(n);
  for (int i = 0; i < n; ++i) {
    tau[i] = rng.uniform();
    mu[i] = rng.uniform(0.5, 1.5);
    c.row(i) << tau[i], mu[i], rng.normal();
  }
  const ProbeResult r = orthogonality_probe(c, tau, mu);
  EXPECT_LE(r.cosine, 1e-6);
  EXPECT_FALSE(r.regularized);
}

TEST(Probe, CollinearCoefficients) {
  Rng rng(15);
  const int n = 50;
  Matrix c(n, 2);
  std::vector<double> tau(n);
  std::vector<double> mu(n);
  for (int i = 0; i < n; ++i) {
    tau[i] = rng.uniform();
    mu[i] = rng.uniform();
    c.row(i) << tau[i] + mu[i], tau[i] + mu[i];
  }
  const ProbeResult r = orthogonality_probe(c, tau, mu);
  EXPECT_NEAR(r.cosine, 1.0, 1e-8);
  EXPECT_TRUE(r.regularized);
}

TEST(Probe, InputChecks) {
  const std::vector<double> t{0.0, 1.0, 2.0};
  const std::vector<double> same{1.0, 1.0, 1.0};
  EXPECT_THROW(orthogonality_probe(Matrix::Zero(3, 2), t, t), InputError);
  EXPECT_THROW(orthogonality_probe(Matrix::Zero(3, 1), t, same), InputError);
}
