#include "conda_dyn/metrics.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace conda_dyn;

namespace {

double ssim_oracle(const Matrix& a, const Matrix& b, double range) {
  const double c1 = (0.01 * range) * (0.01 * range);
  const double c2 = (0.03 * range) * (0.03 * range);
  double total = 0.0;
  int count = 0;
  for (int r = 0; r + 8 <= a.rows(); ++r) {
    for (int c = 0; c + 8 <= a.cols(); ++c) {
      double ma = 0, mb = 0;
      for (int i = 0; i < 8; ++i) {
        for (int j = 0; j < 8; ++j) {
          ma += a(r + i, c + j);
          mb += b(r + i, c + j);
        }
      }
      ma /= 64;
      mb /= 64;
      double va = 0, vb = 0, cov = 0;
      for (int i = 0; i < 8; ++i) {
        for (int j = 0; j < 8; ++j) {
          const double da = a(r + i, c + j) - ma;
          const double db = b(r + i, c + j) - mb;
          va += da * da;
          vb += db * db;
          cov += da * db;
        }
      }
      va /= 64;
      vb /= 64;
      cov /= 64;
      total += (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  }
  return total / count;
}

Matrix rotation2(double angle) {
  Matrix r(2, 2);
  r << std::cos(angle), -std::sin(angle), std::sin(angle), std::cos(angle);
  return r;
}

// Best rotation by a 1e-5 grid over the angle.
double procrustes_oracle(const Matrix& a, const Matrix& b) {
  Matrix ca = a.rowwise() - a.colwise().mean();
  Matrix cb = b.rowwise() - b.colwise().mean();
  ca /= ca.norm();
  cb /= cb.norm();
  double best = -1.0;
  for (double t = 0.0; t < 2.0 * M_PI; t += 1e-5) {
    best = std::max(best, (ca.array() * (cb * rotation2(t)).array()).sum());
  }
  return 1.0 - best * best;
}

} // namespace

TEST(Rmse, OraclesAndOffsets) {
  Rng rng(1);
  const Matrix a = rng.normal_matrix(7, 5);
  const Matrix b = rng.normal_matrix(7, 5);
  double s = 0.0;
  for (int i = 0; i < 7; ++i) {
    for (int j = 0; j < 5; ++j) {
      s += (a(i, j) - b(i, j)) * (a(i, j) - b(i, j));
    }
  }
  EXPECT_NEAR(rmse(a, b), std::sqrt(s / 35.0), 1e-12);
  EXPECT_EQ(rmse(a, a), 0.0);
  EXPECT_NEAR(rmse((a.array() + 0.25).matrix(), a), 0.25, 1e-15);
  EXPECT_THROW(rmse(a, Matrix::Zero(6, 5)), InputError);
}

TEST(Psnr, ClosedForms) {
  Rng rng(2);
  const Matrix a = rng.normal_matrix(8, 8);
  EXPECT_EQ(psnr(a, a), 100.0);
  EXPECT_NEAR(psnr(a, (a.array() + 2.0).matrix(), 2.0), 0.0, 1e-12);
  EXPECT_NEAR(psnr(a, (a.array() + 1.0).matrix(), 255.0), 20.0 * std::log10(255.0), 1e-12);
  EXPECT_NEAR(20.0 * std::log10(255.0), 48.13, 5e-3);
  const Matrix b = rng.normal_matrix(8, 8);
  EXPECT_NEAR(psnr(a, b), psnr(b, a), 1e-10);
  EXPECT_THROW(psnr(a, Matrix::Zero(8, 7)), InputError);
  EXPECT_THROW(psnr(a, b, 0.0), InputError);
}

TEST(Ssim, OracleAndIdentity) {
  Rng rng(3);
  const Matrix a = (rng.normal_matrix(16, 16).array() * 0.2 + 0.5).matrix();
  const Matrix b = (rng.normal_matrix(16, 16).array() * 0.2 + 0.5).matrix();
  EXPECT_NEAR(ssim(a, b), ssim_oracle(a, b, 1.0), 1e-10);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-15);
  EXPECT_NEAR(ssim(a, b), ssim(b, a), 1e-10);
  EXPECT_THROW(ssim(Matrix::Zero(7, 16), Matrix::Zero(7, 16)), InputError);
}

TEST(Ssim, NegatedContentIsAnticorrelated) {
  Rng rng(4);
  const Matrix a = (rng.normal_matrix(12, 12).array() * 0.2 + 0.5).matrix();
  const Matrix neg = (1.0 - a.array()).matrix();
  EXPECT_LT(ssim(a, neg), 0.0);
}

TEST(Tae, SumsAndAggregates) {
  Matrix t = Matrix::Zero(5, 3);
  Matrix p = t;
  EXPECT_EQ(total_abs_error(p, t), 0.0);
  p(2, 1) = 1.0;
  EXPECT_EQ(total_abs_error(p, t), 1.0);

  Rng rng(5);
  std::vector<Matrix> pred;
  std::vector<Matrix> truth;
  std::vector<double> oracle;
  for (int k = 0; k < 4; ++k) {
    pred.push_back(rng.normal_matrix(6, 2));
    truth.push_back(rng.normal_matrix(6, 2));
    double s = 0.0;
    for (int i = 0; i < 6; ++i) {
      for (int j = 0; j < 2; ++j) {
        s += std::abs(pred[k](i, j) - truth[k](i, j));
      }
    }
    oracle.push_back(s);
  }
  const TaeSummary sum = total_abs_error(pred, truth);
  double mean = 0.0;
  for (int k = 0; k < 4; ++k) {
    EXPECT_NEAR(sum.per_trajectory[k], oracle[k], 1e-12);
    mean += oracle[k] / 4.0;
  }
  double var = 0.0;
  for (double v : oracle) {
    var += (v - mean) * (v - mean) / 3.0;
  }
  EXPECT_NEAR(sum.mean, mean, 1e-12);
  EXPECT_NEAR(sum.std, std::sqrt(var), 1e-12);
}

TEST(Tae, BoundsRmse) {
  Rng rng(6);
  for (int k = 0; k < 20; ++k) {
    const Matrix a = rng.normal_matrix(9, 4);
    const Matrix b = rng.normal_matrix(9, 4);
    const double r = rmse(a, b);
    EXPECT_LE(r * r * 36.0, (a - b).cwiseAbs().maxCoeff() * total_abs_error(a, b) * (1.0 + 1e-12));
  }
}

TEST(Procrustes, SimilarityInvariance) {
  Rng rng(7);
  const Matrix a = rng.normal_matrix(10, 3);
  EXPECT_NEAR(procrustes_distance(a, a), 0.0, 1e-12);
  const Matrix q = Eigen::HouseholderQR<Matrix>(rng.normal_matrix(3, 3)).householderQ();
  Matrix rot = q;
  if (rot.determinant() < 0) {
    rot.col(0) *= -1.0;
  }
  const Matrix moved = (2.5 * a * rot).rowwise() + Eigen::RowVector3d(1.0, -3.0, 0.5);
  EXPECT_NEAR(procrustes_distance(a, moved), 0.0, 1e-10);

  const Matrix b = rng.normal_matrix(10, 3);
  const double base = procrustes_distance(a, b);
  EXPECT_NEAR(procrustes_distance(b, a), base, 1e-10);
  EXPECT_NEAR(procrustes_distance(moved, b), base, 1e-10);
  EXPECT_GE(base, 0.0);
  EXPECT_LE(base, 1.0);
}

TEST(Procrustes, ReflectionIsNotAligned) {
  Matrix a(4, 2);
  a << 0, 0, 2, 0, 0, 1, 1, 3;
  Matrix mirrored = a;
  mirrored.col(0) *= -1.0;
  EXPECT_GT(procrustes_distance(a, mirrored), 1e-3);
}

TEST(Procrustes, MatchesAngleGridOracle) {
  Matrix a(5, 2);
  a << 0.0, 0.0, 1.0, 0.2, 1.4, 1.1, 0.3, 1.7, -0.6, 0.8;
  Matrix b(5, 2);
  b << 0.1, -0.3, 1.2, 0.0, 1.1, 1.3, 0.0, 1.4, -0.4, 0.4;
  EXPECT_NEAR(procrustes_distance(a, b), procrustes_oracle(a, b), 1e-8);
}

TEST(Procrustes, InputChecks) {
  EXPECT_THROW(procrustes_distance(Matrix::Ones(3, 2), Matrix::Random(3, 2)), InputError);
  EXPECT_THROW(procrustes_distance(Matrix::Random(1, 2), Matrix::Random(1, 2)), InputError);
  EXPECT_THROW(procrustes_distance(Matrix::Random(3, 2), Matrix::Random(4, 2)), InputError);
}

TEST(MeanStd, SampleStandardDeviation) {
  const std::vector<double> v{1.0, 2.0, 4.0};
  const auto [m, s] = mean_std(v);
  EXPECT_NEAR(m, 7.0 / 3.0, 1e-15);
  EXPECT_NEAR(s, std::sqrt(((1 - m) * (1 - m) + (2 - m) * (2 - m) + (4 - m) * (4 - m)) / 2.0), 1e-15);
  const std::vector<double> one{3.0};
  EXPECT_EQ(mean_std(one).second, 0.0);
}
