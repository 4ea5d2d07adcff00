#include "conda_dyn/traversal.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace conda_dyn;

namespace {

std::vector<double> grid(int n, double lo = 0.0, double hi = 1.0) {
  std::vector<double> a(n);
  for (int i = 0; i < n; ++i) {
    a[i] = lo + (hi - lo) * i / (n - 1);
  }
  return a;
}

Matrix sample(const std::vector<double>& a, const std::function<Vector(double)>& f) {
  Matrix m(static_cast<Eigen::Index>(a.size()), f(a[0]).size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    m.row(static_cast<Eigen::Index>(i)) = f(a[i]).transpose();
  }
  return m;
}

// Dense solve of the penalised least-squares problem over knot values:
// min ||g - y||^2 + lambda g^T K g with K = Q R^-1 Q^T (natural cubic spline).
Vector smoothing_oracle(const std::vector<double>& x, const Vector& y, double lambda) {
  const int n = static_cast<int>(x.size());
  Matrix q = Matrix::Zero(n, n - 2);
  Matrix r = Matrix::Zero(n - 2, n - 2);
  for (int j = 1; j < n - 1; ++j) {
    const double h0 = x[j] - x[j - 1];
    const double h1 = x[j + 1] - x[j];
    q(j - 1, j - 1) = 1.0 / h0;
    q(j, j - 1) = -1.0 / h0 - 1.0 / h1;
    q(j + 1, j - 1) = 1.0 / h1;
    r(j - 1, j - 1) = (h0 + h1) / 3.0;
    if (j < n - 2) {
      r(j - 1, j) = h1 / 6.0;
      r(j, j - 1) = h1 / 6.0;
    }
  }
  const Matrix k = q * r.inverse() * q.transpose();
  return (Matrix::Identity(n, n) + lambda * k).ldlt().solve(y);
}

} // namespace

TEST(Spline, InterpolatesAtZeroLambda) {
  Rng rng(1);
  const auto a = grid(12);
  const Matrix pts = rng.normal_matrix(12, 3);
  const SplineCurve curve = fit_spline(a, pts, 0.0);
  for (int i = 0; i < 12; ++i) {
    EXPECT_LE((curve.evaluate(a[i]) - pts.row(i).transpose()).cwiseAbs().maxCoeff(), 1e-8);
  }
  EXPECT_LE(spline_residual(curve, pts), 1e-16);
  EXPECT_EQ(curve.second.row(0).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(curve.second.row(11).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Spline, LinesAreReproducedForAnyLambda) {
  const auto a = grid(9, -1.0, 2.0);
  const Matrix pts = sample(a, [](double s) { return Vector{{1.0 + 2.0 * s, -0.5 * s}}; });
  for (double lambda : {0.0, 1e-3, 1.0, 100.0}) {
    const SplineCurve curve = fit_spline(a, pts, lambda);
    for (double s : {-1.0, -0.3, 0.55, 1.9}) {
      EXPECT_LE((curve.evaluate(s) - Vector{{1.0 + 2.0 * s, -0.5 * s}}).cwiseAbs().maxCoeff(), 1e-8);
    }
  }
}

TEST(Spline, QuadraticMidpoint) {
  const auto a = grid(40);
  const auto f = [](double s) { return Vector{{3.0 * s * s - s + 0.25}}; };
  const SplineCurve curve = fit_spline(a, sample(a, f), 0.0);
  const double mid = 0.5 * (a[19] + a[20]);
  EXPECT_NEAR(curve.evaluate(mid)(0), f(mid)(0), 1e-6);
}

TEST(Spline, KnotValuesMatchDenseOracle) {
  Rng rng(2);
  std::vector<double> a{0.0, 0.1, 0.35, 0.4, 0.7, 0.75, 1.0, 1.3};
  const Matrix pts = rng.normal_matrix(8, 2);
  for (double lambda : {1e-4, 1e-2, 1.0}) {
    const SplineCurve curve = fit_spline(a, pts, lambda);
    for (int d = 0; d < 2; ++d) {
      const Vector oracle = smoothing_oracle(a, pts.col(d), lambda);
      for (int i = 0; i < 8; ++i) {
        EXPECT_NEAR(curve.evaluate(a[i])(d), oracle(i), 1e-9);
      }
    }
  }
}

TEST(Spline, ResidualGrowsWithLambda) {
  Rng rng(3);
  const auto a = grid(20);
  const Matrix pts = rng.normal_matrix(20, 4);
  double prev = -1.0;
  for (double lambda : {0.0, 1e-6, 1e-4, 1e-2, 1.0, 100.0}) {
    const double r = spline_residual(fit_spline(a, pts, lambda), pts);
    EXPECT_GE(r, prev - 1e-12);
    prev = r;
  }
}

TEST(Spline, C2ContinuityAtKnots) {
  Rng rng(4);
  const auto a = grid(10);
  const SplineCurve curve = fit_spline(a, rng.normal_matrix(10, 2), 1e-3);
  for (int i = 1; i < 9; ++i) {
    for (int order : {1, 2}) {
      const Vector left = curve.derivative(a[i] - 1e-9, order);
      const Vector right = curve.derivative(a[i] + 1e-9, order);
      EXPECT_LE((left - right).cwiseAbs().maxCoeff(), 1e-5);
    }
  }
}

TEST(Spline, RejectsBadKnots) {
  const Matrix pts = Matrix::Zero(4, 1);
  std::vector<double> dup{0.0, 0.5, 0.5, 1.0};
  EXPECT_THROW(fit_spline(dup, pts, 0.0), InputError);
  std::vector<double> three{0.0, 0.5, 1.0};
  EXPECT_THROW(fit_spline(three, Matrix::Zero(3, 1), 0.0), InputError);
  EXPECT_THROW(fit_spline(grid(4), pts, -1.0), ConfigError);
}

TEST(Spline, TraverseSemantics) {
  const auto a = grid(8);
  const Matrix pts = sample(a, [](double s) { return Vector{{s, std::sin(s)}}; });
  const SplineCurve curve = fit_spline(a, pts, 0.0);
  EXPECT_EQ(spline_traverse(curve, a[3], 0.0).c, curve.evaluate(a[3]));
  EXPECT_LE((spline_traverse(curve, a[3], a[4] - a[3]).c - pts.row(4).transpose()).norm(), 1e-8);
  const auto back = spline_traverse(curve, a[3], -0.05);
  EXPECT_LT(back.c(0), pts(3, 0));
  EXPECT_FALSE(back.extrapolated);
  EXPECT_TRUE(spline_traverse(curve, a[7], 0.1).extrapolated);
}

TEST(Tex, LinearExactFirstOrder) {
  const Matrix w = sample(grid(4, 0.0, 0.3), [](double s) { return Vector{{1.0 + 2.0 * s, -3.0 * s}}; });
  const Vector pred = tex_extrapolate(trailing_stencil(w, 0.1), 1);
  EXPECT_LE((pred - Vector{{1.0 + 2.0 * 0.4, -3.0 * 0.4}}).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LE((tex_extrapolate(trailing_stencil(w.bottomRows(2), 0.1), 1) - pred).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Tex, QuadraticExactSecondOrder) {
  const auto f = [](double s) { return Vector{{2.0 * s * s - s + 1.0, -0.5 * s * s}}; };
  const Matrix w = sample(grid(3, 1.0, 1.4), f);
  EXPECT_LE((tex_extrapolate(trailing_stencil(w, 0.2), 2) - f(1.6)).cwiseAbs().maxCoeff(), 1e-10);
  TexStencil central{w, 0.2, 1, 0.35};
  EXPECT_LE((tex_extrapolate(central, 2) - f(1.55)).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Tex, CubicRemainder) {
  // Exact derivatives of s^3 at 0 vanish, so the Taylor remainder is |ds|^3.
  // The trailing stencil extrapolates the quadratic through the last three
  // samples instead, which misses by c''' ds^3 = 6.
  const auto f = [](double s) { return Vector{{s * s * s}}; };
  const Matrix w = sample({-2.0, -1.0, 0.0}, f);
  EXPECT_NEAR(std::abs(tex_extrapolate(trailing_stencil(w, 1.0), 2)(0) - f(1.0)(0)), 6.0, 1e-12);
  TexStencil central{sample({-1.0, 0.0, 1.0}, f), 1.0, 1, 1.0};
  EXPECT_NEAR(tex_extrapolate(central, 2)(0), f(1.0)(0), 1e-12);
}

TEST(Tex, SecondOrderBeatsFirstOnSmoothCurves) {
  double e1 = 0.0;
  double e2 = 0.0;
  for (int k = 0; k < 20; ++k) {
    const double w0 = 1.0 + 0.2 * k;
    const auto f = [w0](double s) { return Vector{{std::cos(w0 * s), std::sin(w0 * s)}}; };
    const auto a = grid(5, 0.0, 0.4);
    const Matrix w = sample(a, f);
    const TexStencil st = trailing_stencil(w, 0.1);
    e1 += (tex_extrapolate(st, 1) - f(0.5)).squaredNorm();
    e2 += (tex_extrapolate(st, 2) - f(0.5)).squaredNorm();
  }
  EXPECT_LT(e2, e1);
}

TEST(Tex, WindowChecks) {
  EXPECT_THROW(tex_extrapolate(trailing_stencil(Matrix::Zero(1, 2), 1.0), 1), InputError);
  EXPECT_THROW(tex_extrapolate(trailing_stencil(Matrix::Zero(2, 2), 1.0), 2), InputError);
  EXPECT_THROW(tex_extrapolate(trailing_stencil(Matrix::Zero(3, 2), 0.0), 1), InputError);
  EXPECT_THROW(tex_extrapolate(trailing_stencil(Matrix::Zero(3, 2), 1.0), 3), InputError);
}

TEST(Interpolation, EndpointsExact) {
  Rng rng(5);
  for (int i = 0; i < 20; ++i) {
    const Vector a = rng.normal_matrix(6, 1);
    const Vector b = rng.normal_matrix(6, 1);
    EXPECT_EQ(lerp(a, b, 0.0), a);
    EXPECT_EQ(lerp(a, b, 1.0), b);
    EXPECT_EQ(slerp(a, b, 0.0), a);
    EXPECT_EQ(slerp(a, b, 1.0), b);
  }
}

TEST(Interpolation, SlerpGeometry) {
  const Vector a{{1.0, 0.0, 0.0}};
  const Vector b{{0.0, 1.0, 0.0}};
  EXPECT_LE((slerp(a, b, 0.5) - (a + b) / std::sqrt(2.0)).norm(), 1e-15);
  // Radius interpolates linearly, direction along the arc.
  const Vector s = slerp(2.0 * a, 4.0 * b, 0.25);
  EXPECT_NEAR(s.norm(), 2.5, 1e-14);
  EXPECT_NEAR(std::atan2(s(1), s(0)), M_PI / 8.0, 1e-14);
  EXPECT_LE((slerp(a, 2.0 * a, 0.5) - 1.5 * a).norm(), 1e-15);
  EXPECT_THROW(slerp(a, -a, 0.5), InputError);
  EXPECT_THROW(slerp(Vector::Zero(3), b, 0.5), InputError);
  EXPECT_THROW(lerp(a, Vector::Zero(2), 0.5), ShapeError);
}

TEST(Recurrent, LossGradient) {
  Rng rng(6);
  RecurrentPredictor model({3, 8}, rng);
  std::vector<Matrix> seqs{Rng(7).normal_matrix(6, 3), Rng(8).normal_matrix(6, 3)};
  model.set_standardization(Vector::Constant(3, 0.1), Vector::Constant(3, 1.5));
  auto loss = [&](const Params& p, Grads* g) {
    RecurrentPredictor local = model;
    local.params() = p;
    return recurrent_loss(local, seqs, g);
  };
  EXPECT_LE(grad_check(loss, model.params()), 1e-4);
}

TEST(Recurrent, LearnsConstantSequences) {
  Rng rng(9);
  RecurrentPredictor model({2, 16}, rng);
  std::vector<Matrix> seqs;
  for (int i = 0; i < 8; ++i) {
    Matrix s(10, 2);
    s.col(0).setConstant(0.5 + 0.1 * i);
    s.col(1).setConstant(-1.0 + 0.2 * i);
    seqs.push_back(s);
  }
  RecurrentTrainConfig cfg;
  cfg.epochs = 150;
  cfg.batch = 4;
  train_recurrent(model, seqs, cfg);
  const Matrix roll = model.rollout(seqs[3].topRows(3), 5);
  ASSERT_EQ(roll.rows(), 5);
  for (Eigen::Index r = 0; r < roll.rows(); ++r) {
    EXPECT_LE((roll.row(r) - seqs[3].row(0)).cwiseAbs().maxCoeff(), 5e-2);
  }
}

TEST(Recurrent, ZeroLearningRateKeepsParameters) {
  Rng rng(10);
  RecurrentPredictor model({2, 8}, rng);
  const Params before = model.params();
  std::vector<Matrix> seqs{Rng(11).normal_matrix(5, 2), Rng(12).normal_matrix(5, 2)};
  RecurrentTrainConfig cfg;
  cfg.epochs = 3;
  cfg.adam.lr = 0.0;
  train_recurrent(model, seqs, cfg);
  for (std::size_t i = 0; i < before.size(); ++i) {
    EXPECT_EQ(model.params()[i].value, before[i].value);
  }
}

TEST(Recurrent, FillReplacesOnlyMissingRows) {
  Rng rng(13);
  RecurrentPredictor model({2, 8}, rng);
  const Matrix seq = Rng(14).normal_matrix(6, 2);
  const bool missing[6] = {false, false, true, false, true, false};
  const Matrix filled = model.fill(seq, std::span<const bool>(missing, 6));
  for (int i = 0; i < 6; ++i) {
    if (!missing[i]) {
      EXPECT_EQ(filled.row(i), seq.row(i));
    } else {
      EXPECT_NE(filled.row(i), seq.row(i));
    }
  }
}
