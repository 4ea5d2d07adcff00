#include "conda_dyn/traversal.hpp"

#include <algorithm>
#include <cmath>

namespace conda_dyn {

namespace {

std::size_t segment_for(const std::vector<double>& knots, double x) {
  if (x <= knots.front()) {
    return 0;
  }
  if (x >= knots.back()) {
    return knots.size() - 2;
  }
  const auto it = std::upper_bound(knots.begin(), knots.end(), x);
  return static_cast<std::size_t>(it - knots.begin()) - 1;
}

} // namespace

// On segment [a_i, a_{i+1}] with h = a_{i+1} - a_i, u = x - a_i, v = a_{i+1} - x:
//   g(x) = (u g_{i+1} + v g_i) / h - (u v / 6) [(1 + u/h) s_{i+1} + (1 + v/h) s_i]
// which is a single cubic in x, so continuing it past the ends is the
// boundary cubic.
Vector SplineCurve::evaluate(double alpha) const {
  const std::size_t i = segment_for(knots, alpha);
  const double h = knots[i + 1] - knots[i];
  const double u = alpha - knots[i];
  const double v = knots[i + 1] - alpha;
  const Vector gi = values.row(i).transpose();
  const Vector gj = values.row(i + 1).transpose();
  const Vector si = second.row(i).transpose();
  const Vector sj = second.row(i + 1).transpose();
  return (u * gj + v * gi) / h - (u * v / 6.0) * ((1.0 + u / h) * sj + (1.0 + v / h) * si);
}

Vector SplineCurve::derivative(double alpha, int order) const {
  const std::size_t i = segment_for(knots, alpha);
  const double h = knots[i + 1] - knots[i];
  const double u = alpha - knots[i];
  const double v = knots[i + 1] - alpha;
  const Vector gi = values.row(i).transpose();
  const Vector gj = values.row(i + 1).transpose();
  const Vector si = second.row(i).transpose();
  const Vector sj = second.row(i + 1).transpose();
  const double wa = v / h;
  const double wb = u / h;
  if (order == 1) {
    return (gj - gi) / h - ((3.0 * wa * wa - 1.0) * h / 6.0) * si + ((3.0 * wb * wb - 1.0) * h / 6.0) * sj;
  }
  if (order == 2) {
    return wa * si + wb * sj;
  }
  throw InputError("SplineCurve::derivative: order must be 1 or 2");
}

SplineCurve fit_spline(std::span<const double> alpha, const Matrix& points, double lambda) {
  const Eigen::Index n = static_cast<Eigen::Index>(alpha.size());
  if (points.rows() != n) {
    throw ShapeError("fit_spline: " + std::to_string(n) + " parameters but " + std::to_string(points.rows()) +
                     " points");
  }
  if (n < 4) {
    throw InputError("fit_spline: need at least 4 points, got " + std::to_string(n));
  }
  if (!(lambda >= 0.0)) {
    throw ConfigError("traversal.lambda: must be non-negative");
  }
  for (Eigen::Index i = 1; i < n; ++i) {
    if (!(alpha[i] > alpha[i - 1])) {
      throw InputError("fit_spline: knot parameters must be strictly increasing (duplicate or unordered at index " +
                       std::to_string(i) + ")");
    }
  }
  // Reinsch form: (R + lambda Q^T Q) s = Q^T y, g = y - lambda Q s.
  const Eigen::Index m = n - 2;
  std::vector<double> h(n - 1);
  for (Eigen::Index i = 0; i + 1 < n; ++i) {
    h[i] = alpha[i + 1] - alpha[i];
  }
  Matrix q = Matrix::Zero(n, m);
  Matrix r = Matrix::Zero(m, m);
  for (Eigen::Index j = 0; j < m; ++j) {
    const Eigen::Index i = j + 1;
    q(i - 1, j) = 1.0 / h[i - 1];
    q(i, j) = -1.0 / h[i - 1] - 1.0 / h[i];
    q(i + 1, j) = 1.0 / h[i];
    r(j, j) = (h[i - 1] + h[i]) / 3.0;
    if (j + 1 < m) {
      r(j, j + 1) = h[i] / 6.0;
      r(j + 1, j) = h[i] / 6.0;
    }
  }
  const Matrix system = r + lambda * q.transpose() * q;
  const Matrix interior = system.ldlt().solve(q.transpose() * points);
  if (!interior.allFinite()) {
    throw NumericError("fit_spline: smoothing system is singular");
  }

  SplineCurve curve;
  curve.knots.assign(alpha.begin(), alpha.end());
  curve.lambda = lambda;
  curve.values = points - lambda * q * interior;
  curve.second = Matrix::Zero(n, points.cols());
  curve.second.middleRows(1, m) = interior;
  return curve;
}

double spline_residual(const SplineCurve& curve, const Matrix& points) {
  double s = 0.0;
  for (std::size_t i = 0; i < curve.knots.size(); ++i) {
    s += (curve.evaluate(curve.knots[i]) - points.row(static_cast<Eigen::Index>(i)).transpose()).squaredNorm();
  }
  return s;
}

TraversalPoint spline_traverse(const SplineCurve& curve, double alpha_s, double delta_alpha) {
  const double target = alpha_s + delta_alpha;
  return {curve.evaluate(target), target < curve.lo() || target > curve.hi()};
}

// ---------------------------------------------------------------------------

TexStencil trailing_stencil(const Matrix& window, double spacing) {
  return {window, spacing, static_cast<int>(window.rows()) - 1, spacing};
}

TexDerivatives tex_derivatives(const TexStencil& st) {
  const Eigen::Index m = st.window.rows();
  if (!(st.spacing > 0.0)) {
    throw InputError("tex: spacing must be positive");
  }
  if (m < 2) {
    throw InputError("tex: window needs at least 2 points, got " + std::to_string(m));
  }
  if (st.anchor < 0 || st.anchor >= m) {
    throw InputError("tex: anchor lies outside the window");
  }
  const double h = st.spacing;
  const auto c = [&](Eigen::Index i) { return Vector(st.window.row(i).transpose()); };
  TexDerivatives d;
  const Eigen::Index k = st.anchor;
  if (m == 2) {
    d.first = (c(1) - c(0)) / h;
    return d;
  }
  if (k > 0 && k < m - 1) {
    d.first = (c(k + 1) - c(k - 1)) / (2.0 * h);
    d.second = (c(k + 1) - 2.0 * c(k) + c(k - 1)) / (h * h);
  } else if (k == m - 1) {
    d.first = (3.0 * c(k) - 4.0 * c(k - 1) + c(k - 2)) / (2.0 * h);
    d.second = (c(k) - 2.0 * c(k - 1) + c(k - 2)) / (h * h);
  } else {
    d.first = (-3.0 * c(0) + 4.0 * c(1) - c(2)) / (2.0 * h);
    d.second = (c(2) - 2.0 * c(1) + c(0)) / (h * h);
  }
  return d;
}

Vector tex_extrapolate(const TexStencil& st, int order) {
  if (order != 1 && order != 2) {
    throw InputError("tex: order must be 1 or 2");
  }
  if (order == 2 && st.window.rows() < 3) {
    throw InputError("tex: second order needs a window of at least 3 points");
  }
  const TexDerivatives d = tex_derivatives(st);
  Vector out = st.window.row(st.anchor).transpose() + d.first * st.step;
  if (order == 2) {
    out += 0.5 * d.second * st.step * st.step;
  }
  return out;
}

Vector lerp(const Eigen::Ref<const Vector>& a, const Eigen::Ref<const Vector>& b, double t) {
  if (a.size() != b.size()) {
    throw ShapeError("lerp: vectors differ in length");
  }
  return (1.0 - t) * a + t * b;
}

Vector slerp(const Eigen::Ref<const Vector>& a, const Eigen::Ref<const Vector>& b, double t) {
  if (a.size() != b.size()) {
    throw ShapeError("slerp: vectors differ in length");
  }
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) {
    throw InputError("slerp: zero vector has no direction");
  }
  const Vector ua = a / na;
  const Vector ub = b / nb;
  const double theta = std::acos(std::clamp(ua.dot(ub), -1.0, 1.0));
  if (theta < 1e-6) {
    return lerp(a, b, t);
  }
  if (M_PI - theta < 1e-6) {
    throw InputError("slerp: antiparallel vectors have no unique shortest arc");
  }
  // Endpoints are returned verbatim; the arc formula is off by rounding there.
  if (t == 0.0) {
    return a;
  }
  if (t == 1.0) {
    return b;
  }
  const double s = std::sin(theta);
  const Vector dir = (std::sin((1.0 - t) * theta) * ua + std::sin(t * theta) * ub) / s;
  return ((1.0 - t) * na + t * nb) * dir;
}

} // namespace conda_dyn
