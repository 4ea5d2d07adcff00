#pragma once

#include "conda_dyn/numcore.hpp"

#include <span>
#include <vector>

namespace conda_dyn {

// Editing operators. Every operator is dimension-generic and acts the same on
// diffusion latents and on contrastive embeddings.

/// Per-coordinate natural cubic smoothing spline. Stores the fitted knot
/// values and their second derivatives (zero at both ends).
struct SplineCurve {
  std::vector<double> knots;
  Matrix values;  // knots x dim
  Matrix second;  // knots x dim
  double lambda = 0.0;

  int dim() const { return static_cast<int>(values.cols()); }
  double lo() const { return knots.front(); }
  double hi() const { return knots.back(); }
  /// Evaluates gamma(alpha); outside [lo, hi] the boundary cubic is continued.
  Vector evaluate(double alpha) const;
  /// d^k gamma / d alpha^k for k in {1, 2}.
  Vector derivative(double alpha, int order) const;
};

/// Minimises sum_s ||gamma(alpha_s) - c_s||^2 + lambda * int ||gamma''||^2 for
/// rows of `points` at strictly increasing `alpha`. Needs at least 4 points.
SplineCurve fit_spline(std::span<const double> alpha, const Matrix& points, double lambda);

/// Squared residual sum_s ||gamma(alpha_s) - c_s||^2 at the fitted knots.
double spline_residual(const SplineCurve& curve, const Matrix& points);

struct TraversalPoint {
  Vector c;
  bool extrapolated = false;
};

/// gamma(alpha_s + delta_alpha).
TraversalPoint spline_traverse(const SplineCurve& curve, double alpha_s, double delta_alpha);

/// Consecutive samples c_0..c_{m-1} at spacing h; derivatives are estimated
/// at `anchor` and the Taylor step has length `step`.
struct TexStencil {
  Matrix window;
  double spacing = 1.0;
  int anchor = 0;
  double step = 1.0;
};

/// Anchor at the last window row, step equal to the spacing.
TexStencil trailing_stencil(const Matrix& window, double spacing);

struct TexDerivatives {
  Vector first;
  Vector second;  // empty when only a first-order estimate is possible
};

TexDerivatives tex_derivatives(const TexStencil& stencil);
/// c(s + step) ~ c(s) + c' step (+ c'' step^2 / 2 for order 2).
Vector tex_extrapolate(const TexStencil& stencil, int order);

Vector lerp(const Eigen::Ref<const Vector>& a, const Eigen::Ref<const Vector>& b, double t);
/// Great-circle interpolation of direction with linearly interpolated
/// radius. Falls back to lerp below an angle of 1e-6; antiparallel inputs
/// have no unique shortest arc and raise InputError.
Vector slerp(const Eigen::Ref<const Vector>& a, const Eigen::Ref<const Vector>& b, double t);

// ---------------------------------------------------------------------------

struct RecurrentConfig {
  int dim = 12;
  int hidden = 64;
};

/// Single gated recurrent cell with a residual read-out: the prediction for
/// step t+1 is x_t + W_o h_{t+1} + b_o. Inputs are standardised with
/// per-coordinate statistics fitted at training time.
class RecurrentPredictor {
public:
  RecurrentPredictor() = default;
  RecurrentPredictor(const RecurrentConfig& config, Rng& rng);

  const RecurrentConfig& config() const { return config_; }
  Params& params() { return params_; }
  const Params& params() const { return params_; }
  const Vector& offset() const { return offset_; }
  const Vector& scale() const { return scale_; }
  void set_standardization(Vector offset, Vector scale);

  Matrix standardize(const Matrix& x) const;
  Matrix unstandardize(const Matrix& x) const;

  /// One-step-ahead predictions with teacher forcing: row t of the result
  /// predicts row t+1 of `sequence` (original units).
  Matrix predict_next(const Matrix& sequence) const;

  /// Walks the sequence, substituting its own predictions for rows marked
  /// missing, and returns the sequence with those rows filled.
  Matrix fill(const Matrix& sequence, std::span<const bool> missing) const;

  /// Continues `prefix` autoregressively for `steps` rows.
  Matrix rollout(const Matrix& prefix, int steps) const;

private:
  RecurrentConfig config_;
  Params params_;
  Vector offset_;
  Vector scale_;
};

/// Mean over sequences and steps of the squared one-step error in
/// standardised units. All sequences must share one length >= 2.
double recurrent_loss(const RecurrentPredictor& model, std::span<const Matrix> sequences, Grads* grads);

struct RecurrentTrainConfig {
  int epochs = 60;
  int batch = 16;
  AdamConfig adam{.lr = 3e-3};
  double clip_norm = 5.0;
  std::uint64_t seed = 0;
};

struct RecurrentCurve {
  std::vector<double> epoch_loss;
};

/// Teacher-forced training; fits the standardisation from `sequences` first.
/// Throws NumericError on divergence (non-finite loss or above ten times the
/// initial loss).
RecurrentCurve train_recurrent(RecurrentPredictor& model, std::span<const Matrix> sequences,
                               const RecurrentTrainConfig& config);

} // namespace conda_dyn
