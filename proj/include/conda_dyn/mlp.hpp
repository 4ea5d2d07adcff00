#pragma once

#include "conda_dyn/numcore.hpp"

#include <string>
#include <vector>

namespace conda_dyn {

enum class Activation { silu, tanh };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& name);

/// Fully connected network operating on row-major batches (one sample per
/// row). Hidden layers apply the activation; the output layer is affine.
/// Parameters are stored as [W0, b0, W1, b1, ...] with W_l of shape
/// in_l x out_l and b_l of shape 1 x out_l.
class Mlp {
public:
  Mlp() = default;
  Mlp(std::vector<int> widths, Activation activation, Rng& rng, const std::string& prefix,
      double output_gain = 1.0);
  /// Rebuilds a network around existing parameters (checkpoint loading).
  Mlp(std::vector<int> widths, Activation activation, Params params);

  struct Tape {
    Matrix input;
    std::vector<Matrix> pre;  // pre-activation of each layer
    std::vector<Matrix> post; // activation output of each hidden layer
  };

  Matrix forward(const Eigen::Ref<const Matrix>& input) const;
  Matrix forward(const Eigen::Ref<const Matrix>& input, Tape& tape) const;

  /// Accumulates parameter gradients into `grads` (same layout as params())
  /// and returns dL/d(input).
  Matrix backward(const Tape& tape, const Eigen::Ref<const Matrix>& grad_output, Grads& grads) const;

  /// Upper bound on the Lipschitz constant (euclidean norms): product of
  /// layer spectral norms times the activation's derivative bound.
  double lipschitz_bound() const;

  const std::vector<int>& widths() const { return widths_; }
  int input_dim() const { return widths_.front(); }
  int output_dim() const { return widths_.back(); }
  Activation activation() const { return activation_; }
  Params& params() { return params_; }
  const Params& params() const { return params_; }

private:
  std::size_t layers() const { return widths_.size() - 1; }

  std::vector<int> widths_;
  Activation activation_ = Activation::silu;
  Params params_;
};

} // namespace conda_dyn
