#include "conda_dyn/mlp.hpp"

#include <cmath>

namespace conda_dyn {

namespace {

// max_x d/dx [x * sigmoid(x)], attained near x = 2.3994
constexpr double kSiluSlopeBound = 1.0998;

void activate(Activation a, const Matrix& pre, Matrix& post) {
  if (a == Activation::tanh) {
    post = pre.array().tanh();
  } else {
    post = pre.array() / (1.0 + (-pre.array()).exp());
  }
}

void activation_grad_inplace(Activation a, const Matrix& pre, Matrix& delta) {
  if (a == Activation::tanh) {
    delta.array() *= 1.0 - pre.array().tanh().square();
  } else {
    const Eigen::ArrayXXd sig = 1.0 / (1.0 + (-pre.array()).exp());
    delta.array() *= sig * (1.0 + pre.array() * (1.0 - sig));
  }
}

} // namespace

std::string to_string(Activation a) { return a == Activation::tanh ? "tanh" : "silu"; }

Activation activation_from_string(const std::string& name) {
  if (name == "silu") {
    return Activation::silu;
  }
  if (name == "tanh") {
    return Activation::tanh;
  }
  throw ConfigError("unknown activation '" + name + "'");
}

Mlp::Mlp(std::vector<int> widths, Activation activation, Rng& rng, const std::string& prefix,
         double output_gain)
    : widths_(std::move(widths)), activation_(activation) {
  if (widths_.size() < 2) {
    throw ConfigError("Mlp: need at least input and output widths");
  }
  for (int w : widths_) {
    if (w <= 0) {
      throw ConfigError("Mlp: layer widths must be positive");
    }
  }
  for (std::size_t l = 0; l < layers(); ++l) {
    const double fan_in = widths_[l];
    const double gain = (l + 1 == layers()) ? output_gain : 1.0;
    Matrix w = rng.normal_matrix(widths_[l], widths_[l + 1]) * (gain / std::sqrt(fan_in));
    params_.push_back({prefix + ".layer" + std::to_string(l) + ".weight", std::move(w)});
    params_.push_back({prefix + ".layer" + std::to_string(l) + ".bias", Matrix::Zero(1, widths_[l + 1])});
  }
}

Mlp::Mlp(std::vector<int> widths, Activation activation, Params params)
    : widths_(std::move(widths)), activation_(activation), params_(std::move(params)) {
  if (widths_.size() < 2 || params_.size() != 2 * layers()) {
    throw FormatError("Mlp: parameter block count does not match layer widths");
  }
  for (std::size_t l = 0; l < layers(); ++l) {
    const Matrix& w = params_[2 * l].value;
    const Matrix& b = params_[2 * l + 1].value;
    if (w.rows() != widths_[l] || w.cols() != widths_[l + 1] || b.rows() != 1 || b.cols() != widths_[l + 1]) {
      throw FormatError("Mlp: parameter shape mismatch in layer " + std::to_string(l));
    }
  }
}

Matrix Mlp::forward(const Eigen::Ref<const Matrix>& input) const {
  if (input.cols() != input_dim()) {
    throw ShapeError("Mlp::forward: expected " + std::to_string(input_dim()) + " input columns, got " +
                     std::to_string(input.cols()));
  }
  Matrix act = input;
  Matrix pre;
  for (std::size_t l = 0; l < layers(); ++l) {
    pre.noalias() = act * params_[2 * l].value;
    pre.rowwise() += params_[2 * l + 1].value.row(0);
    if (l + 1 == layers()) {
      return pre;
    }
    activate(activation_, pre, act);
  }
  return act;
}

Matrix Mlp::forward(const Eigen::Ref<const Matrix>& input, Tape& tape) const {
  if (input.cols() != input_dim()) {
    throw ShapeError("Mlp::forward: expected " + std::to_string(input_dim()) + " input columns, got " +
                     std::to_string(input.cols()));
  }
  tape.input = input;
  tape.pre.resize(layers());
  tape.post.resize(layers() - 1);
  const Matrix* act = &tape.input;
  for (std::size_t l = 0; l < layers(); ++l) {
    tape.pre[l].noalias() = (*act) * params_[2 * l].value;
    tape.pre[l].rowwise() += params_[2 * l + 1].value.row(0);
    if (l + 1 < layers()) {
      activate(activation_, tape.pre[l], tape.post[l]);
      act = &tape.post[l];
    }
  }
  return tape.pre.back();
}

Matrix Mlp::backward(const Tape& tape, const Eigen::Ref<const Matrix>& grad_output, Grads& grads) const {
  if (grads.size() != params_.size()) {
    throw ShapeError("Mlp::backward: gradient list does not match parameters");
  }
  Matrix delta = grad_output;
  for (std::size_t l = layers(); l-- > 0;) {
    const Matrix& act_in = (l == 0) ? tape.input : tape.post[l - 1];
    grads[2 * l].noalias() += act_in.transpose() * delta;
    grads[2 * l + 1] += delta.colwise().sum();
    Matrix prev = delta * params_[2 * l].value.transpose();
    if (l > 0) {
      activation_grad_inplace(activation_, tape.pre[l - 1], prev);
    }
    delta = std::move(prev);
  }
  return delta;
}

double Mlp::lipschitz_bound() const {
  const double slope = activation_ == Activation::tanh ? 1.0 : kSiluSlopeBound;
  double bound = 1.0;
  for (std::size_t l = 0; l < layers(); ++l) {
    Eigen::JacobiSVD<Matrix> svd(params_[2 * l].value);
    bound *= svd.singularValues()(0);
    if (l + 1 < layers()) {
      bound *= slope;
    }
  }
  return bound;
}

} // namespace conda_dyn
