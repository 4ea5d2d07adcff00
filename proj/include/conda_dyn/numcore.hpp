#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace conda_dyn {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

// ---------------------------------------------------------------------------
// Errors. The CLI maps ConfigError/InputError to exit code 2 and
// NumericError to exit code 3.

class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
  using Error::Error;
};

class NumericError : public Error {
public:
  using Error::Error;
};

class ConfigError : public Error {
public:
  using Error::Error;
};

class InputError : public Error {
public:
  using Error::Error;
};

class FormatError : public Error {
public:
  using Error::Error;
};

class ParseError : public Error {
public:
  ParseError(const std::string& what, std::uint64_t offset);
  std::uint64_t offset() const { return offset_; }

private:
  std::uint64_t offset_;
};

// ---------------------------------------------------------------------------

/// Matrix product with shape checking. Throws ShapeError when a.cols() !=
/// b.rows() and NumericError when the result is not finite.
Matrix matmul(const Eigen::Ref<const Matrix>& a, const Eigen::Ref<const Matrix>& b);

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  return m.allFinite();
}

// ---------------------------------------------------------------------------

/// xoshiro256** generator. Streams are derived from a master seed and a
/// stream name, so two modules seeded from the same master never share draws.
class Rng {
public:
  explicit Rng(std::uint64_t seed = 0);

  static Rng stream(std::uint64_t seed, std::string_view name);

  std::uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n);

  Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols);

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[index(i)]);
    }
  }

  using result_type = std::uint64_t;
  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~result_type{0}; }
  result_type operator()() { return next_u64(); }

private:
  std::uint64_t s_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t& state);
std::uint64_t fnv1a64(std::string_view text, std::uint64_t basis = 0xcbf29ce484222325ULL);

// ---------------------------------------------------------------------------
// Trainable parameters are stored as named dense blocks; gradients mirror
// the block list one-to-one.

struct Param {
  std::string name;
  Matrix value;
};

using Params = std::vector<Param>;
using Grads = std::vector<Matrix>;

Grads zeros_like(const Params& params);
std::size_t count_scalars(const Params& params);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class AdamState {
public:
  explicit AdamState(AdamConfig config = {});

  const AdamConfig& config() const { return config_; }
  long step() const { return step_; }
  /// Learning-rate schedules adjust the rate between steps.
  void set_learning_rate(double lr);
  const std::vector<Matrix>& first_moment() const { return m_; }
  const std::vector<Matrix>& second_moment() const { return v_; }

private:
  friend void adam_step(Params&, const Grads&, AdamState&);
  AdamConfig config_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  long step_ = 0;
};

/// Bias-corrected Adam update. Moments are allocated on first use and must
/// keep matching the parameter shapes afterwards.
void adam_step(Params& params, const Grads& grads, AdamState& state);

// ---------------------------------------------------------------------------

/// Loss callback for gradient checking: returns the loss at `params` and,
/// when `grads` is non-null, writes the analytic gradient into it.
using LossFn = std::function<double(const Params& params, Grads* grads)>;

struct GradCheckOptions {
  double perturbation = 1e-5;
  /// Check at most this many randomly chosen coordinates (0 = all).
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
};

/// Max over coordinates of |analytic - central| / (|analytic| + |central| + 1e-12).
double grad_check(const LossFn& loss_fn, Params params, const GradCheckOptions& options = {});

} // namespace conda_dyn
