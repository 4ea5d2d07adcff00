#pragma once

#include "conda_dyn/numcore.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

namespace conda_dyn {

/// Condition y attached to a state: phase time, regime parameter (the
/// Reynolds-number analog) and an optional steady(0)/unsteady(1) label.
struct Condition {
  double tau = 0.0;
  double mu = 0.0;
  std::optional<int> class_label;

  bool operator==(const Condition&) const = default;
};

struct StateFrame {
  Vector x;
  Condition condition;
};

struct Trajectory {
  std::vector<StateFrame> frames;
  std::vector<double> alpha; // i / (S - 1)

  std::size_t size() const { return frames.size(); }
  double mu() const { return frames.front().condition.mu; }
};

enum class Split : std::uint8_t { train = 0, val = 1, test = 2 };

const char* to_string(Split s);

struct OscillatorSpec {
  int n_traj = 240;
  int frames = 64;
  double mu_lo = 0.5;
  double mu_hi = 1.5;
  int dim = 12;
  std::uint64_t seed = 0;
  int n_test = 40;
  int n_val = 0;
  /// Oscillation periods over a trajectory at the middle of mu_range.
  double periods = 0.5;
  /// Envelope decay exponent of a steady trajectory just below threshold.
  double decay = 0.8;
  /// Amplitude of the tanh perturbation of the embedding.
  double perturbation = 0.1;

  double threshold() const { return 0.5 * (mu_lo + mu_hi); }
};

/// Fixed map from the 2-D oscillator plane into R^D:
///   x = Q s + a * tanh(W s),  Q orthonormal (D x 2).
class OscillatorMap {
public:
  OscillatorMap() = default;
  OscillatorMap(Matrix q, Matrix w, double amplitude);
  static OscillatorMap from_seed(std::uint64_t seed, int dim, double amplitude);

  Vector embed(const Eigen::Ref<const Vector>& s) const;
  /// Inverts embed() on its image by fixed-point iteration; off the image it
  /// returns the fixed point of s = Q^T (x - a tanh(W s)).
  Vector recover(const Eigen::Ref<const Vector>& x) const;

  int dim() const { return static_cast<int>(q_.rows()); }
  const Matrix& q() const { return q_; }
  const Matrix& w() const { return w_; }
  double amplitude() const { return amplitude_; }

  bool operator==(const OscillatorMap&) const = default;

private:
  Matrix q_;
  Matrix w_;
  double amplitude_ = 0.0;
};

/// Angular frequency and decay rate for regime mu (time runs over [0, 1]).
struct OscillatorDynamics {
  double omega;
  double zeta;
};
OscillatorDynamics dynamics_for(const OscillatorSpec& spec, double mu);
int class_for(const OscillatorSpec& spec, double mu);

/// s(t) = exp(-zeta t) (cos(omega t), sin(omega t)).
Vector oscillator_latent(double zeta, double omega, double t);

struct Dataset {
  OscillatorSpec spec;
  OscillatorMap map;
  std::vector<Trajectory> trajectories;
  std::vector<Split> splits;

  std::uint64_t seed() const { return spec.seed; }
  std::vector<std::size_t> indices(Split s) const;
  std::size_t frame_count() const;

  bool operator==(const Dataset& other) const;
};

Dataset generate_oscillator(const OscillatorSpec& spec);

/// Recomputes the labels from mu; true when they match the stored ones.
bool labels_consistent(const Dataset& ds);

void save_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);
std::vector<std::uint8_t> serialize_dataset(const Dataset& ds);
Dataset deserialize_dataset(std::vector<std::uint8_t> bytes);

// ---------------------------------------------------------------------------
// Rendering. Images are row-major grids (row = y, column = x) in [0, 1].

using Image = Matrix;

struct Bump {
  double cx;
  double cy;
  double amplitude;
  double width;
};

Image render_bumps(std::span<const Bump> bumps, int grid);
/// Two-bump field driven by the oscillator-plane coordinates s.
Image render_latent(const Eigen::Ref<const Vector>& s, int grid);
Image render(const StateFrame& frame, const OscillatorMap& map, int grid);
Image render_state(const Eigen::Ref<const Vector>& x, const OscillatorMap& map, int grid);
/// Bound on |d pixel / d s| (euclidean in s) for render_latent, any grid.
double render_lipschitz_bound();

} // namespace conda_dyn
