#pragma once

#include "conda_dyn/dynsim.hpp"
#include "conda_dyn/mlp.hpp"
#include "conda_dyn/numcore.hpp"

#include <filesystem>
#include <span>
#include <vector>

namespace conda_dyn {

/// Linear beta schedule. Index t runs over 1..T; alpha_bar[0] == 1 is the
/// clean-data boundary, beta[0] is unused.
struct NoiseSchedule {
  int T = 0;
  double beta_start = 0.0;
  double beta_end = 0.0;
  std::vector<double> beta;
  std::vector<double> alpha_bar;
};

NoiseSchedule make_schedule(int T, double beta_start, double beta_end);

/// Ascending timesteps t_1 < ... < t_S = T used by strided DDIM.
std::vector<int> strided_timesteps(const NoiseSchedule& sched, int steps);

/// z_t = sqrt(alpha_bar[t]) x + sqrt(1 - alpha_bar[t]) eps
template <typename DerivedX, typename DerivedE>
Vector forward_noise(const Eigen::MatrixBase<DerivedX>& x, int t, const Eigen::MatrixBase<DerivedE>& eps,
                     const NoiseSchedule& sched) {
  if (t < 0 || t > sched.T) {
    throw InputError("forward_noise: timestep out of range");
  }
  const double ab = sched.alpha_bar[t];
  return std::sqrt(ab) * x + std::sqrt(1.0 - ab) * eps;
}

/// Diffusion latent z obtained by DDIM inversion, with the condition it was
/// inverted under.
struct FeatureLatent {
  Vector z;
  Condition condition;
  int steps = 0;
};

/// eps_theta(z_t, t, y) for a batch sharing one timestep.
class NoisePredictor {
public:
  virtual ~NoisePredictor() = default;
  virtual int dim() const = 0;
  virtual Matrix predict_noise(const Matrix& z, int t, std::span<const Condition> y) const = 0;
};

struct DenoiserConfig {
  int dim = 12;
  std::vector<int> hidden{256, 256, 256, 256};
  int time_features = 32;
  int cond_features = 16;
  Activation activation = Activation::silu;
};

/// Dense conditional noise predictor: input is [z_t, sin/cos(t), sin/cos(tau),
/// sin/cos(mu)] concatenated, output is the predicted noise.
class Denoiser : public NoisePredictor {
public:
  Denoiser() = default;
  Denoiser(const DenoiserConfig& config, Rng& rng);
  Denoiser(const DenoiserConfig& config, Mlp net);

  int dim() const override { return config_.dim; }
  Matrix predict_noise(const Matrix& z, int t, std::span<const Condition> y) const override;
  Matrix predict_noise(const Matrix& z, std::span<const int> t, std::span<const Condition> y) const;

  Matrix features(const Matrix& z, std::span<const int> t, std::span<const Condition> y) const;

  /// Mean over the batch of ||eps - eps_theta(z_t, t, y)||^2 where
  /// z_t = forward_noise(x0, t, eps). Accumulates gradients when grads != null.
  double batch_loss(const Matrix& x0, std::span<const int> t, const Matrix& eps, std::span<const Condition> y,
                    const NoiseSchedule& sched, Grads* grads) const;

  const DenoiserConfig& config() const { return config_; }
  Mlp& net() { return net_; }
  const Mlp& net() const { return net_; }

private:
  DenoiserConfig config_;
  Mlp net_;
};

/// Sinusoidal embedding: [sin(v f_k)..., cos(v f_k)...] with `count` entries.
void sinusoidal_features(double value, std::span<const double> freqs, double* out);
std::vector<double> timestep_frequencies(int count);
std::vector<double> condition_frequencies(int count);

struct DiffusionTrainConfig {
  int epochs = 40;
  int batch = 128;
  AdamConfig adam{};
  /// Cosine decay of the learning rate down to lr * final_lr_fraction.
  double final_lr_fraction = 0.1;
  std::uint64_t seed = 0;
};

struct TrainCurve {
  std::vector<double> epoch_loss;
};

/// Trains on the train-split frames of ds. Throws NumericError naming the
/// epoch and batch if the loss becomes non-finite.
TrainCurve train_denoiser(Denoiser& model, const Dataset& ds, const NoiseSchedule& sched,
                          const DiffusionTrainConfig& config);

// ---------------------------------------------------------------------------
// Deterministic DDIM. Batches are row-major (one state per row).

/// One sampling step from alpha_bar_t to alpha_bar_prev given eps.
Matrix ddim_step_down(const Matrix& z_t, const Matrix& eps, double ab_t, double ab_prev);
/// One inversion step from alpha_bar_prev to alpha_bar_t given eps.
Matrix ddim_step_up(const Matrix& z_prev, const Matrix& eps, double ab_prev, double ab_t);

Matrix ddim_sample(const NoisePredictor& model, const Matrix& z_T, std::span<const Condition> y,
                   const NoiseSchedule& sched, int steps);
Matrix ddim_invert(const NoisePredictor& model, const Matrix& x, std::span<const Condition> y,
                   const NoiseSchedule& sched, int steps);

Vector ddim_sample(const NoisePredictor& model, const FeatureLatent& z_T, const NoiseSchedule& sched, int steps);
FeatureLatent ddim_invert(const NoisePredictor& model, const Eigen::Ref<const Vector>& x, const Condition& y,
                          const NoiseSchedule& sched, int steps);

/// Chunked, parallel variants for large batches; results are independent of
/// the worker count.
Matrix ddim_sample_many(const NoisePredictor& model, const Matrix& z_T, std::span<const Condition> y,
                        const NoiseSchedule& sched, int steps);
Matrix ddim_invert_many(const NoisePredictor& model, const Matrix& x, std::span<const Condition> y,
                        const NoiseSchedule& sched, int steps);

void save_denoiser(const Denoiser& model, const NoiseSchedule& sched, const std::filesystem::path& path);
std::pair<Denoiser, NoiseSchedule> load_denoiser(const std::filesystem::path& path);

} // namespace conda_dyn
