#pragma once

#include "conda_dyn/diffusion.hpp"
#include "conda_dyn/mlp.hpp"
#include "conda_dyn/numcore.hpp"

#include <filesystem>
#include <span>
#include <vector>

namespace conda_dyn {

/// Compact contrastive embedding c with the condition of its source frame.
struct Embedding {
  Vector c;
  Condition condition;
};

/// Batch member as seen by the positive-set rule.
struct ContrastiveItem {
  Condition condition;
  int trajectory = -1;
};

/// Which pairs count as positives:
///  - time clause: |tau_j - tau_i| <= delta_t within one trajectory, or
///    across all of them with cross_trajectory
///  - regime clause (enabled when delta_y > 0): |mu_j - mu_i| <= delta_y
///  - class clause (when class_match): equal class labels
struct PositiveRule {
  double delta_t = 2.0 / 63.0;
  double delta_y = 0.0;
  bool class_match = false;
  /// Time positives span all trajectories instead of one.
  bool cross_trajectory = false;
};

using PositiveSets = std::vector<std::vector<int>>;

/// P(i) for every item. Throws InputError for batches smaller than 4 and
/// when every positive set is empty.
PositiveSets build_positives(std::span<const ContrastiveItem> items, const PositiveRule& rule);

struct InfoNceResult {
  double loss = 0.0;
  /// dL/dC, same shape as the embedding matrix.
  Matrix grad;
  /// Number of anchors with non-empty positive sets.
  int anchors = 0;
};

/// Supervised InfoNCE with sim(a, b) = -||a - b||^2 and temperature tau.
/// Anchors with empty positive sets are skipped; the denominator runs over
/// every other batch item.
InfoNceResult infonce_loss(const Matrix& embeddings, const PositiveSets& positives, double temperature,
                           bool with_grad = true);

struct EncoderConfig {
  int input_dim = 12;
  int embed_dim = 8;
  std::vector<int> hidden{128, 128, 128};
  Activation activation = Activation::silu;
  /// Feed sinusoidal (tau, mu) features alongside z.
  bool use_condition = false;
  int cond_features = 16;
};

/// h_psi: (z[, y]) -> c.
class Encoder {
public:
  Encoder() = default;
  Encoder(const EncoderConfig& config, Rng& rng);
  Encoder(const EncoderConfig& config, Mlp net);

  Matrix inputs(const Matrix& z, std::span<const Condition> y) const;
  Matrix forward(const Matrix& z, std::span<const Condition> y) const;

  const EncoderConfig& config() const { return config_; }
  Mlp& net() { return net_; }
  const Mlp& net() const { return net_; }

private:
  EncoderConfig config_;
  Mlp net_;
};

Embedding embed(const Encoder& encoder, const FeatureLatent& z);
/// Row-wise embedding of many latents.
Matrix embed_many(const Encoder& encoder, const Matrix& z, std::span<const Condition> y);

struct ContrastiveTrainConfig {
  double temperature = 1.0;
  PositiveRule rule{};
  AdamConfig adam{};
  int max_epochs = 150;
  int batches_per_epoch = 20;
  /// Trajectories drawn per batch and anchors drawn per trajectory; each
  /// anchor is paired with a frame inside the time window.
  int batch_trajectories = 16;
  int anchors_per_trajectory = 8;
  double val_fraction = 0.1;
  int val_batches = 8;
  int patience = 10;
  double min_improvement = 1e-4;
  std::uint64_t seed = 0;
};

struct ContrastiveCurve {
  std::vector<double> train_loss;
  std::vector<double> val_loss;
  int best_epoch = -1;
};

/// Trains with Adam on seeded mini-batches; stops once the validation loss
/// has not improved by min_improvement for `patience` epochs and restores
/// the best parameters. Throws NumericError on divergence (loss above ten
/// times its initial value).
ContrastiveCurve train_encoder(Encoder& encoder, std::span<const FeatureLatent> latents,
                               std::span<const int> trajectory_ids, const ContrastiveTrainConfig& config);

/// Mean InfoNCE over a batch of latents; exposes the full encoder gradient
/// for gradient checking.
double encoder_batch_loss(const Encoder& encoder, const Matrix& z, std::span<const Condition> y,
                          const PositiveSets& positives, double temperature, Grads* grads);

void save_encoder(const Encoder& encoder, const std::filesystem::path& path);
Encoder load_encoder(const std::filesystem::path& path);

} // namespace conda_dyn
