#include "conda_dyn/contrastive.hpp"

#include "conda_dyn/binio.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

namespace conda_dyn {

namespace {
constexpr char kCheckpointMagic[] = "CDYNCKPT";
constexpr double kTimeSlack = 1e-12;
} // namespace

PositiveSets build_positives(std::span<const ContrastiveItem> items, const PositiveRule& rule) {
  const std::size_t n = items.size();
  if (n < 4) {
    throw InputError("build_positives: batch needs at least 4 items, got " + std::to_string(n));
  }
  PositiveSets sets(n);
  bool any = false;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& a = items[i];
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) {
        continue;
      }
      const auto& b = items[j];
      const bool linked = rule.cross_trajectory || (a.trajectory >= 0 && a.trajectory == b.trajectory);
      bool positive = linked && std::abs(a.condition.tau - b.condition.tau) <= rule.delta_t + kTimeSlack;
      if (!positive && rule.delta_y > 0.0) {
        positive = std::abs(a.condition.mu - b.condition.mu) <= rule.delta_y;
      }
      if (!positive && rule.class_match) {
        positive = a.condition.class_label.has_value() && a.condition.class_label == b.condition.class_label;
      }
      if (positive) {
        sets[i].push_back(static_cast<int>(j));
      }
    }
    any = any || !sets[i].empty();
  }
  if (!any) {
    throw InputError("build_positives: degenerate batch, no anchor has a positive");
  }
  return sets;
}

InfoNceResult infonce_loss(const Matrix& embeddings, const PositiveSets& positives, double temperature,
                           bool with_grad) {
  if (!(temperature > 0.0)) {
    throw ConfigError("contrastive.temperature: must be positive");
  }
  const Eigen::Index n = embeddings.rows();
  if (static_cast<Eigen::Index>(positives.size()) != n) {
    throw ShapeError("infonce_loss: positive sets do not match the batch size");
  }
  if (n < 2) {
    throw InputError("infonce_loss: batch needs at least 2 items");
  }

  // logits(i, a) = -||c_i - c_a||^2 / tau for a != i.
  Matrix logits(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    logits(i, i) = 0.0;
    for (Eigen::Index a = i + 1; a < n; ++a) {
      const double v = -(embeddings.row(i) - embeddings.row(a)).squaredNorm() / temperature;
      logits(i, a) = v;
      logits(a, i) = v;
    }
  }

  int anchors = 0;
  for (const auto& p : positives) {
    anchors += p.empty() ? 0 : 1;
  }
  if (anchors == 0) {
    throw InputError("infonce_loss: degenerate batch, no anchor has a positive");
  }

  InfoNceResult out;
  out.anchors = anchors;
  Matrix weight;
  if (with_grad) {
    weight = Matrix::Zero(n, n);
  }
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& pos = positives[i];
    if (pos.empty()) {
      continue;
    }
    double peak = -std::numeric_limits<double>::infinity();
    for (Eigen::Index a = 0; a < n; ++a) {
      if (a != i) {
        peak = std::max(peak, logits(i, a));
      }
    }
    double sum = 0.0;
    for (Eigen::Index a = 0; a < n; ++a) {
      if (a != i) {
        sum += std::exp(logits(i, a) - peak);
      }
    }
    const double lse = peak + std::log(sum);
    const double inv_p = 1.0 / static_cast<double>(pos.size());
    double term = 0.0;
    for (int p : pos) {
      term += logits(i, p) - lse;
    }
    total -= term * inv_p;
    if (with_grad) {
      // dL_i/dlogit(i, a) = softmax(i, a) - [a in P(i)] / |P(i)|
      for (Eigen::Index a = 0; a < n; ++a) {
        if (a != i) {
          weight(i, a) = std::exp(logits(i, a) - lse);
        }
      }
      for (int p : pos) {
        weight(i, p) -= inv_p;
      }
    }
  }
  out.loss = total / anchors;
  if (!std::isfinite(out.loss)) {
    throw NumericError("infonce_loss: loss is not finite");
  }
  if (with_grad) {
    weight /= static_cast<double>(anchors);
    // dlogit(i, a)/dc_i = -2 (c_i - c_a) / tau and dlogit(i, a)/dc_a = +2 (c_i - c_a) / tau.
    const Vector row_sum = weight.rowwise().sum();
    const Vector col_sum = weight.colwise().sum().transpose();
    const Matrix wc = weight * embeddings;
    const Matrix wtc = weight.transpose() * embeddings;
    out.grad = (-2.0 / temperature) * (row_sum.asDiagonal() * embeddings - wc) +
               (2.0 / temperature) * (wtc - col_sum.asDiagonal() * embeddings);
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {
int encoder_input_width(const EncoderConfig& c) {
  return c.input_dim + (c.use_condition ? 2 * c.cond_features : 0);
}

void validate(const EncoderConfig& c) {
  if (c.input_dim < 1 || c.embed_dim < 1) {
    throw ConfigError("contrastive.embed_dim: input and embedding dimensions must be positive");
  }
  if (c.use_condition && (c.cond_features < 2 || c.cond_features % 2)) {
    throw ConfigError("contrastive.cond_features: must be positive and even");
  }
}
} // namespace

Encoder::Encoder(const EncoderConfig& config, Rng& rng) : config_(config) {
  validate(config);
  std::vector<int> widths{encoder_input_width(config)};
  widths.insert(widths.end(), config.hidden.begin(), config.hidden.end());
  widths.push_back(config.embed_dim);
  net_ = Mlp(widths, config.activation, rng, "encoder");
}

Encoder::Encoder(const EncoderConfig& config, Mlp net) : config_(config), net_(std::move(net)) {
  validate(config);
  if (net_.input_dim() != encoder_input_width(config) || net_.output_dim() != config.embed_dim) {
    throw FormatError("Encoder: network shape does not match configuration");
  }
}

Matrix Encoder::inputs(const Matrix& z, std::span<const Condition> y) const {
  if (z.cols() != config_.input_dim) {
    throw ShapeError("Encoder: expected latents of dimension " + std::to_string(config_.input_dim) + ", got " +
                     std::to_string(z.cols()));
  }
  if (!config_.use_condition) {
    return z;
  }
  if (static_cast<Eigen::Index>(y.size()) != z.rows()) {
    throw ShapeError("Encoder: latent and condition counts differ");
  }
  const auto cf = condition_frequencies(config_.cond_features);
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> f(z.rows(), encoder_input_width(config_));
  f.leftCols(config_.input_dim) = z;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    double* row = f.row(i).data() + config_.input_dim;
    sinusoidal_features(y[i].tau, cf, row);
    sinusoidal_features(y[i].mu, cf, row + config_.cond_features);
  }
  return f;
}

Matrix Encoder::forward(const Matrix& z, std::span<const Condition> y) const {
  return net_.forward(inputs(z, y));
}

Embedding embed(const Encoder& encoder, const FeatureLatent& z) {
  const Matrix row = z.z.transpose();
  const Matrix c = encoder.forward(row, std::span(&z.condition, 1));
  return {c.row(0).transpose(), z.condition};
}

Matrix embed_many(const Encoder& encoder, const Matrix& z, std::span<const Condition> y) {
  return encoder.forward(z, y);
}

double encoder_batch_loss(const Encoder& encoder, const Matrix& z, std::span<const Condition> y,
                          const PositiveSets& positives, double temperature, Grads* grads) {
  const Matrix in = encoder.inputs(z, y);
  if (grads == nullptr) {
    return infonce_loss(encoder.net().forward(in), positives, temperature, false).loss;
  }
  Mlp::Tape tape;
  const Matrix c = encoder.net().forward(in, tape);
  const auto r = infonce_loss(c, positives, temperature, true);
  encoder.net().backward(tape, r.grad, *grads);
  return r.loss;
}

// ---------------------------------------------------------------------------

namespace {

struct Batch {
  Matrix z;
  std::vector<Condition> y;
  PositiveSets positives;
};

class BatchSampler {
public:
  BatchSampler(std::span<const FeatureLatent> latents, std::span<const int> ids, std::vector<int> trajectories,
               const ContrastiveTrainConfig& config)
      : latents_(latents), ids_(ids), trajectories_(std::move(trajectories)), config_(config) {
    for (std::size_t i = 0; i < latents.size(); ++i) {
      frames_[ids[i]].push_back(static_cast<int>(i));
    }
  }

  Batch draw(Rng& rng) const {
    std::vector<int> pool = trajectories_;
    rng.shuffle(std::span(pool));
    pool.resize(std::min<std::size_t>(pool.size(), static_cast<std::size_t>(config_.batch_trajectories)));
    std::vector<int> picked;
    for (int traj : pool) {
      const auto& fr = frames_.at(traj);
      for (int k = 0; k < config_.anchors_per_trajectory; ++k) {
        const int anchor = fr[rng.index(fr.size())];
        picked.push_back(anchor);
        std::vector<int> near;
        for (int j : fr) {
          if (j != anchor && std::abs(latents_[j].condition.tau - latents_[anchor].condition.tau) <=
                                 config_.rule.delta_t + kTimeSlack) {
            near.push_back(j);
          }
        }
        if (!near.empty()) {
          picked.push_back(near[rng.index(near.size())]);
        }
      }
    }
    Batch b;
    b.z.resize(static_cast<Eigen::Index>(picked.size()), latents_.front().z.size());
    std::vector<ContrastiveItem> items;
    items.reserve(picked.size());
    for (std::size_t r = 0; r < picked.size(); ++r) {
      const auto& l = latents_[picked[r]];
      b.z.row(static_cast<Eigen::Index>(r)) = l.z.transpose();
      b.y.push_back(l.condition);
      items.push_back({l.condition, ids_[picked[r]]});
    }
    b.positives = build_positives(items, config_.rule);
    return b;
  }

private:
  std::span<const FeatureLatent> latents_;
  std::span<const int> ids_;
  std::vector<int> trajectories_;
  const ContrastiveTrainConfig& config_;
  std::map<int, std::vector<int>> frames_;
};

double mean_loss(const Encoder& encoder, const std::vector<Batch>& batches, double temperature) {
  double s = 0.0;
  for (const auto& b : batches) {
    s += encoder_batch_loss(encoder, b.z, b.y, b.positives, temperature, nullptr);
  }
  return s / static_cast<double>(batches.size());
}

} // namespace

ContrastiveCurve train_encoder(Encoder& encoder, std::span<const FeatureLatent> latents,
                               std::span<const int> trajectory_ids, const ContrastiveTrainConfig& config) {
  if (latents.size() != trajectory_ids.size()) {
    throw ShapeError("train_encoder: latent and trajectory id counts differ");
  }
  if (!(config.temperature > 0.0)) {
    throw ConfigError("contrastive.temperature: must be positive");
  }
  if (config.max_epochs < 1 || config.batches_per_epoch < 1 || config.batch_trajectories < 1 ||
      config.anchors_per_trajectory < 1 || config.val_batches < 1 || config.patience < 1) {
    throw ConfigError("contrastive: epoch, batch and patience counts must be positive");
  }
  if (!(config.val_fraction > 0.0 && config.val_fraction < 1.0)) {
    throw ConfigError("contrastive.val_fraction: must lie in (0, 1)");
  }
  std::vector<int> trajectories(trajectory_ids.begin(), trajectory_ids.end());
  std::sort(trajectories.begin(), trajectories.end());
  trajectories.erase(std::unique(trajectories.begin(), trajectories.end()), trajectories.end());
  if (trajectories.size() < 2) {
    throw InputError("train_encoder: latents must cover at least 2 trajectories");
  }

  Rng split_rng = Rng::stream(config.seed, "contrastive.split");
  split_rng.shuffle(std::span(trajectories));
  const std::size_t n_val = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::lround(config.val_fraction * static_cast<double>(trajectories.size()))), 1,
      trajectories.size() - 1);
  std::vector<int> val_traj(trajectories.begin(), trajectories.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<int> train_traj(trajectories.begin() + static_cast<std::ptrdiff_t>(n_val), trajectories.end());

  BatchSampler train_sampler(latents, trajectory_ids, train_traj, config);
  BatchSampler val_sampler(latents, trajectory_ids, val_traj, config);
  Rng val_rng = Rng::stream(config.seed, "contrastive.val");
  std::vector<Batch> val_batches;
  for (int b = 0; b < config.val_batches; ++b) {
    val_batches.push_back(val_sampler.draw(val_rng));
  }

  Rng rng = Rng::stream(config.seed, "contrastive.train");
  AdamState adam(config.adam);
  ContrastiveCurve curve;
  const double initial = mean_loss(encoder, val_batches, config.temperature);
  double best = initial;
  Params best_params = encoder.net().params();
  int stale = 0;
  for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (int b = 0; b < config.batches_per_epoch; ++b) {
      const Batch batch = train_sampler.draw(rng);
      Grads grads = zeros_like(encoder.net().params());
      const double loss = encoder_batch_loss(encoder, batch.z, batch.y, batch.positives, config.temperature, &grads);
      if (!std::isfinite(loss) || loss > 10.0 * std::max(initial, 1e-12)) {
        throw NumericError("train_encoder: diverged at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(b) + " (loss " + std::to_string(loss) + ", initial " +
                           std::to_string(initial) + ")");
      }
      adam_step(encoder.net().params(), grads, adam);
      epoch_loss += loss;
    }
    curve.train_loss.push_back(epoch_loss / config.batches_per_epoch);
    const double val = mean_loss(encoder, val_batches, config.temperature);
    curve.val_loss.push_back(val);
    if (val < best - config.min_improvement) {
      best = val;
      best_params = encoder.net().params();
      curve.best_epoch = epoch;
      stale = 0;
    } else if (++stale >= config.patience) {
      break;
    }
  }
  encoder.net().params() = std::move(best_params);
  return curve;
}

// ---------------------------------------------------------------------------

void save_encoder(const Encoder& encoder, const std::filesystem::path& path) {
  BinaryWriter w(kCheckpointMagic);
  w.str("encoder");
  const auto& c = encoder.config();
  w.u32(static_cast<std::uint32_t>(c.input_dim));
  w.u32(static_cast<std::uint32_t>(c.embed_dim));
  w.u8(c.use_condition ? 1 : 0);
  w.u32(static_cast<std::uint32_t>(c.cond_features));
  w.str(to_string(c.activation));
  const auto& widths = encoder.net().widths();
  w.u32(static_cast<std::uint32_t>(widths.size()));
  for (int wd : widths) {
    w.u32(static_cast<std::uint32_t>(wd));
  }
  w.params(encoder.net().params());
  w.save(path);
}

Encoder load_encoder(const std::filesystem::path& path) {
  auto r = BinaryReader::open(path, kCheckpointMagic);
  const auto kind_at = r.offset();
  if (r.str() != "encoder") {
    throw FormatError("checkpoint at byte " + std::to_string(kind_at) + " is not an encoder");
  }
  EncoderConfig c;
  c.input_dim = static_cast<int>(r.u32());
  c.embed_dim = static_cast<int>(r.u32());
  c.use_condition = r.u8() != 0;
  c.cond_features = static_cast<int>(r.u32());
  c.activation = activation_from_string(r.str());
  const std::uint32_t nw = r.u32();
  std::vector<int> widths(nw);
  for (auto& wd : widths) {
    wd = static_cast<int>(r.u32());
  }
  if (widths.size() < 2) {
    throw ParseError("encoder checkpoint has fewer than two layer widths", r.offset());
  }
  c.hidden.assign(widths.begin() + 1, widths.end() - 1);
  Params params = r.params();
  r.expect_end();
  return Encoder(c, Mlp(widths, c.activation, std::move(params)));
}

} // namespace conda_dyn
