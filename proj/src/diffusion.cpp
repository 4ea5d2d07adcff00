#include "conda_dyn/diffusion.hpp"

#include "conda_dyn/binio.hpp"
#include "conda_dyn/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace conda_dyn {

namespace {
constexpr char kCheckpointMagic[] = "CDYNCKPT";
constexpr Eigen::Index kChunkRows = 256;
constexpr double kMinSqrtAlphaBar = 1e-150;
} // namespace

NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
  if (T < 2) {
    throw ConfigError("diffusion.T: need at least 2 diffusion steps");
  }
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ConfigError("diffusion.beta: require 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.T = T;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  s.beta.assign(T + 1, 0.0);
  s.alpha_bar.assign(T + 1, 1.0);
  for (int t = 1; t <= T; ++t) {
    s.beta[t] = beta_start + (beta_end - beta_start) * static_cast<double>(t - 1) / (T - 1);
    s.alpha_bar[t] = s.alpha_bar[t - 1] * (1.0 - s.beta[t]);
  }
  return s;
}

std::vector<int> strided_timesteps(const NoiseSchedule& sched, int steps) {
  if (steps < 1 || steps > sched.T) {
    throw ConfigError("diffusion.steps: must lie in [1, T]");
  }
  std::vector<int> ts(steps);
  for (int i = 1; i <= steps; ++i) {
    ts[i - 1] = static_cast<int>((static_cast<long long>(i) * sched.T) / steps);
  }
  return ts;
}

// ---------------------------------------------------------------------------

std::vector<double> timestep_frequencies(int count) {
  const int half = count / 2;
  std::vector<double> f(half);
  for (int k = 0; k < half; ++k) {
    f[k] = std::exp(-std::log(10000.0) * k / half);
  }
  return f;
}

std::vector<double> condition_frequencies(int count) {
  // Log-spaced in [1, 4] radians per unit of the condition value.
  const int half = count / 2;
  std::vector<double> f(half);
  for (int k = 0; k < half; ++k) {
    f[k] = half > 1 ? std::exp(std::log(4.0) * k / (half - 1)) : 1.0;
  }
  return f;
}

void sinusoidal_features(double value, std::span<const double> freqs, double* out) {
  const std::size_t half = freqs.size();
  for (std::size_t k = 0; k < half; ++k) {
    out[k] = std::sin(value * freqs[k]);
    out[half + k] = std::cos(value * freqs[k]);
  }
}

Denoiser::Denoiser(const DenoiserConfig& config, Rng& rng) : config_(config) {
  if (config.dim < 1 || config.time_features < 2 || config.cond_features < 2 || config.time_features % 2 ||
      config.cond_features % 2) {
    throw ConfigError("diffusion: dimensions and feature counts must be positive and even");
  }
  std::vector<int> widths{config.dim + config.time_features + 2 * config.cond_features};
  widths.insert(widths.end(), config.hidden.begin(), config.hidden.end());
  widths.push_back(config.dim);
  net_ = Mlp(widths, config.activation, rng, "denoiser", 0.1);
}

Denoiser::Denoiser(const DenoiserConfig& config, Mlp net) : config_(config), net_(std::move(net)) {
  if (net_.input_dim() != config.dim + config.time_features + 2 * config.cond_features ||
      net_.output_dim() != config.dim) {
    throw FormatError("Denoiser: network shape does not match configuration");
  }
}

Matrix Denoiser::features(const Matrix& z, std::span<const int> t, std::span<const Condition> y) const {
  const Eigen::Index n = z.rows();
  if (z.cols() != config_.dim) {
    throw ShapeError("Denoiser: expected states of dimension " + std::to_string(config_.dim));
  }
  if (static_cast<Eigen::Index>(t.size()) != n || static_cast<Eigen::Index>(y.size()) != n) {
    throw ShapeError("Denoiser: batch, timestep and condition counts differ");
  }
  const auto tf = timestep_frequencies(config_.time_features);
  const auto cf = condition_frequencies(config_.cond_features);
  const int width = config_.dim + config_.time_features + 2 * config_.cond_features;
  // Row-major scratch so each sample's features are contiguous.
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> f(n, width);
  f.leftCols(config_.dim) = z;
  for (Eigen::Index i = 0; i < n; ++i) {
    double* row = f.row(i).data() + config_.dim;
    sinusoidal_features(static_cast<double>(t[i]), tf, row);
    sinusoidal_features(y[i].tau, cf, row + config_.time_features);
    sinusoidal_features(y[i].mu, cf, row + config_.time_features + config_.cond_features);
  }
  return f;
}

Matrix Denoiser::predict_noise(const Matrix& z, int t, std::span<const Condition> y) const {
  std::vector<int> ts(z.rows(), t);
  return net_.forward(features(z, ts, y));
}

Matrix Denoiser::predict_noise(const Matrix& z, std::span<const int> t, std::span<const Condition> y) const {
  return net_.forward(features(z, t, y));
}

double Denoiser::batch_loss(const Matrix& x0, std::span<const int> t, const Matrix& eps,
                            std::span<const Condition> y, const NoiseSchedule& sched, Grads* grads) const {
  const Eigen::Index n = x0.rows();
  Matrix zt(n, x0.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const double ab = sched.alpha_bar.at(t[i]);
    zt.row(i) = std::sqrt(ab) * x0.row(i) + std::sqrt(1.0 - ab) * eps.row(i);
  }
  const Matrix input = features(zt, t, y);
  if (grads == nullptr) {
    const Matrix diff = net_.forward(input) - eps;
    return diff.squaredNorm() / static_cast<double>(n);
  }
  Mlp::Tape tape;
  const Matrix diff = net_.forward(input, tape) - eps;
  const Matrix grad_out = (2.0 / static_cast<double>(n)) * diff;
  net_.backward(tape, grad_out, *grads);
  return diff.squaredNorm() / static_cast<double>(n);
}

TrainCurve train_denoiser(Denoiser& model, const Dataset& ds, const NoiseSchedule& sched,
                          const DiffusionTrainConfig& config) {
  if (config.epochs < 0 || config.batch < 1) {
    throw ConfigError("diffusion.train: epochs must be >= 0 and batch >= 1");
  }
  std::vector<const StateFrame*> frames;
  for (std::size_t i : ds.indices(Split::train)) {
    for (const auto& f : ds.trajectories[i].frames) {
      frames.push_back(&f);
    }
  }
  if (frames.empty()) {
    throw InputError("diffusion.train: dataset has no training frames");
  }
  const int dim = model.dim();
  Rng rng = Rng::stream(config.seed, "diffusion.train");
  AdamState adam(config.adam);
  TrainCurve curve;
  const std::size_t per_epoch = (frames.size() + config.batch - 1) / config.batch;
  const std::size_t total_steps = per_epoch * static_cast<std::size_t>(config.epochs);
  std::size_t step = 0;
  std::vector<std::size_t> order(frames.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(std::span(order));
    double sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t b = 0; b < per_epoch; ++b) {
      const std::size_t begin = b * config.batch;
      const std::size_t end = std::min(order.size(), begin + config.batch);
      const Eigen::Index n = static_cast<Eigen::Index>(end - begin);
      Matrix x0(n, dim);
      Matrix eps(n, dim);
      std::vector<int> ts(n);
      std::vector<Condition> ys(n);
      for (Eigen::Index i = 0; i < n; ++i) {
        const StateFrame& f = *frames[order[begin + i]];
        if (f.x.size() != dim) {
          throw ShapeError("diffusion.train: frame dimension differs from model dimension");
        }
        x0.row(i) = f.x.transpose();
        ys[i] = f.condition;
        ts[i] = 1 + static_cast<int>(rng.index(sched.T));
        for (int k = 0; k < dim; ++k) {
          eps(i, k) = rng.normal();
        }
      }
      Grads grads = zeros_like(model.net().params());
      const double loss = model.batch_loss(x0, ts, eps, ys, sched, &grads);
      if (!std::isfinite(loss)) {
        throw NumericError("diffusion.train: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(b));
      }
      const double progress = total_steps > 1 ? static_cast<double>(step) / (total_steps - 1) : 0.0;
      adam.set_learning_rate(config.adam.lr *
                             (config.final_lr_fraction +
                              (1.0 - config.final_lr_fraction) * 0.5 * (1.0 + std::cos(M_PI * progress))));
      adam_step(model.net().params(), grads, adam);
      sum += loss * static_cast<double>(n);
      seen += static_cast<std::size_t>(n);
      ++step;
    }
    curve.epoch_loss.push_back(sum / static_cast<double>(seen));
  }
  return curve;
}

// ---------------------------------------------------------------------------

Matrix ddim_step_down(const Matrix& z_t, const Matrix& eps, double ab_t, double ab_prev) {
  const double s_t = std::sqrt(ab_t);
  if (s_t < kMinSqrtAlphaBar) {
    throw NumericError("ddim: sqrt(alpha_bar) underflow");
  }
  return std::sqrt(ab_prev) * (z_t - std::sqrt(1.0 - ab_t) * eps) / s_t + std::sqrt(1.0 - ab_prev) * eps;
}

Matrix ddim_step_up(const Matrix& z_prev, const Matrix& eps, double ab_prev, double ab_t) {
  const double s_prev = std::sqrt(ab_prev);
  if (s_prev < kMinSqrtAlphaBar) {
    throw NumericError("ddim: sqrt(alpha_bar) underflow");
  }
  return std::sqrt(ab_t) * (z_prev - std::sqrt(1.0 - ab_prev) * eps) / s_prev + std::sqrt(1.0 - ab_t) * eps;
}

Matrix ddim_sample(const NoisePredictor& model, const Matrix& z_T, std::span<const Condition> y,
                   const NoiseSchedule& sched, int steps) {
  if (!z_T.allFinite()) {
    throw InputError("ddim_sample: non-finite latent");
  }
  const auto ts = strided_timesteps(sched, steps);
  Matrix z = z_T;
  for (int i = steps - 1; i >= 0; --i) {
    const int t = ts[i];
    const int prev = i > 0 ? ts[i - 1] : 0;
    const Matrix eps = model.predict_noise(z, t, y);
    z = ddim_step_down(z, eps, sched.alpha_bar[t], sched.alpha_bar[prev]);
  }
  if (!z.allFinite()) {
    throw NumericError("ddim_sample: non-finite result");
  }
  return z;
}

Matrix ddim_invert(const NoisePredictor& model, const Matrix& x, std::span<const Condition> y,
                   const NoiseSchedule& sched, int steps) {
  if (!x.allFinite()) {
    throw InputError("ddim_invert: non-finite state");
  }
  const auto ts = strided_timesteps(sched, steps);
  Matrix z = x;
  for (int i = 0; i < steps; ++i) {
    const int t = ts[i];
    const int prev = i > 0 ? ts[i - 1] : 0;
    // eps_theta evaluated at the previous latent with the target timestep.
    const Matrix eps = model.predict_noise(z, t, y);
    z = ddim_step_up(z, eps, sched.alpha_bar[prev], sched.alpha_bar[t]);
  }
  if (!z.allFinite()) {
    throw NumericError("ddim_invert: non-finite result");
  }
  return z;
}

Vector ddim_sample(const NoisePredictor& model, const FeatureLatent& z_T, const NoiseSchedule& sched, int steps) {
  const Matrix out = ddim_sample(model, Matrix(z_T.z.transpose()), std::span(&z_T.condition, 1), sched, steps);
  return out.row(0).transpose();
}

FeatureLatent ddim_invert(const NoisePredictor& model, const Eigen::Ref<const Vector>& x, const Condition& y,
                          const NoiseSchedule& sched, int steps) {
  const Matrix out = ddim_invert(model, Matrix(x.transpose()), std::span(&y, 1), sched, steps);
  return FeatureLatent{out.row(0).transpose(), y, steps};
}

namespace {
template <typename Fn>
Matrix chunked(const Matrix& in, std::span<const Condition> y, Fn&& fn) {
  if (static_cast<Eigen::Index>(y.size()) != in.rows()) {
    throw ShapeError("ddim: condition count differs from batch size");
  }
  Matrix out(in.rows(), in.cols());
  const std::size_t chunks = static_cast<std::size_t>((in.rows() + kChunkRows - 1) / kChunkRows);
  parallel_for(chunks, [&](std::size_t c) {
    const Eigen::Index begin = static_cast<Eigen::Index>(c) * kChunkRows;
    const Eigen::Index n = std::min(kChunkRows, in.rows() - begin);
    out.middleRows(begin, n) = fn(Matrix(in.middleRows(begin, n)), y.subspan(begin, n));
  });
  return out;
}
} // namespace

Matrix ddim_sample_many(const NoisePredictor& model, const Matrix& z_T, std::span<const Condition> y,
                        const NoiseSchedule& sched, int steps) {
  return chunked(z_T, y, [&](const Matrix& part, std::span<const Condition> py) {
    return ddim_sample(model, part, py, sched, steps);
  });
}

Matrix ddim_invert_many(const NoisePredictor& model, const Matrix& x, std::span<const Condition> y,
                        const NoiseSchedule& sched, int steps) {
  return chunked(x, y, [&](const Matrix& part, std::span<const Condition> py) {
    return ddim_invert(model, part, py, sched, steps);
  });
}

// ---------------------------------------------------------------------------

void save_denoiser(const Denoiser& model, const NoiseSchedule& sched, const std::filesystem::path& path) {
  BinaryWriter w(kCheckpointMagic);
  w.str("denoiser");
  w.u32(static_cast<std::uint32_t>(sched.T));
  w.f64(sched.beta_start);
  w.f64(sched.beta_end);
  const auto& c = model.config();
  w.u32(static_cast<std::uint32_t>(c.dim));
  w.u32(static_cast<std::uint32_t>(c.time_features));
  w.u32(static_cast<std::uint32_t>(c.cond_features));
  w.str(to_string(c.activation));
  const auto& widths = model.net().widths();
  w.u32(static_cast<std::uint32_t>(widths.size()));
  for (int wd : widths) {
    w.u32(static_cast<std::uint32_t>(wd));
  }
  w.params(model.net().params());
  w.save(path);
}

std::pair<Denoiser, NoiseSchedule> load_denoiser(const std::filesystem::path& path) {
  auto r = BinaryReader::open(path, kCheckpointMagic);
  const auto kind_at = r.offset();
  if (r.str() != "denoiser") {
    throw FormatError("checkpoint at byte " + std::to_string(kind_at) + " is not a denoiser");
  }
  const int T = static_cast<int>(r.u32());
  const double b0 = r.f64();
  const double b1 = r.f64();
  DenoiserConfig c;
  c.dim = static_cast<int>(r.u32());
  c.time_features = static_cast<int>(r.u32());
  c.cond_features = static_cast<int>(r.u32());
  c.activation = activation_from_string(r.str());
  const std::uint32_t nw = r.u32();
  std::vector<int> widths(nw);
  for (auto& wd : widths) {
    wd = static_cast<int>(r.u32());
  }
  if (widths.size() < 2) {
    throw ParseError("denoiser checkpoint has fewer than two layer widths", r.offset());
  }
  c.hidden.assign(widths.begin() + 1, widths.end() - 1);
  Params params = r.params();
  r.expect_end();
  Denoiser model(c, Mlp(widths, c.activation, std::move(params)));
  return {std::move(model), make_schedule(T, b0, b1)};
}

} // namespace conda_dyn
