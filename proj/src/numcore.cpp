#include "conda_dyn/numcore.hpp"

#include <cmath>
#include <numeric>

namespace conda_dyn {

ParseError::ParseError(const std::string& what, std::uint64_t offset)
    : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

Matrix matmul(const Eigen::Ref<const Matrix>& a, const Eigen::Ref<const Matrix>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                     " times " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
  Matrix out = a * b;
  if (!out.allFinite()) {
    throw NumericError("matmul: non-finite entry in product");
  }
  return out;
}

// ---------------------------------------------------------------------------

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t fnv1a64(std::string_view text, std::uint64_t basis) {
  std::uint64_t h = basis;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace {
inline std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
} // namespace

Rng::Rng(std::uint64_t seed) {
  std::uint64_t sm = seed;
  for (auto& s : s_) {
    s = splitmix64(sm);
  }
}

Rng Rng::stream(std::uint64_t seed, std::string_view name) {
  std::uint64_t mixed = seed;
  std::uint64_t h = fnv1a64(name);
  return Rng(splitmix64(mixed) ^ h);
}

std::uint64_t Rng::next_u64() {
  const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
  const std::uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = 0.0;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * M_PI * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

std::size_t Rng::index(std::size_t n) {
  if (n == 0) {
    throw InputError("Rng::index: empty range");
  }
  // Lemire's multiply-shift with rejection.
  const unsigned __int128 range = n;
  while (true) {
    const std::uint64_t x = next_u64();
    const unsigned __int128 m = static_cast<unsigned __int128>(x) * range;
    const std::uint64_t low = static_cast<std::uint64_t>(m);
    if (low >= n || low >= (std::uint64_t(0) - n) % n) {
      return static_cast<std::size_t>(m >> 64);
    }
  }
}

Matrix Rng::normal_matrix(Eigen::Index rows, Eigen::Index cols) {
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) {
      m(i, j) = normal();
    }
  }
  return m;
}

// ---------------------------------------------------------------------------

Grads zeros_like(const Params& params) {
  Grads g;
  g.reserve(params.size());
  for (const auto& p : params) {
    g.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
  }
  return g;
}

std::size_t count_scalars(const Params& params) {
  return std::accumulate(params.begin(), params.end(), std::size_t{0},
                         [](std::size_t n, const Param& p) { return n + p.value.size(); });
}

AdamState::AdamState(AdamConfig config) : config_(config) {
  if (!(config_.beta1 >= 0.0 && config_.beta1 < 1.0) || !(config_.beta2 >= 0.0 && config_.beta2 < 1.0)) {
    throw ConfigError("adam: beta1 and beta2 must lie in [0, 1)");
  }
  if (!(config_.epsilon > 0.0)) {
    throw ConfigError("adam: epsilon must be positive");
  }
  if (!(config_.lr >= 0.0)) {
    throw ConfigError("adam: learning rate must be non-negative");
  }
}

void AdamState::set_learning_rate(double lr) {
  if (!(lr >= 0.0)) {
    throw ConfigError("adam: learning rate must be non-negative");
  }
  config_.lr = lr;
}

void adam_step(Params& params, const Grads& grads, AdamState& state) {
  if (params.size() != grads.size()) {
    throw ShapeError("adam_step: " + std::to_string(params.size()) + " parameter blocks but " +
                     std::to_string(grads.size()) + " gradient blocks");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].value.rows() != grads[i].rows() || params[i].value.cols() != grads[i].cols()) {
      throw ShapeError("adam_step: gradient shape mismatch for '" + params[i].name + "'");
    }
    if (!grads[i].allFinite()) {
      throw NumericError("adam_step: non-finite gradient in parameter block '" + params[i].name + "'");
    }
  }
  if (state.m_.empty()) {
    for (const auto& p : params) {
      state.m_.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
      state.v_.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
    }
  } else if (state.m_.size() != params.size()) {
    throw ShapeError("adam_step: optimizer state was built for a different parameter list");
  }

  const auto& c = state.config_;
  state.step_ += 1;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step_));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& m = state.m_[i];
    Matrix& v = state.v_[i];
    if (m.rows() != grads[i].rows() || m.cols() != grads[i].cols()) {
      throw ShapeError("adam_step: moment shape mismatch for '" + params[i].name + "'");
    }
    m = c.beta1 * m + (1.0 - c.beta1) * grads[i];
    v = c.beta2 * v + (1.0 - c.beta2) * grads[i].cwiseProduct(grads[i]);
    params[i].value.array() -=
        c.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + c.epsilon);
  }
}

// ---------------------------------------------------------------------------

double grad_check(const LossFn& loss_fn, Params params, const GradCheckOptions& options) {
  const double h = options.perturbation;
  if (!(h >= 1e-6 && h <= 1e-3)) {
    throw ConfigError("grad_check: perturbation must lie in [1e-6, 1e-3]");
  }
  Grads analytic = zeros_like(params);
  const double base = loss_fn(params, &analytic);
  if (!std::isfinite(base)) {
    throw NumericError("grad_check: loss is not finite at the base point");
  }

  // (block, flat index) pairs to probe.
  std::vector<std::pair<std::size_t, Eigen::Index>> coords;
  for (std::size_t b = 0; b < params.size(); ++b) {
    for (Eigen::Index k = 0; k < params[b].value.size(); ++k) {
      coords.emplace_back(b, k);
    }
  }
  if (options.max_coords > 0 && options.max_coords < coords.size()) {
    Rng rng = Rng::stream(options.seed, "grad_check");
    rng.shuffle(std::span(coords));
    coords.resize(options.max_coords);
  }

  double worst = 0.0;
  for (const auto& [b, k] : coords) {
    double& slot = params[b].value.data()[k];
    const double saved = slot;
    slot = saved + h;
    const double up = loss_fn(params, nullptr);
    slot = saved - h;
    const double down = loss_fn(params, nullptr);
    slot = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("grad_check: loss is not finite near parameter '" + params[b].name + "'");
    }
    const double central = (up - down) / (2.0 * h);
    const double a = analytic[b].data()[k];
    const double rel = std::abs(a - central) / (std::abs(a) + std::abs(central) + 1e-12);
    worst = std::max(worst, rel);
  }
  return worst;
}

} // namespace conda_dyn
