#include "conda_dyn/dynsim.hpp"

#include "conda_dyn/binio.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace conda_dyn {

namespace {
constexpr char kDatasetMagic[] = "CDYNDSET";
constexpr int kRecoverIterations = 60;

// Bump geometry as fractions of the grid size.
constexpr double kCenterGain1 = 0.30;
constexpr double kWidth1 = 0.12;
constexpr double kAmp1 = 1.0;
constexpr double kCenterGain2 = 0.25;
constexpr double kWidth2 = 0.08;
constexpr double kAmp2 = 0.6;
} // namespace

const char* to_string(Split s) {
  switch (s) {
  case Split::train:
    return "train";
  case Split::val:
    return "val";
  case Split::test:
    return "test";
  }
  return "?";
}

// ---------------------------------------------------------------------------

OscillatorMap::OscillatorMap(Matrix q, Matrix w, double amplitude)
    : q_(std::move(q)), w_(std::move(w)), amplitude_(amplitude) {
  if (q_.cols() != 2 || w_.cols() != 2 || q_.rows() != w_.rows()) {
    throw ShapeError("OscillatorMap: Q and W must both be D x 2");
  }
}

OscillatorMap OscillatorMap::from_seed(std::uint64_t seed, int dim, double amplitude) {
  if (dim < 2) {
    throw ConfigError("dataset.dim: must be at least 2");
  }
  Rng rng = Rng::stream(seed, "dynsim.map");
  Matrix g = rng.normal_matrix(dim, 2);
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ() * Matrix::Identity(dim, 2);
  Matrix w = rng.normal_matrix(dim, 2);
  // Keep s -> Q^T(x - a tanh(W s)) a contraction so recover() converges.
  if (amplitude > 0.0) {
    const double norm = Eigen::JacobiSVD<Matrix>(w).singularValues()(0);
    if (amplitude * norm > 0.5) {
      w *= 0.5 / (amplitude * norm);
    }
  }
  return OscillatorMap(std::move(q), std::move(w), amplitude);
}

Vector OscillatorMap::embed(const Eigen::Ref<const Vector>& s) const {
  return q_ * s + amplitude_ * (w_ * s).array().tanh().matrix();
}

Vector OscillatorMap::recover(const Eigen::Ref<const Vector>& x) const {
  const Vector proj = q_.transpose() * x;
  Vector s = proj;
  for (int it = 0; it < kRecoverIterations; ++it) {
    s = proj - amplitude_ * (q_.transpose() * (w_ * s).array().tanh().matrix());
  }
  return s;
}

OscillatorDynamics dynamics_for(const OscillatorSpec& spec, double mu) {
  const double span = spec.mu_hi - spec.mu_lo;
  const double u = span > 0.0 ? (mu - spec.mu_lo) / span : 0.5;
  OscillatorDynamics d{};
  d.omega = 2.0 * M_PI * spec.periods * (0.8 + 0.4 * u);
  if (mu < spec.threshold()) {
    d.zeta = spec.decay * (1.0 + (span > 0.0 ? (spec.threshold() - mu) / span : 0.0));
  } else {
    d.zeta = 0.0;
  }
  return d;
}

int class_for(const OscillatorSpec& spec, double mu) { return mu < spec.threshold() ? 0 : 1; }

Vector oscillator_latent(double zeta, double omega, double t) {
  const double env = std::exp(-zeta * t);
  Vector s(2);
  s << env * std::cos(omega * t), env * std::sin(omega * t);
  return s;
}

// ---------------------------------------------------------------------------

std::vector<std::size_t> Dataset::indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < splits.size(); ++i) {
    if (splits[i] == s) {
      out.push_back(i);
    }
  }
  return out;
}

std::size_t Dataset::frame_count() const {
  return std::accumulate(trajectories.begin(), trajectories.end(), std::size_t{0},
                         [](std::size_t n, const Trajectory& t) { return n + t.size(); });
}

bool Dataset::operator==(const Dataset& other) const {
  if (!(map == other.map) || splits != other.splits || trajectories.size() != other.trajectories.size()) {
    return false;
  }
  const auto& a = spec;
  const auto& b = other.spec;
  if (a.n_traj != b.n_traj || a.frames != b.frames || a.mu_lo != b.mu_lo || a.mu_hi != b.mu_hi ||
      a.dim != b.dim || a.seed != b.seed || a.n_test != b.n_test || a.n_val != b.n_val ||
      a.periods != b.periods || a.decay != b.decay || a.perturbation != b.perturbation) {
    return false;
  }
  for (std::size_t i = 0; i < trajectories.size(); ++i) {
    const auto& ta = trajectories[i];
    const auto& tb = other.trajectories[i];
    if (ta.alpha != tb.alpha || ta.frames.size() != tb.frames.size()) {
      return false;
    }
    for (std::size_t f = 0; f < ta.frames.size(); ++f) {
      if (ta.frames[f].x != tb.frames[f].x || !(ta.frames[f].condition == tb.frames[f].condition)) {
        return false;
      }
    }
  }
  return true;
}

Dataset generate_oscillator(const OscillatorSpec& spec) {
  if (spec.dim < 2) {
    throw ConfigError("dataset.dim: must be at least 2");
  }
  if (spec.n_traj < 2) {
    throw ConfigError("dataset.n_traj: need at least 2 trajectories");
  }
  if (spec.frames < 8) {
    throw ConfigError("dataset.frames: need at least 8 frames per trajectory");
  }
  if (!(spec.mu_lo <= spec.mu_hi) || !std::isfinite(spec.mu_lo) || !std::isfinite(spec.mu_hi)) {
    throw ConfigError("dataset.mu_range: lower bound must not exceed upper bound");
  }
  if (spec.n_test < 0 || spec.n_val < 0 || spec.n_test + spec.n_val >= spec.n_traj) {
    throw ConfigError("dataset.n_test: test and validation counts must leave training trajectories");
  }

  Dataset ds;
  ds.spec = spec;
  ds.map = OscillatorMap::from_seed(spec.seed, spec.dim, spec.perturbation);
  ds.trajectories.resize(spec.n_traj);
  const int frames = spec.frames;
  for (int i = 0; i < spec.n_traj; ++i) {
    Rng rng = Rng::stream(spec.seed, "dynsim.trajectory." + std::to_string(i));
    const double mu = rng.uniform(spec.mu_lo, spec.mu_hi);
    const auto dyn = dynamics_for(spec, mu);
    const int label = class_for(spec, mu);
    Trajectory& traj = ds.trajectories[i];
    traj.frames.reserve(frames);
    traj.alpha.reserve(frames);
    for (int f = 0; f < frames; ++f) {
      const double tau = static_cast<double>(f) / (frames - 1);
      traj.alpha.push_back(tau);
      StateFrame frame;
      frame.x = ds.map.embed(oscillator_latent(dyn.zeta, dyn.omega, tau));
      frame.condition = Condition{tau, mu, label};
      traj.frames.push_back(std::move(frame));
    }
  }

  // Blocked split: whole trajectories go to one split.
  std::vector<std::size_t> order(spec.n_traj);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng split_rng = Rng::stream(spec.seed, "dynsim.split");
  split_rng.shuffle(std::span(order));
  ds.splits.assign(spec.n_traj, Split::train);
  for (int k = 0; k < spec.n_test; ++k) {
    ds.splits[order[k]] = Split::test;
  }
  for (int k = 0; k < spec.n_val; ++k) {
    ds.splits[order[spec.n_test + k]] = Split::val;
  }
  return ds;
}

bool labels_consistent(const Dataset& ds) {
  for (const auto& traj : ds.trajectories) {
    for (const auto& f : traj.frames) {
      if (!f.condition.class_label || *f.condition.class_label != class_for(ds.spec, f.condition.mu)) {
        return false;
      }
    }
  }
  return true;
}

// ---------------------------------------------------------------------------

std::vector<std::uint8_t> serialize_dataset(const Dataset& ds) {
  BinaryWriter w(kDatasetMagic);
  const auto& s = ds.spec;
  w.u32(static_cast<std::uint32_t>(s.dim));
  w.u32(static_cast<std::uint32_t>(s.frames));
  w.u32(static_cast<std::uint32_t>(s.n_traj));
  w.u64(s.seed);
  w.f64(s.mu_lo);
  w.f64(s.mu_hi);
  w.u32(static_cast<std::uint32_t>(s.n_test));
  w.u32(static_cast<std::uint32_t>(s.n_val));
  w.f64(s.periods);
  w.f64(s.decay);
  w.f64(s.perturbation);
  w.matrix(ds.map.q());
  w.matrix(ds.map.w());
  w.f64(ds.map.amplitude());
  w.u32(static_cast<std::uint32_t>(ds.trajectories.size()));
  for (std::size_t i = 0; i < ds.trajectories.size(); ++i) {
    const auto& traj = ds.trajectories[i];
    w.u8(static_cast<std::uint8_t>(ds.splits[i]));
    w.u32(static_cast<std::uint32_t>(traj.frames.size()));
    for (std::size_t f = 0; f < traj.frames.size(); ++f) {
      const auto& fr = traj.frames[f];
      w.f64(traj.alpha[f]);
      w.f64(fr.condition.tau);
      w.f64(fr.condition.mu);
      w.u8(fr.condition.class_label ? 1 : 0);
      w.u8(static_cast<std::uint8_t>(fr.condition.class_label.value_or(0)));
      w.u32(static_cast<std::uint32_t>(fr.x.size()));
      for (Eigen::Index k = 0; k < fr.x.size(); ++k) {
        w.f64(fr.x(k));
      }
    }
  }
  return w.bytes();
}

Dataset deserialize_dataset(std::vector<std::uint8_t> bytes) {
  BinaryReader r(std::move(bytes), kDatasetMagic);
  Dataset ds;
  auto& s = ds.spec;
  s.dim = static_cast<int>(r.u32());
  s.frames = static_cast<int>(r.u32());
  s.n_traj = static_cast<int>(r.u32());
  s.seed = r.u64();
  s.mu_lo = r.f64();
  s.mu_hi = r.f64();
  s.n_test = static_cast<int>(r.u32());
  s.n_val = static_cast<int>(r.u32());
  s.periods = r.f64();
  s.decay = r.f64();
  s.perturbation = r.f64();
  Matrix q = r.matrix();
  Matrix wm = r.matrix();
  const double amp = r.f64();
  if (q.rows() != s.dim || q.cols() != 2 || wm.rows() != s.dim || wm.cols() != 2) {
    throw ParseError("embedding map shape does not match declared dimension", r.offset());
  }
  ds.map = OscillatorMap(std::move(q), std::move(wm), amp);
  const std::uint32_t n = r.u32();
  if (n != static_cast<std::uint32_t>(s.n_traj)) {
    throw ParseError("trajectory count does not match header", r.offset());
  }
  ds.trajectories.resize(n);
  ds.splits.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto at = r.offset();
    const std::uint8_t split = r.u8();
    if (split > 2) {
      throw ParseError("invalid split tag", at);
    }
    ds.splits[i] = static_cast<Split>(split);
    const std::uint32_t frames = r.u32();
    auto& traj = ds.trajectories[i];
    traj.frames.resize(frames);
    traj.alpha.resize(frames);
    for (std::uint32_t f = 0; f < frames; ++f) {
      traj.alpha[f] = r.f64();
      auto& fr = traj.frames[f];
      fr.condition.tau = r.f64();
      fr.condition.mu = r.f64();
      const bool has_label = r.u8() != 0;
      const int label = r.u8();
      if (has_label) {
        fr.condition.class_label = label;
      }
      const auto dim_at = r.offset();
      const std::uint32_t dim = r.u32();
      if (dim != static_cast<std::uint32_t>(s.dim)) {
        throw ParseError("frame dimension does not match header", dim_at);
      }
      fr.x.resize(dim);
      for (std::uint32_t k = 0; k < dim; ++k) {
        fr.x(k) = r.f64();
      }
    }
  }
  r.expect_end();
  return ds;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  write_file_bytes(path, serialize_dataset(ds));
}

Dataset load_dataset(const std::filesystem::path& path) { return deserialize_dataset(read_file_bytes(path)); }

// ---------------------------------------------------------------------------

Image render_bumps(std::span<const Bump> bumps, int grid) {
  if (grid < 8) {
    throw ConfigError("render: grid must be at least 8");
  }
  Image img = Image::Zero(grid, grid);
  for (const Bump& b : bumps) {
    const double inv = 1.0 / (2.0 * b.width * b.width);
    for (int i = 0; i < grid; ++i) {
      const double dy = i - b.cy;
      for (int j = 0; j < grid; ++j) {
        const double dx = j - b.cx;
        img(i, j) += b.amplitude * std::exp(-(dx * dx + dy * dy) * inv);
      }
    }
  }
  return img.cwiseMax(0.0).cwiseMin(1.0);
}

Image render_latent(const Eigen::Ref<const Vector>& s, int grid) {
  const double g = grid;
  const double r = std::min(1.0, s.norm());
  const Bump bumps[2] = {
      {g / 2 + kCenterGain1 * g * s(0), g / 2 + kCenterGain1 * g * s(1), kAmp1 * r, kWidth1 * g},
      {g / 2 - kCenterGain2 * g * s(1), g / 2 + kCenterGain2 * g * s(0), kAmp2 * r, kWidth2 * g},
  };
  return render_bumps(bumps, grid);
}

Image render_state(const Eigen::Ref<const Vector>& x, const OscillatorMap& map, int grid) {
  return render_latent(map.recover(x), grid);
}

Image render(const StateFrame& frame, const OscillatorMap& map, int grid) {
  return render_state(frame.x, map, grid);
}

double render_lipschitz_bound() {
  // |grad_s (a G)| <= |grad a| + a_max * max|grad_c G| * |dc/ds|, with
  // max_u u exp(-u^2/2) / w = 1 / (w sqrt(e)); all lengths scale with grid.
  const double e = std::sqrt(std::exp(1.0));
  return kAmp1 + kAmp1 * kCenterGain1 / (kWidth1 * e) + kAmp2 + kAmp2 * kCenterGain2 / (kWidth2 * e);
}

} // namespace conda_dyn
