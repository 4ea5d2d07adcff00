#include "conda_dyn/traversal.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

namespace conda_dyn {

namespace {

// Parameter block order.
enum Block : std::size_t { wxz, wxr, wxn, whz, whr, whn, bz, br, bn, wo, bo, kBlocks };

Matrix sigmoid(const Matrix& a) {
  return (1.0 / (1.0 + (-a.array()).exp())).matrix();
}

struct StepCache {
  Matrix x, h_prev, z, r, n, h;
};

struct Cell {
  const Params& p;

  StepCache step(const Matrix& x, const Matrix& h_prev) const {
    StepCache c;
    c.x = x;
    c.h_prev = h_prev;
    c.z = sigmoid((x * p[wxz].value + h_prev * p[whz].value).rowwise() + p[bz].value.row(0));
    c.r = sigmoid((x * p[wxr].value + h_prev * p[whr].value).rowwise() + p[br].value.row(0));
    const Matrix rh = c.r.cwiseProduct(h_prev);
    c.n = ((x * p[wxn].value + rh * p[whn].value).rowwise() + p[bn].value.row(0)).array().tanh().matrix();
    c.h = (1.0 - c.z.array()).matrix().cwiseProduct(c.n) + c.z.cwiseProduct(h_prev);
    return c;
  }

  Matrix readout(const Matrix& x, const Matrix& h) const {
    return x + ((h * p[wo].value).rowwise() + p[bo].value.row(0));
  }
};

} // namespace

RecurrentPredictor::RecurrentPredictor(const RecurrentConfig& config, Rng& rng) : config_(config) {
  if (config.dim < 1 || config.hidden < 1) {
    throw ConfigError("recurrent: dimension and hidden width must be positive");
  }
  const int d = config.dim;
  const int hw = config.hidden;
  const double sx = 1.0 / std::sqrt(static_cast<double>(d));
  const double sh = 1.0 / std::sqrt(static_cast<double>(hw));
  const char* names[kBlocks] = {"wxz", "wxr", "wxn", "whz", "whr", "whn", "bz", "br", "bn", "wo", "bo"};
  params_.resize(kBlocks);
  for (std::size_t b = 0; b < kBlocks; ++b) {
    params_[b].name = std::string("recurrent.") + names[b];
  }
  params_[wxz].value = sx * rng.normal_matrix(d, hw);
  params_[wxr].value = sx * rng.normal_matrix(d, hw);
  params_[wxn].value = sx * rng.normal_matrix(d, hw);
  params_[whz].value = sh * rng.normal_matrix(hw, hw);
  params_[whr].value = sh * rng.normal_matrix(hw, hw);
  params_[whn].value = sh * rng.normal_matrix(hw, hw);
  params_[bz].value = Matrix::Zero(1, hw);
  params_[br].value = Matrix::Zero(1, hw);
  params_[bn].value = Matrix::Zero(1, hw);
  params_[wo].value = 0.1 * sh * rng.normal_matrix(hw, d);
  params_[bo].value = Matrix::Zero(1, d);
  offset_ = Vector::Zero(d);
  scale_ = Vector::Ones(d);
}

void RecurrentPredictor::set_standardization(Vector offset, Vector scale) {
  if (offset.size() != config_.dim || scale.size() != config_.dim) {
    throw ShapeError("recurrent: standardisation length differs from the dimension");
  }
  if (!(scale.array() > 0.0).all()) {
    throw InputError("recurrent: standardisation scales must be positive");
  }
  offset_ = std::move(offset);
  scale_ = std::move(scale);
}

Matrix RecurrentPredictor::standardize(const Matrix& x) const {
  if (x.cols() != config_.dim) {
    throw ShapeError("recurrent: expected rows of dimension " + std::to_string(config_.dim));
  }
  return (x.rowwise() - offset_.transpose()).array().rowwise() / scale_.transpose().array();
}

Matrix RecurrentPredictor::unstandardize(const Matrix& x) const {
  return (x.array().rowwise() * scale_.transpose().array()).matrix().rowwise() + offset_.transpose();
}

Matrix RecurrentPredictor::predict_next(const Matrix& sequence) const {
  const Matrix xs = standardize(sequence);
  const Cell cell{params_};
  Matrix h = Matrix::Zero(1, config_.hidden);
  Matrix out(xs.rows(), xs.cols());
  for (Eigen::Index t = 0; t < xs.rows(); ++t) {
    h = cell.step(xs.row(t), h).h;
    out.row(t) = cell.readout(xs.row(t), h);
  }
  return unstandardize(out);
}

Matrix RecurrentPredictor::fill(const Matrix& sequence, std::span<const bool> missing) const {
  if (static_cast<Eigen::Index>(missing.size()) != sequence.rows()) {
    throw ShapeError("recurrent fill: mask length differs from the sequence length");
  }
  if (!missing.empty() && missing[0]) {
    throw InputError("recurrent fill: the first row must be observed");
  }
  Matrix xs = standardize(sequence);
  const Cell cell{params_};
  Matrix h = Matrix::Zero(1, config_.hidden);
  for (Eigen::Index t = 0; t + 1 < xs.rows(); ++t) {
    h = cell.step(xs.row(t), h).h;
    if (missing[t + 1]) {
      xs.row(t + 1) = cell.readout(xs.row(t), h);
    }
  }
  return unstandardize(xs);
}

Matrix RecurrentPredictor::rollout(const Matrix& prefix, int steps) const {
  if (prefix.rows() < 1) {
    throw InputError("recurrent rollout: empty prefix");
  }
  Matrix seq(prefix.rows() + steps, config_.dim);
  seq.topRows(prefix.rows()) = prefix;
  seq.bottomRows(steps).setZero();
  const std::unique_ptr<bool[]> mask(new bool[seq.rows()]);
  for (Eigen::Index i = 0; i < seq.rows(); ++i) {
    mask[i] = i >= prefix.rows();
  }
  return fill(seq, std::span<const bool>(mask.get(), static_cast<std::size_t>(seq.rows())))
      .bottomRows(steps);
}

// ---------------------------------------------------------------------------

double recurrent_loss(const RecurrentPredictor& model, std::span<const Matrix> sequences, Grads* grads) {
  if (sequences.empty()) {
    throw InputError("recurrent_loss: no sequences");
  }
  const Eigen::Index len = sequences.front().rows();
  const Eigen::Index d = model.config().dim;
  if (len < 2) {
    throw InputError("recurrent_loss: sequences need at least 2 rows");
  }
  const Eigen::Index batch = static_cast<Eigen::Index>(sequences.size());
  // Per time step, a batch x dim matrix.
  std::vector<Matrix> xs(len, Matrix(batch, d));
  for (Eigen::Index b = 0; b < batch; ++b) {
    if (sequences[b].rows() != len) {
      throw ShapeError("recurrent_loss: sequences in one batch must share a length");
    }
    const Matrix s = model.standardize(sequences[b]);
    for (Eigen::Index t = 0; t < len; ++t) {
      xs[t].row(b) = s.row(t);
    }
  }
  const Params& p = model.params();
  const Cell cell{p};
  std::vector<StepCache> cache;
  cache.reserve(len - 1);
  std::vector<Matrix> diffs;
  diffs.reserve(len - 1);
  Matrix h = Matrix::Zero(batch, model.config().hidden);
  double total = 0.0;
  for (Eigen::Index t = 0; t + 1 < len; ++t) {
    cache.push_back(cell.step(xs[t], h));
    h = cache.back().h;
    diffs.push_back(cell.readout(xs[t], h) - xs[t + 1]);
    total += diffs.back().squaredNorm();
  }
  const double count = static_cast<double>(batch * (len - 1));
  const double loss = total / count;
  if (grads == nullptr) {
    return loss;
  }

  Grads& g = *grads;
  Matrix dh_next = Matrix::Zero(batch, model.config().hidden);
  for (Eigen::Index t = len - 2; t >= 0; --t) {
    const StepCache& c = cache[t];
    const Matrix dout = (2.0 / count) * diffs[t];
    g[wo] += c.h.transpose() * dout;
    g[bo] += dout.colwise().sum();
    const Matrix dh = dh_next + dout * p[wo].value.transpose();

    const Matrix dn = dh.cwiseProduct((1.0 - c.z.array()).matrix());
    const Matrix dz = dh.cwiseProduct(c.h_prev - c.n);
    Matrix dh_prev = dh.cwiseProduct(c.z);

    const Matrix dan = dn.cwiseProduct((1.0 - c.n.array().square()).matrix());
    const Matrix rh = c.r.cwiseProduct(c.h_prev);
    g[wxn] += c.x.transpose() * dan;
    g[whn] += rh.transpose() * dan;
    g[bn] += dan.colwise().sum();
    const Matrix drh = dan * p[whn].value.transpose();
    const Matrix dr = drh.cwiseProduct(c.h_prev);
    dh_prev += drh.cwiseProduct(c.r);

    const Matrix daz = dz.cwiseProduct(c.z.cwiseProduct((1.0 - c.z.array()).matrix()));
    g[wxz] += c.x.transpose() * daz;
    g[whz] += c.h_prev.transpose() * daz;
    g[bz] += daz.colwise().sum();
    dh_prev += daz * p[whz].value.transpose();

    const Matrix dar = dr.cwiseProduct(c.r.cwiseProduct((1.0 - c.r.array()).matrix()));
    g[wxr] += c.x.transpose() * dar;
    g[whr] += c.h_prev.transpose() * dar;
    g[br] += dar.colwise().sum();
    dh_prev += dar * p[whr].value.transpose();

    dh_next = dh_prev;
  }
  return loss;
}

RecurrentCurve train_recurrent(RecurrentPredictor& model, std::span<const Matrix> sequences,
                               const RecurrentTrainConfig& config) {
  if (sequences.empty()) {
    throw InputError("train_recurrent: no sequences");
  }
  if (config.epochs < 1 || config.batch < 1) {
    throw ConfigError("recurrent: epochs and batch must be positive");
  }
  const Eigen::Index d = model.config().dim;
  Eigen::Index rows = 0;
  Vector sum = Vector::Zero(d);
  for (const auto& s : sequences) {
    if (s.rows() < 3) {
      throw InputError("train_recurrent: sequences need at least 3 rows");
    }
    if (s.cols() != d) {
      throw ShapeError("train_recurrent: sequence dimension differs from the model");
    }
    sum += s.colwise().sum().transpose();
    rows += s.rows();
  }
  const Vector mean = sum / static_cast<double>(rows);
  Vector var = Vector::Zero(d);
  for (const auto& s : sequences) {
    var += (s.rowwise() - mean.transpose()).array().square().matrix().colwise().sum().transpose();
  }
  Vector scale = (var / static_cast<double>(rows)).cwiseSqrt();
  for (Eigen::Index k = 0; k < d; ++k) {
    if (!(scale[k] > 1e-12)) {
      scale[k] = 1.0;
    }
  }
  model.set_standardization(mean, scale);

  // Batches only mix sequences of equal length.
  std::vector<std::size_t> order(sequences.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = Rng::stream(config.seed, "recurrent.train");
  AdamState adam(config.adam);
  RecurrentCurve curve;
  double initial = -1.0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(std::span(order));
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return sequences[a].rows() < sequences[b].rows(); });
    double epoch_loss = 0.0;
    int batches = 0;
    std::size_t i = 0;
    while (i < order.size()) {
      std::vector<Matrix> batch;
      const Eigen::Index len = sequences[order[i]].rows();
      while (i < order.size() && static_cast<int>(batch.size()) < config.batch && sequences[order[i]].rows() == len) {
        batch.push_back(sequences[order[i]]);
        ++i;
      }
      Grads g = zeros_like(model.params());
      const double loss = recurrent_loss(model, batch, &g);
      if (initial < 0.0) {
        initial = loss;
      }
      if (!std::isfinite(loss) || loss > 10.0 * std::max(initial, 1e-12)) {
        throw NumericError("train_recurrent: diverged at epoch " + std::to_string(epoch) + " (loss " +
                           std::to_string(loss) + ")");
      }
      double norm2 = 0.0;
      for (const auto& m : g) {
        norm2 += m.squaredNorm();
      }
      const double norm = std::sqrt(norm2);
      if (config.clip_norm > 0.0 && norm > config.clip_norm) {
        for (auto& m : g) {
          m *= config.clip_norm / norm;
        }
      }
      adam_step(model.params(), g, adam);
      epoch_loss += loss;
      ++batches;
    }
    curve.epoch_loss.push_back(epoch_loss / batches);
  }
  return curve;
}

} // namespace conda_dyn
