#include "conda_dyn/analysis.hpp"

#include "conda_dyn/parallel.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace conda_dyn {

// PCA --------------------------------------------------------------------

PcaModel fit_pca(const Matrix& data, int d) {
  const Eigen::Index n = data.rows();
  const Eigen::Index dim = data.cols();
  if (d < 1 || d > dim) {
    throw ConfigError("pca.d: must lie in [1, " + std::to_string(dim) + "]");
  }
  if (n <= d) {
    throw InputError("fit_pca: need more samples (" + std::to_string(n) + ") than components (" +
                     std::to_string(d) + ")");
  }
  PcaModel m;
  m.mean = data.colwise().mean().transpose();
  const Matrix centered = data.rowwise() - m.mean.transpose();
  const Matrix cov = centered.transpose() * centered / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
  if (eig.info() != Eigen::Success) {
    throw NumericError("fit_pca: eigendecomposition failed");
  }
  // Eigenvalues ascend; take the last d in reverse.
  m.components.resize(dim, d);
  m.variances.resize(d);
  for (int k = 0; k < d; ++k) {
    m.components.col(k) = eig.eigenvectors().col(dim - 1 - k);
    m.variances[k] = std::max(0.0, eig.eigenvalues()[dim - 1 - k]);
  }
  const double top = std::max(eig.eigenvalues()[dim - 1], 0.0);
  for (int k = 0; k < d; ++k) {
    if (m.variances[k] <= 1e-12 * std::max(top, 1e-300)) {
      m.warning = "fit_pca: component " + std::to_string(k) + " and beyond carry zero variance";
      break;
    }
  }
  return m;
}

Matrix pca_project(const PcaModel& model, const Matrix& data) {
  if (data.cols() != model.mean.size()) {
    throw ShapeError("pca_project: dimension mismatch");
  }
  return (data.rowwise() - model.mean.transpose()) * model.components;
}

Matrix pca_reconstruct(const PcaModel& model, const Matrix& codes) {
  if (codes.cols() != model.components.cols()) {
    throw ShapeError("pca_reconstruct: code dimension mismatch");
  }
  return (codes * model.components.transpose()).rowwise() + model.mean.transpose();
}

// SVM --------------------------------------------------------------------

std::string to_string(SvmKernel k) { return k == SvmKernel::linear ? "linear" : "rbf"; }

SvmKernel svm_kernel_from_string(const std::string& s) {
  if (s == "linear") {
    return SvmKernel::linear;
  }
  if (s == "rbf") {
    return SvmKernel::rbf;
  }
  throw ConfigError("svm.kernel: unknown kernel '" + s + "' (expected linear or rbf)");
}

namespace {

Matrix standardized(const SvmModel& m, const Matrix& x) {
  if (x.cols() != m.offset.size()) {
    throw ShapeError("svm: expected " + std::to_string(m.offset.size()) + " features, got " +
                     std::to_string(x.cols()));
  }
  return (x.rowwise() - m.offset.transpose()).array().rowwise() / m.scale.transpose().array();
}

double rbf(double gamma, const Eigen::Ref<const Vector>& a, const Eigen::Ref<const Vector>& b) {
  return std::exp(-gamma * (a - b).squaredNorm());
}

} // namespace

SvmModel train_svm(const Matrix& points, std::span<const int> labels, const SvmConfig& config) {
  const Eigen::Index n = points.rows();
  if (static_cast<Eigen::Index>(labels.size()) != n || n == 0) {
    throw InputError("train_svm: points and labels are empty or misaligned");
  }
  const auto pos = std::count(labels.begin(), labels.end(), 1);
  const auto neg = std::count(labels.begin(), labels.end(), 0);
  if (pos + neg != n) {
    throw InputError("train_svm: labels must be 0 or 1");
  }
  if (pos == 0 || neg == 0) {
    throw InputError("train_svm: both classes must be present");
  }
  if (!(config.lambda > 0.0) || config.steps < 1) {
    throw ConfigError("svm: lambda and steps must be positive");
  }
  SvmModel m;
  m.kernel = config.kernel;
  m.lambda = config.lambda;
  m.offset = points.colwise().mean().transpose();
  m.scale = ((points.rowwise() - m.offset.transpose()).array().square().colwise().sum() / static_cast<double>(n))
                .sqrt()
                .transpose();
  for (Eigen::Index k = 0; k < m.scale.size(); ++k) {
    if (!(m.scale[k] > 1e-12)) {
      m.scale[k] = 1.0;
    }
  }
  const Matrix x = standardized(m, points);
  Vector y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    y[i] = labels[i] == 1 ? 1.0 : -1.0;
  }
  Rng rng = Rng::stream(config.seed, "svm.train");
  const double lambda = config.lambda;
  const long steps = config.steps;

  if (config.kernel == SvmKernel::linear) {
    // Bias folded in as a constant feature; iterates averaged over the second half.
    const Eigen::Index dim = x.cols() + 1;
    Vector w = Vector::Zero(dim);
    Vector avg = Vector::Zero(dim);
    long averaged = 0;
    Vector xi(dim);
    for (long t = 1; t <= steps; ++t) {
      const Eigen::Index i = static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(n)));
      xi.head(x.cols()) = x.row(i).transpose();
      xi[dim - 1] = 1.0;
      const double eta = 1.0 / (lambda * static_cast<double>(t));
      const double margin = y[i] * w.dot(xi);
      w *= 1.0 - eta * lambda;
      if (margin < 1.0) {
        w += eta * y[i] * xi;
      }
      if (t > steps / 2) {
        avg += w;
        ++averaged;
      }
    }
    avg /= static_cast<double>(std::max<long>(averaged, 1));
    m.weights = avg.head(x.cols());
    m.bias = avg[dim - 1];
    return m;
  }

  m.gamma = config.gamma > 0.0 ? config.gamma : 1.0 / static_cast<double>(x.cols());
  // Kernel K + 1 so the constant part acts as the bias.
  Matrix gram(n, n);
  parallel_for(static_cast<std::size_t>(n), [&](std::size_t r) {
    const Eigen::Index i = static_cast<Eigen::Index>(r);
    for (Eigen::Index j = 0; j < n; ++j) {
      gram(j, i) = rbf(m.gamma, x.row(i).transpose(), x.row(j).transpose()) + 1.0;
    }
  });
  Vector counts = Vector::Zero(n);
  Vector sums = Vector::Zero(n);  // sum_j counts_j y_j gram(:, j)
  for (long t = 1; t <= steps; ++t) {
    const Eigen::Index i = static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(n)));
    const double f = sums[i] / (lambda * static_cast<double>(t));
    if (y[i] * f < 1.0) {
      counts[i] += 1.0;
      sums += y[i] * gram.col(i);
    }
  }
  m.coef = counts.cwiseProduct(y) / (lambda * static_cast<double>(steps));
  m.bias = m.coef.sum();
  m.support = x;
  return m;
}

Vector svm_decision(const SvmModel& model, const Matrix& points) {
  const Matrix x = standardized(model, points);
  if (model.kernel == SvmKernel::linear) {
    return (x * model.weights).array() + model.bias;
  }
  Vector out(x.rows());
  parallel_for(static_cast<std::size_t>(x.rows()), [&](std::size_t r) {
    const Eigen::Index i = static_cast<Eigen::Index>(r);
    double s = model.bias;
    for (Eigen::Index j = 0; j < model.support.rows(); ++j) {
      if (model.coef[j] != 0.0) {
        s += model.coef[j] * rbf(model.gamma, x.row(i).transpose(), model.support.row(j).transpose());
      }
    }
    out[i] = s;
  });
  return out;
}

std::vector<int> svm_predict(const SvmModel& model, const Matrix& points) {
  const Vector d = svm_decision(model, points);
  std::vector<int> out(d.size());
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    out[i] = d[i] > 0.0 ? 1 : 0;
  }
  return out;
}

double roc_auc(std::span<const double> score, std::span<const int> labels) {
  const std::size_t n = score.size();
  if (labels.size() != n) {
    throw ShapeError("roc_auc: scores and labels differ in length");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return score[a] < score[b]; });
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && score[order[j + 1]] == score[order[i]]) {
      ++j;
    }
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) {
      rank[order[k]] = mid;
    }
    i = j + 1;
  }
  double pos = 0.0;
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] == 1) {
      pos += 1.0;
      rank_sum += rank[i];
    }
  }
  const double neg = static_cast<double>(n) - pos;
  if (pos == 0.0 || neg == 0.0) {
    throw InputError("roc_auc: both classes must be present");
  }
  return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

ClassifierScore svm_score(std::span<const double> decision, std::span<const int> labels) {
  if (decision.size() != labels.size() || decision.empty()) {
    throw ShapeError("svm_score: decisions and labels are empty or differ in length");
  }
  double tp = 0.0;
  double fp = 0.0;
  double fn = 0.0;
  double correct = 0.0;
  for (std::size_t i = 0; i < decision.size(); ++i) {
    const int pred = decision[i] > 0.0 ? 1 : 0;
    correct += pred == labels[i] ? 1.0 : 0.0;
    tp += pred == 1 && labels[i] == 1 ? 1.0 : 0.0;
    fp += pred == 1 && labels[i] == 0 ? 1.0 : 0.0;
    fn += pred == 0 && labels[i] == 1 ? 1.0 : 0.0;
  }
  ClassifierScore s;
  s.accuracy = correct / static_cast<double>(decision.size());
  s.f1 = (2.0 * tp + fp + fn) > 0.0 ? 2.0 * tp / (2.0 * tp + fp + fn) : 0.0;
  s.auc = roc_auc(decision, labels);
  return s;
}

// KDE --------------------------------------------------------------------

std::size_t KdeGrid::size() const {
  std::size_t n = 1;
  for (int c : count) {
    n *= static_cast<std::size_t>(c);
  }
  return n;
}

Vector KdeGrid::node(std::size_t flat) const {
  Vector u(lo.size());
  for (Eigen::Index k = 0; k < lo.size(); ++k) {
    const std::size_t c = static_cast<std::size_t>(count[k]);
    u[k] = lo[k] + step[k] * static_cast<double>(flat % c);
    flat /= c;
  }
  return u;
}

double scott_bandwidth(const Matrix& class0, const Matrix& class1) {
  Matrix pooled(class0.rows() + class1.rows(), class0.cols());
  pooled << class0, class1;
  const Eigen::Index n = pooled.rows();
  const Eigen::Index d = pooled.cols();
  if (n < 2) {
    throw InputError("scott_bandwidth: need at least 2 samples");
  }
  const Matrix centered = pooled.rowwise() - pooled.colwise().mean();
  const double mean_std =
      (centered.array().square().colwise().sum() / static_cast<double>(n - 1)).sqrt().mean();
  const double h = std::pow(static_cast<double>(n), -1.0 / (static_cast<double>(d) + 4.0)) * mean_std;
  return h > 0.0 ? h : 1.0;
}

KdeGrid kde_auto_grid(const Matrix& class0, const Matrix& class1, double bandwidth, double margin_bandwidths,
                      int max_nodes_per_axis) {
  const Eigen::Index d = class0.cols();
  KdeGrid g;
  g.lo.resize(d);
  g.step.resize(d);
  g.count.resize(d);
  for (Eigen::Index k = 0; k < d; ++k) {
    const double lo = std::min(class0.col(k).minCoeff(), class1.col(k).minCoeff()) - margin_bandwidths * bandwidth;
    const double hi = std::max(class0.col(k).maxCoeff(), class1.col(k).maxCoeff()) + margin_bandwidths * bandwidth;
    // Aim for spacing h/2 but never exceed h.
    int nodes = static_cast<int>(std::ceil((hi - lo) / (0.5 * bandwidth))) + 1;
    nodes = std::min(nodes, max_nodes_per_axis);
    nodes = std::max(nodes, static_cast<int>(std::ceil((hi - lo) / bandwidth)) + 1);
    g.lo[k] = lo;
    g.count[k] = nodes;
    g.step[k] = (hi - lo) / (nodes - 1);
  }
  return g;
}

double kde_density(const Matrix& samples, double bandwidth, const Eigen::Ref<const Vector>& u) {
  const double d = static_cast<double>(samples.cols());
  const double norm = std::pow(2.0 * M_PI, -0.5 * d) * std::pow(bandwidth, -d) / static_cast<double>(samples.rows());
  const double inv = 1.0 / (2.0 * bandwidth * bandwidth);
  double s = 0.0;
  for (Eigen::Index i = 0; i < samples.rows(); ++i) {
    s += std::exp(-(samples.row(i).transpose() - u).squaredNorm() * inv);
  }
  return s * norm;
}

KdeModel kde_fit(const Matrix& class0, const Matrix& class1, double bandwidth, const KdeGrid& grid) {
  if (class0.rows() == 0 || class1.rows() == 0) {
    throw InputError("kde_fit: each class needs at least one sample");
  }
  if (class0.cols() != class1.cols()) {
    throw ShapeError("kde_fit: classes differ in dimension");
  }
  const Eigen::Index d = class0.cols();
  if (d < 1 || d > 3) {
    throw ConfigError("kde: embedding dimension must lie in [1, 3], got " + std::to_string(d));
  }
  if (!(bandwidth > 0.0)) {
    throw ConfigError("kde.bandwidth: must be positive");
  }
  if (grid.lo.size() != d || grid.step.size() != d || static_cast<Eigen::Index>(grid.count.size()) != d) {
    throw ShapeError("kde_fit: grid dimension mismatch");
  }
  for (Eigen::Index k = 0; k < d; ++k) {
    if (grid.count[k] < 2 || !(grid.step[k] > 0.0)) {
      throw ConfigError("kde.grid: each axis needs at least 2 nodes and positive spacing");
    }
    if (grid.step[k] > bandwidth) {
      throw ConfigError("kde.grid: node spacing " + std::to_string(grid.step[k]) + " exceeds the bandwidth " +
                        std::to_string(bandwidth));
    }
    const double lo = grid.lo[k];
    const double hi = lo + grid.step[k] * (grid.count[k] - 1);
    const double smin = std::min(class0.col(k).minCoeff(), class1.col(k).minCoeff());
    const double smax = std::max(class0.col(k).maxCoeff(), class1.col(k).maxCoeff());
    if (smin - lo < 2.0 * bandwidth - 1e-12 || hi - smax < 2.0 * bandwidth - 1e-12) {
      throw ConfigError("kde.grid: grid must extend at least 2 bandwidths beyond the samples");
    }
  }
  KdeModel m;
  m.class0 = class0;
  m.class1 = class1;
  m.bandwidth = bandwidth;
  m.grid = grid;
  const std::size_t nodes = grid.size();
  m.density0.resize(static_cast<Eigen::Index>(nodes));
  m.density1.resize(static_cast<Eigen::Index>(nodes));
  parallel_for(nodes, [&](std::size_t i) {
    const Vector u = grid.node(i);
    m.density0[static_cast<Eigen::Index>(i)] = kde_density(class0, bandwidth, u);
    m.density1[static_cast<Eigen::Index>(i)] = kde_density(class1, bandwidth, u);
  });
  m.delta = m.density1 - m.density0;
  Eigen::Index i1 = 0;
  Eigen::Index i0 = 0;
  m.delta.maxCoeff(&i1);
  m.delta.minCoeff(&i0);
  m.peak1 = grid.node(static_cast<std::size_t>(i1));
  m.peak0 = grid.node(static_cast<std::size_t>(i0));
  const double scale = std::max(m.density0.maxCoeff(), m.density1.maxCoeff());
  m.degenerate = m.delta.cwiseAbs().maxCoeff() <= 1e-9 * scale || i0 == i1;
  return m;
}

KdeModel kde_fit(const Matrix& class0, const Matrix& class1, double bandwidth) {
  const double h = bandwidth > 0.0 ? bandwidth : scott_bandwidth(class0, class1);
  return kde_fit(class0, class1, h, kde_auto_grid(class0, class1, h));
}

Vector kde_traverse(const KdeModel& model, double eta) {
  if (!(eta >= 0.0 && eta <= 1.0)) {
    throw InputError("kde_traverse: eta must lie in [0, 1]");
  }
  if (model.degenerate) {
    throw InputError("kde_traverse: class densities do not separate; peaks are degenerate");
  }
  // Written as a convex combination so swapping the classes and eta -> 1 - eta
  // reproduces the same point bit for bit.
  return (1.0 - eta) * model.peak0 + eta * model.peak1;
}

// Orthogonality probe ----------------------------------------------------

ProbeResult orthogonality_probe(const Matrix& embeddings, std::span<const double> taus, std::span<const double> mus) {
  const Eigen::Index n = embeddings.rows();
  const Eigen::Index d = embeddings.cols();
  if (static_cast<Eigen::Index>(taus.size()) != n || static_cast<Eigen::Index>(mus.size()) != n) {
    throw ShapeError("orthogonality_probe: embedding and target counts differ");
  }
  if (n < d + 2) {
    throw InputError("orthogonality_probe: need at least d + 2 samples");
  }
  const Vector t = Eigen::Map<const Vector>(taus.data(), n);
  const Vector u = Eigen::Map<const Vector>(mus.data(), n);
  if (t.maxCoeff() == t.minCoeff() || u.maxCoeff() == u.minCoeff()) {
    throw InputError("orthogonality_probe: targets must not be constant");
  }
  // Centering absorbs the intercept.
  const Matrix xc = embeddings.rowwise() - embeddings.colwise().mean();
  const Vector tc = t.array() - t.mean();
  const Vector uc = u.array() - u.mean();
  ProbeResult r;
  Eigen::JacobiSVD<Matrix> svd(xc);
  const Vector sv = svd.singularValues();
  r.regularized = sv.size() == 0 || sv[sv.size() - 1] <= 1e-10 * std::max(sv[0], 1e-300);
  Matrix gram = xc.transpose() * xc;
  if (r.regularized) {
    gram.diagonal().array() += 1e-8;
  }
  const Eigen::LDLT<Matrix> solver(gram);
  r.beta_tau = solver.solve(xc.transpose() * tc);
  r.beta_mu = solver.solve(xc.transpose() * uc);
  const double denom = r.beta_tau.norm() * r.beta_mu.norm();
  r.cosine = denom > 0.0 ? std::abs(r.beta_tau.dot(r.beta_mu)) / denom : 0.0;
  return r;
}

} // namespace conda_dyn
