#include "conda_dyn/lifting.hpp"

#include "conda_dyn/binio.hpp"
#include "conda_dyn/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

namespace conda_dyn {

namespace {
constexpr char kCheckpointMagic[] = "CDYNCKPT";
constexpr double kInverseDistanceEps = 1e-9;

double median_nn_distance(const Matrix& c, Metric metric, int sample) {
  const Eigen::Index n = c.rows();
  if (n < 2) {
    return 1.0;
  }
  const Eigen::Index stride = std::max<Eigen::Index>(1, (n + sample - 1) / std::max(sample, 1));
  std::vector<Eigen::Index> picks;
  for (Eigen::Index i = 0; i < n; i += stride) {
    picks.push_back(i);
  }
  std::vector<double> nn(picks.size());
  parallel_for(picks.size(), [&](std::size_t q) {
    const Eigen::Index i = picks[q];
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j != i) {
        best = std::min(best, knn_distance(metric, c.row(i).transpose(), c.row(j).transpose()));
      }
    }
    nn[q] = best;
  });
  const auto mid = nn.begin() + static_cast<std::ptrdiff_t>(nn.size() / 2);
  std::nth_element(nn.begin(), mid, nn.end());
  const double med = *mid;
  return med > 0.0 ? med : 1.0;
}
} // namespace

std::string to_string(Metric m) { return m == Metric::euclidean ? "euclidean" : "cosine"; }

std::string to_string(Kernel k) {
  switch (k) {
  case Kernel::uniform:
    return "uniform";
  case Kernel::inverse_distance:
    return "inverse_distance";
  case Kernel::gaussian:
    return "gaussian";
  }
  return "gaussian";
}

Metric metric_from_string(const std::string& s) {
  if (s == "euclidean") {
    return Metric::euclidean;
  }
  if (s == "cosine") {
    return Metric::cosine;
  }
  throw ConfigError("lifting.metric: unknown metric '" + s + "' (expected euclidean or cosine)");
}

Kernel kernel_from_string(const std::string& s) {
  if (s == "uniform") {
    return Kernel::uniform;
  }
  if (s == "inverse_distance") {
    return Kernel::inverse_distance;
  }
  if (s == "gaussian") {
    return Kernel::gaussian;
  }
  throw ConfigError("lifting.kernel: unknown kernel '" + s + "' (expected uniform, inverse_distance or gaussian)");
}

double knn_distance(Metric metric, const Eigen::Ref<const Vector>& a, const Eigen::Ref<const Vector>& b) {
  if (metric == Metric::euclidean) {
    return (a - b).norm();
  }
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) {
    return 1.0;
  }
  return std::max(0.0, 1.0 - a.dot(b) / (na * nb));
}

KnnTable build_table(Matrix embeddings, Matrix latents, std::vector<Condition> conditions, const KnnConfig& config,
                     int steps) {
  if (embeddings.rows() != latents.rows() || static_cast<Eigen::Index>(conditions.size()) != embeddings.rows()) {
    throw InputError("build_table: " + std::to_string(embeddings.rows()) + " embeddings, " +
                     std::to_string(latents.rows()) + " latents and " + std::to_string(conditions.size()) +
                     " conditions");
  }
  if (embeddings.rows() == 0) {
    throw InputError("build_table: empty reference set");
  }
  if (!embeddings.allFinite() || !latents.allFinite()) {
    throw InputError("build_table: non-finite reference vector");
  }
  if (config.k < 1) {
    throw ConfigError("lifting.k: must be at least 1");
  }
  KnnTable t;
  t.metric = config.metric;
  t.kernel = config.kernel;
  t.k = std::min<int>(config.k, static_cast<int>(embeddings.rows()));
  t.steps = steps;
  t.bandwidth = config.bandwidth > 0.0 ? config.bandwidth
                                       : median_nn_distance(embeddings, config.metric, config.bandwidth_sample);
  t.embeddings = std::move(embeddings);
  t.latents = std::move(latents);
  t.conditions = std::move(conditions);
  return t;
}

KnnTable build_table(std::span<const Embedding> embeddings, std::span<const FeatureLatent> latents,
                     const KnnConfig& config) {
  if (embeddings.size() != latents.size()) {
    throw InputError("build_table: " + std::to_string(embeddings.size()) + " embeddings but " +
                     std::to_string(latents.size()) + " latents");
  }
  if (embeddings.empty()) {
    throw InputError("build_table: empty reference set");
  }
  Matrix c(embeddings.size(), embeddings.front().c.size());
  Matrix z(latents.size(), latents.front().z.size());
  std::vector<Condition> y;
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    if (embeddings[i].c.size() != c.cols() || latents[i].z.size() != z.cols()) {
      throw ShapeError("build_table: inconsistent vector lengths");
    }
    c.row(static_cast<Eigen::Index>(i)) = embeddings[i].c.transpose();
    z.row(static_cast<Eigen::Index>(i)) = latents[i].z.transpose();
    y.push_back(latents[i].condition);
  }
  return build_table(std::move(c), std::move(z), std::move(y), config, latents.front().steps);
}

Neighbours neighbours(const KnnTable& table, const Eigen::Ref<const Vector>& query, int k) {
  if (table.size() == 0) {
    throw InputError("lift: empty table");
  }
  if (!query.allFinite()) {
    throw InputError("lift: non-finite query");
  }
  if (query.size() != table.embeddings.cols()) {
    throw ShapeError("lift: query has length " + std::to_string(query.size()) + ", table expects " +
                     std::to_string(table.embeddings.cols()));
  }
  k = std::clamp(k, 1, table.size());
  std::vector<double> dist(table.size());
  for (int j = 0; j < table.size(); ++j) {
    dist[j] = knn_distance(table.metric, query, table.embeddings.row(j).transpose());
  }
  std::vector<int> order(table.size());
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + k, order.end(),
                    [&](int a, int b) { return dist[a] < dist[b] || (dist[a] == dist[b] && a < b); });
  Neighbours nb;
  nb.index.assign(order.begin(), order.begin() + k);
  for (int j : nb.index) {
    nb.distance.push_back(dist[j]);
  }
  nb.weight.resize(k);
  switch (table.kernel) {
  case Kernel::uniform:
    std::fill(nb.weight.begin(), nb.weight.end(), 1.0);
    break;
  case Kernel::inverse_distance:
    for (int i = 0; i < k; ++i) {
      nb.weight[i] = 1.0 / (nb.distance[i] + kInverseDistanceEps);
    }
    break;
  case Kernel::gaussian: {
    // Shifting by the nearest squared distance cancels in the normalisation.
    const double d0 = nb.distance.front() * nb.distance.front();
    const double s2 = 2.0 * table.bandwidth * table.bandwidth;
    for (int i = 0; i < k; ++i) {
      nb.weight[i] = std::exp(-(nb.distance[i] * nb.distance[i] - d0) / s2);
    }
    break;
  }
  }
  const double total = std::accumulate(nb.weight.begin(), nb.weight.end(), 0.0);
  for (auto& w : nb.weight) {
    w /= total;
  }
  return nb;
}

FeatureLatent lift(const KnnTable& table, const Eigen::Ref<const Vector>& query, int k) {
  const Neighbours nb = neighbours(table, query, k);
  FeatureLatent out;
  out.z = Vector::Zero(table.latents.cols());
  out.steps = table.steps;
  double tau = 0.0;
  double mu = 0.0;
  std::map<int, double> votes;
  for (std::size_t i = 0; i < nb.index.size(); ++i) {
    const int j = nb.index[i];
    const double w = nb.weight[i];
    out.z += w * table.latents.row(j).transpose();
    tau += w * table.conditions[j].tau;
    mu += w * table.conditions[j].mu;
    if (table.conditions[j].class_label) {
      votes[*table.conditions[j].class_label] += w;
    }
  }
  out.condition.tau = tau;
  out.condition.mu = mu;
  if (!votes.empty()) {
    out.condition.class_label =
        std::max_element(votes.begin(), votes.end(), [](const auto& a, const auto& b) { return a.second < b.second; })
            ->first;
  }
  return out;
}

FeatureLatent lift(const KnnTable& table, const Embedding& query) { return lift(table, query.c, table.k); }

Matrix lift_many(const KnnTable& table, const Matrix& queries, int k) {
  const int kk = k > 0 ? k : table.k;
  Matrix out(queries.rows(), table.latents.cols());
  parallel_for(static_cast<std::size_t>(queries.rows()), [&](std::size_t i) {
    const Eigen::Index r = static_cast<Eigen::Index>(i);
    out.row(r) = lift(table, queries.row(r).transpose(), kk).z.transpose();
  });
  return out;
}

KSelection select_k(const KnnTable& table, std::span<const int> k_grid, const Matrix& heldout_embeddings,
                    const Matrix& heldout_latents) {
  if (k_grid.empty()) {
    throw ConfigError("lifting.k_grid: must not be empty");
  }
  if (heldout_embeddings.rows() == 0 || heldout_embeddings.rows() != heldout_latents.rows()) {
    throw InputError("select_k: held-out set is empty or misaligned");
  }
  KSelection sel;
  sel.grid.assign(k_grid.begin(), k_grid.end());
  double best = std::numeric_limits<double>::infinity();
  for (int k : sel.grid) {
    if (k < 1) {
      throw ConfigError("lifting.k_grid: entries must be at least 1");
    }
    const Matrix lifted = lift_many(table, heldout_embeddings, k);
    const double rmse = std::sqrt((lifted - heldout_latents).squaredNorm() / static_cast<double>(lifted.size()));
    sel.rmse.push_back(rmse);
    if (rmse < best || (rmse == best && k < sel.k)) {
      best = rmse;
      sel.k = k;
    }
  }
  return sel;
}

void save_table(const KnnTable& t, const std::filesystem::path& path) {
  BinaryWriter w(kCheckpointMagic);
  w.str("knn_table");
  w.str(to_string(t.metric));
  w.str(to_string(t.kernel));
  w.f64(t.bandwidth);
  w.u32(static_cast<std::uint32_t>(t.k));
  w.u32(static_cast<std::uint32_t>(t.steps));
  w.matrix(t.embeddings);
  w.matrix(t.latents);
  w.u64(t.conditions.size());
  for (const auto& c : t.conditions) {
    w.f64(c.tau);
    w.f64(c.mu);
    w.u8(c.class_label ? 1 : 0);
    w.i64(c.class_label.value_or(0));
  }
  w.save(path);
}

KnnTable load_table(const std::filesystem::path& path) {
  auto r = BinaryReader::open(path, kCheckpointMagic);
  const auto kind_at = r.offset();
  if (r.str() != "knn_table") {
    throw FormatError("checkpoint at byte " + std::to_string(kind_at) + " is not a kNN table");
  }
  KnnTable t;
  t.metric = metric_from_string(r.str());
  t.kernel = kernel_from_string(r.str());
  t.bandwidth = r.f64();
  t.k = static_cast<int>(r.u32());
  t.steps = static_cast<int>(r.u32());
  t.embeddings = r.matrix();
  t.latents = r.matrix();
  const std::uint64_t n = r.u64();
  if (n != static_cast<std::uint64_t>(t.embeddings.rows()) || t.latents.rows() != t.embeddings.rows()) {
    throw ParseError("kNN table row counts disagree", r.offset());
  }
  t.conditions.resize(n);
  for (auto& c : t.conditions) {
    c.tau = r.f64();
    c.mu = r.f64();
    const bool has = r.u8() != 0;
    const auto label = r.i64();
    if (has) {
      c.class_label = static_cast<int>(label);
    }
  }
  r.expect_end();
  return t;
}

} // namespace conda_dyn
