#pragma once

#include "conda_dyn/contrastive.hpp"
#include "conda_dyn/diffusion.hpp"
#include "conda_dyn/numcore.hpp"

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace conda_dyn {

enum class Metric { euclidean, cosine };
enum class Kernel { uniform, inverse_distance, gaussian };

std::string to_string(Metric m);
std::string to_string(Kernel k);
Metric metric_from_string(const std::string& s);
Kernel kernel_from_string(const std::string& s);

struct KnnConfig {
  int k = 8;
  Metric metric = Metric::euclidean;
  Kernel kernel = Kernel::gaussian;
  /// Gaussian sigma; <= 0 picks the median nearest-neighbour distance of a
  /// subsample of at most `bandwidth_sample` references.
  double bandwidth = 0.0;
  int bandwidth_sample = 1000;
};

/// Reference pairs (c_j, z_j) for the decoder C -> Z. Immutable once built.
struct KnnTable {
  Matrix embeddings;  // n x d
  Matrix latents;     // n x D
  std::vector<Condition> conditions;
  Metric metric = Metric::euclidean;
  Kernel kernel = Kernel::gaussian;
  double bandwidth = 1.0;
  int k = 1;
  int steps = 0;

  int size() const { return static_cast<int>(embeddings.rows()); }
  bool operator==(const KnnTable&) const = default;
};

KnnTable build_table(std::span<const Embedding> embeddings, std::span<const FeatureLatent> latents,
                     const KnnConfig& config);
KnnTable build_table(Matrix embeddings, Matrix latents, std::vector<Condition> conditions, const KnnConfig& config,
                     int steps = 0);

double knn_distance(Metric metric, const Eigen::Ref<const Vector>& a, const Eigen::Ref<const Vector>& b);

struct Neighbours {
  std::vector<int> index;
  std::vector<double> distance;
  std::vector<double> weight;  // sums to 1
};

/// The k nearest references (ties broken by index) and their kernel weights.
Neighbours neighbours(const KnnTable& table, const Eigen::Ref<const Vector>& query, int k);

/// z = sum_j w_j z_j over the k nearest references. The condition is the
/// weighted mean of the neighbours' (tau, mu) with a weighted-majority label.
FeatureLatent lift(const KnnTable& table, const Embedding& query);
FeatureLatent lift(const KnnTable& table, const Eigen::Ref<const Vector>& query, int k);
/// Row-wise lift of many queries (parallel); returns n x D.
Matrix lift_many(const KnnTable& table, const Matrix& queries, int k = 0);

struct KSelection {
  int k = 1;
  std::vector<int> grid;
  std::vector<double> rmse;
};

/// Picks the grid k with the smallest held-out RMSE (per element) of the
/// lifted latents; ties go to the smaller k.
KSelection select_k(const KnnTable& table, std::span<const int> k_grid, const Matrix& heldout_embeddings,
                    const Matrix& heldout_latents);

void save_table(const KnnTable& table, const std::filesystem::path& path);
KnnTable load_table(const std::filesystem::path& path);

} // namespace conda_dyn
