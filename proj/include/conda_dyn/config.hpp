#pragma once

#include "conda_dyn/analysis.hpp"
#include "conda_dyn/contrastive.hpp"
#include "conda_dyn/diffusion.hpp"
#include "conda_dyn/dynsim.hpp"
#include "conda_dyn/lifting.hpp"
#include "conda_dyn/traversal.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace conda_dyn {

struct DiffusionSection {
  int T = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  int steps = 100;
  DenoiserConfig net{};
  DiffusionTrainConfig train{};
  std::optional<std::uint64_t> seed;
};

struct EmbeddingSection {
  int d = 8;
  std::vector<int> hidden{128, 128, 128};
  double temperature = 1.0;
  /// Phase window for time positives; unset means two frame spacings.
  std::optional<double> delta_t;
  double delta_y = 0.0;
  /// Time positives pair frames of any trajectory, not only their own.
  bool cross_trajectory = true;
  bool use_condition = true;
  ContrastiveTrainConfig train{};
  std::optional<std::uint64_t> seed;
};

struct TraversalSection {
  double lambda = 1e-8;
  /// Every holdout_stride-th frame (from holdout_stride to S - 4) is hidden
  /// and predicted.
  int holdout_stride = 4;
  bool spline_in_z = false;
  int recurrent_hidden = 64;
  RecurrentTrainConfig recurrent{};
  std::optional<std::uint64_t> seed;
};

struct LiftingSection {
  Kernel kernel = Kernel::gaussian;
  Metric metric = Metric::euclidean;
  std::vector<int> k_grid{1, 2, 4, 8, 16, 32};
  double bandwidth = 0.0;
  double heldout_fraction = 0.1;
};

struct ClassifySection {
  int d = 3;
  int folds = 4;
  SvmConfig svm{};
  bool shuffle_labels = false;
  std::optional<std::uint64_t> seed;
};

struct KdeSection {
  double bandwidth = 0.0;
  std::vector<double> eta{0.0, 0.25, 0.5, 0.75, 1.0};
  int source_class = 0;
  int max_nodes_per_axis = 64;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string dataset_name = "oscillator";
  OscillatorSpec dataset{};
  std::optional<std::uint64_t> dataset_seed;
  DiffusionSection diffusion{};
  EmbeddingSection embedding{};
  TraversalSection traversal{};
  LiftingSection lifting{};
  ClassifySection classify{};
  KdeSection kde{};
  std::vector<int> sweep_dims{2, 3, 4, 8, 16};
  int render_grid = 32;
  int strip_trajectories = 2;
  std::string out_dir = "out";
};

/// Parses a JSON document; absent fields keep their defaults. Unknown
/// fields and type errors raise ConfigError naming the field path.
ExperimentConfig config_from_json(const nlohmann::json& doc);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Canonical form: every field, defaults included, with fixed key order.
nlohmann::json config_to_json(const ExperimentConfig& config);
std::string canonical_text(const ExperimentConfig& config);
std::uint64_t config_hash(const ExperimentConfig& config);

/// Field path, default value and description for every field.
nlohmann::json config_schema();

/// Checks cross-field constraints (ConfigError with field paths).
void validate_config(const ExperimentConfig& config);

/// Stage seeds: the explicit section seed when set, otherwise derived from
/// the master seed and the stage name.
std::uint64_t stage_seed(const ExperimentConfig& config, std::string_view stage);

} // namespace conda_dyn
