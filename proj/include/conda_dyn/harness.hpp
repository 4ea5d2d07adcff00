#pragma once

#include "conda_dyn/config.hpp"
#include "conda_dyn/metrics.hpp"

#include <chrono>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace conda_dyn {

struct RunOptions {
  /// Recompute cached stages.
  bool force = false;
  /// Progress messages on stderr.
  bool verbose = false;
};

/// Inverted latents of every frame, trajectory-major (row = traj * S + frame).
struct LatentSet {
  Matrix z;
  std::vector<Condition> conditions;
  std::vector<int> trajectory;
  std::vector<int> frame;
  int steps = 0;
};

void save_latents(const LatentSet& latents, const std::filesystem::path& path);
LatentSet load_latents(const std::filesystem::path& path);

/// Lazily materialises and caches the stage artifacts of one configuration
/// under <out_dir>/cache/<key>/.
class Workspace {
public:
  Workspace(ExperimentConfig config, RunOptions options);

  const ExperimentConfig& config() const { return config_; }
  std::filesystem::path out_dir() const { return config_.out_dir; }

  const Dataset& dataset();
  const Denoiser& denoiser();
  const NoiseSchedule& schedule();
  /// Runs inversion when allowed; otherwise throws InputError naming the
  /// command that produces the latents.
  const LatentSet& latents(bool may_compute = true);
  /// Encoder trained with time positives (pipeline, sweep, probe).
  const Encoder& dynamics_encoder(int d, bool may_compute = true);
  /// Encoder trained with class-match positives (classify, kde-edit).
  const Encoder& class_encoder();

  /// Rows of latents() belonging to trajectories of one split.
  std::vector<int> rows_of(Split split);

  const std::map<std::string, double>& stage_seconds() const { return seconds_; }
  std::vector<std::filesystem::path> cached_files() const { return cached_; }

  std::string dataset_key() const;
  std::string diffusion_key() const;
  std::string latents_key() const;
  std::string encoder_key(int d) const;
  std::string class_encoder_key() const;

private:
  std::filesystem::path cache_path(const std::string& key, const std::string& file) const;
  void log(const std::string& msg) const;
  void time_stage(const std::string& name, std::chrono::steady_clock::time_point start);

  ExperimentConfig config_;
  RunOptions options_;
  std::optional<Dataset> dataset_;
  std::optional<Denoiser> denoiser_;
  std::optional<NoiseSchedule> schedule_;
  std::optional<LatentSet> latents_;
  std::map<int, Encoder> encoders_;
  std::optional<Encoder> class_encoder_;
  std::map<std::string, double> seconds_;
  std::vector<std::filesystem::path> cached_;
};

// Output helpers ---------------------------------------------------------

std::string csv_header();
std::string csv_row(const MetricReport& r);
void write_csv(const std::filesystem::path& path, const std::vector<MetricReport>& rows);
/// Binary PGM (P5, maxval 255); values are clipped to [0, 1].
void write_pgm(const std::filesystem::path& path, const Matrix& image);
/// Horizontal concatenation of equally sized images.
Matrix hstack(const std::vector<Matrix>& images);

struct CommandResult {
  std::vector<MetricReport> rows;
  std::vector<std::filesystem::path> artifacts;
  nlohmann::json summary = nlohmann::json::object();
};

CommandResult cmd_simulate(const ExperimentConfig& config, const RunOptions& options = {});
CommandResult cmd_pipeline(const ExperimentConfig& config, const RunOptions& options = {});
CommandResult cmd_classify(const ExperimentConfig& config, const RunOptions& options = {});
CommandResult cmd_kde_edit(const ExperimentConfig& config, const RunOptions& options = {});
CommandResult cmd_sweep_dim(const ExperimentConfig& config, const RunOptions& options = {});
CommandResult cmd_probe_orthogonality(const ExperimentConfig& config, const RunOptions& options = {});

// Pieces shared by the commands and exposed for testing -------------------

/// Frames hidden from each test trajectory: stride, 2 stride, ... <= S - 2.
std::vector<int> holdout_frames(int frames, int stride);

struct Prediction {
  std::string space;
  std::string method;
  Matrix values;        // predicted vectors in the method's space
  Matrix truth;         // ground-truth vectors in that space
  std::vector<int> rows;  // latent-set rows being predicted
};

/// Own-space predictions for every (space, method) of the trajectory task.
/// `c_all` holds the embeddings of every latent row.
std::vector<Prediction> predict_heldout(Workspace& ws, const Matrix& c_all, bool include_z = true,
                                        const std::vector<std::string>& only_methods = {});

/// kNN table over the training split with k chosen on held-out training
/// trajectories.
KnnTable fit_lifting(Workspace& ws, const Matrix& c_all, KSelection* selection = nullptr);

/// Decodes predictions to states and scores them against the true frames.
std::vector<MetricReport> score_predictions(Workspace& ws, const std::vector<Prediction>& predictions,
                                            const KnnTable& table, std::map<std::string, Matrix>* decoded = nullptr);

/// Class-probe split: leave-mu-band-out folds over test frames (folds > 1),
/// or train split vs test split (folds == 1).
struct FoldSplit {
  std::vector<int> train_rows;
  std::vector<int> test_rows;
};
std::vector<FoldSplit> classification_folds(Workspace& ws);

} // namespace conda_dyn
