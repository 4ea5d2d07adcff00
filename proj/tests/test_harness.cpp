#include "conda_dyn/harness.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <cmath>
#include <iterator>
#include <set>
#include <sstream>

using namespace conda_dyn;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "conda_dyn_test_harness" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

ExperimentConfig tiny_config(const fs::path& out) {
  const json doc = json::parse(R"({
    "seed": 5,
    "dataset": {"n_traj": 24, "frames": 16, "n_test": 4, "dim": 4},
    "diffusion": {"T": 100, "steps": 10, "hidden": [32, 32], "epochs": 5},
    "embedding": {"hidden": [32, 32], "max_epochs": 5, "d": 3, "batches_per_epoch": 5},
    "traversal": {"recurrent": {"epochs": 5, "hidden": 8}},
    "lifting": {"k_grid": [1, 2, 4]},
    "classify": {"svm_steps": 2000, "folds": 1},
    "kde": {"max_nodes_per_axis": 24},
    "sweep": {"dims": [3]},
    "render": {"grid": 16, "strip_trajectories": 1}
  })");
  ExperimentConfig c = config_from_json(doc);
  c.out_dir = out.string();
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

} // namespace

TEST(Harness, HoldoutFrames) {
  EXPECT_EQ(holdout_frames(16, 4), (std::vector<int>{4, 8, 12}));
  EXPECT_EQ(holdout_frames(64, 4).back(), 60);
  EXPECT_EQ(holdout_frames(64, 8), (std::vector<int>{8, 16, 24, 32, 40, 48, 56}));
  EXPECT_TRUE(holdout_frames(5, 4).empty());
}

TEST(Harness, CsvFormat) {
  MetricReport r;
  r.dataset = "oscillator";
  r.space = "C";
  r.method = "Spline";
  r.metric = "rmse";
  r.value = 0.125;
  r.std = 0.0;
  r.count = 12;
  r.seed = 3;
  EXPECT_EQ(csv_header(), "dataset,space,method,metric,value,std,n,seed");
  const std::string row = csv_row(r);
  EXPECT_EQ(row.rfind("oscillator,C,Spline,rmse,", 0), 0u);
  EXPECT_EQ(row.substr(row.size() - 5), ",12,3");

  const fs::path dir = scratch("csv");
  write_csv(dir / "m.csv", {r, r});
  std::istringstream in(slurp(dir / "m.csv"));
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) {
    lines.push_back(line);
  }
  ASSERT_EQ(lines.size(), 3u);
  EXPECT_EQ(lines[0], csv_header());
  EXPECT_EQ(lines[1], row);
}

TEST(Harness, PgmBytes) {
  Matrix img(2, 3);
  img << 0.0, 1.0, 0.5, -2.0, 3.0, 0.2;
  const fs::path dir = scratch("pgm");
  write_pgm(dir / "a.pgm", img);
  const std::string bytes = slurp(dir / "a.pgm");
  const std::string header = "P5\n3 2\n255\n";
  ASSERT_EQ(bytes.size(), header.size() + 6);
  EXPECT_EQ(bytes.substr(0, header.size()), header);
  const auto px = [&](int i) { return static_cast<unsigned char>(bytes[header.size() + i]); };
  EXPECT_EQ(px(0), 0);
  EXPECT_EQ(px(1), 255);
  EXPECT_EQ(px(2), 128);
  EXPECT_EQ(px(3), 0);
  EXPECT_EQ(px(4), 255);
  EXPECT_EQ(px(5), 51);
}

TEST(Harness, Hstack) {
  const Matrix a = Matrix::Constant(2, 2, 1.0);
  EXPECT_THROW(hstack({a, Matrix::Zero(3, 2)}), ShapeError);
  const Matrix c = hstack({a, a});
  ASSERT_EQ(c.rows(), 2);
  ASSERT_EQ(c.cols(), 4);
  EXPECT_EQ(c, Matrix::Constant(2, 4, 1.0));
}

TEST(Harness, SimulateIsDeterministic) {
  const fs::path a = scratch("sim_a");
  const fs::path b = scratch("sim_b");
  const CommandResult ra = cmd_simulate(tiny_config(a));
  cmd_simulate(tiny_config(b));
  EXPECT_EQ(ra.summary.at("trajectories"), 24);
  EXPECT_EQ(ra.summary.at("test"), 4);
  EXPECT_EQ(slurp(a / "dataset.bin"), slurp(b / "dataset.bin"));
  EXPECT_TRUE(fs::exists(a / "manifest_simulate.json"));
  const json manifest = json::parse(slurp(a / "manifest_simulate.json"));
  EXPECT_EQ(manifest.at("command"), "simulate");
  EXPECT_EQ(manifest.at("artifacts"), json::array({"dataset.bin"}));
}

TEST(Harness, CommandsNeedLatents) {
  const fs::path dir = scratch("fresh");
  const ExperimentConfig c = tiny_config(dir);
  EXPECT_THROW(cmd_classify(c), InputError);
  EXPECT_THROW(cmd_kde_edit(c), InputError);
  EXPECT_THROW(cmd_probe_orthogonality(c), InputError);
  ExperimentConfig empty = c;
  empty.sweep_dims.clear();
  EXPECT_THROW(cmd_sweep_dim(empty), ConfigError);
}

// One process for the whole chain so the on-disk caches are shared.
TEST(Harness, EndToEnd) {
  const fs::path dir = scratch("e2e");
  const ExperimentConfig c = tiny_config(dir);
  const CommandResult pipe = cmd_pipeline(c);

  std::set<std::pair<std::string, std::string>> seen;
  for (const auto& r : pipe.rows) {
    seen.insert({r.space, r.method});
    EXPECT_TRUE(std::isfinite(r.value)) << r.space << "/" << r.method << "/" << r.metric;
  }
  std::set<std::pair<std::string, std::string>> expected;
  for (const std::string m : {"Lerp", "Slerp", "Recurrent", "TEX-1", "TEX-2", "Spline"}) {
    expected.insert({"C", m});
    if (m != "Spline") {
      expected.insert({"Z", m});
    }
  }
  EXPECT_EQ(seen, expected);
  EXPECT_TRUE(fs::exists(dir / "pipeline_metrics.csv"));
  EXPECT_TRUE(fs::exists(dir / "pipeline_summary.json"));
  EXPECT_TRUE(fs::exists(dir / "manifest_pipeline.json"));
  int strips = 0;
  for (const auto& e : fs::directory_iterator(dir / "strips")) {
    EXPECT_EQ(slurp(e.path()).rfind("P5\n", 0), 0u);
    ++strips;
  }
  EXPECT_EQ(strips, 1 + static_cast<int>(expected.size()));

  // A second run from scratch reproduces the outputs byte for byte.
  const fs::path again = scratch("e2e_again");
  cmd_pipeline(tiny_config(again));
  EXPECT_EQ(slurp(dir / "pipeline_metrics.csv"), slurp(again / "pipeline_metrics.csv"));
  for (const auto& e : fs::directory_iterator(dir / "strips")) {
    EXPECT_EQ(slurp(e.path()), slurp(again / "strips" / e.path().filename())) << e.path();
  }

  // Sweeping the configured dimension reuses the pipeline encoder.
  const CommandResult sweep = cmd_sweep_dim(c);
  ASSERT_EQ(sweep.rows.size(), 1u);
  EXPECT_EQ(sweep.rows[0].method, "Spline@d=3");
  double pipeline_spline = -1.0;
  for (const auto& r : pipe.rows) {
    if (r.space == "C" && r.method == "Spline" && r.metric == "state_rmse") {
      pipeline_spline = r.value;
    }
  }
  EXPECT_EQ(sweep.rows[0].value, pipeline_spline);

  const CommandResult probe = cmd_probe_orthogonality(c);
  ASSERT_EQ(probe.rows.size(), 2u);
  for (const auto& r : probe.rows) {
    EXPECT_GE(r.value, 0.0);
    EXPECT_LE(r.value, 1.0);
  }
  EXPECT_TRUE(fs::exists(dir / "orthogonality.csv"));

  const CommandResult cls = cmd_classify(c);
  EXPECT_EQ(cls.rows.size(), 18u);
  for (const auto& r : cls.rows) {
    EXPECT_GE(r.value, 0.0);
    EXPECT_LE(r.value, 1.0);
  }
  EXPECT_TRUE(fs::exists(dir / "classify_metrics.csv"));

  const CommandResult kde = cmd_kde_edit(c);
  EXPECT_EQ(kde.rows.size(), c.kde.eta.size());
  EXPECT_TRUE(fs::exists(dir / "kde_strip.pgm"));
  EXPECT_TRUE(fs::exists(dir / "kde_metrics.csv"));
}

TEST(Harness, ConstantMuProbeRejected) {
  const fs::path dir = scratch("constant_mu");
  ExperimentConfig c = tiny_config(dir);
  c.dataset.mu_lo = 1.0;
  c.dataset.mu_hi = 1.0;
  cmd_sweep_dim(c);
  EXPECT_THROW(cmd_probe_orthogonality(c), InputError);
}

TEST(Harness, InvalidConfigRejected) {
  ExperimentConfig c = tiny_config(scratch("invalid"));
  c.dataset.mu_lo = 2.0;
  c.dataset.mu_hi = 1.0;
  EXPECT_THROW(cmd_simulate(c), ConfigError);
}
