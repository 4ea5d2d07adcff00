#include "conda_dyn/harness.hpp"

#include <CLI11.hpp>

#include <iostream>

using namespace conda_dyn;

namespace {

struct Options {
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::vector<double> eta;
  std::vector<int> dims;
  bool force = false;
  bool verbose = false;
};

ExperimentConfig resolve(const Options& o) {
  ExperimentConfig cfg = o.config_path.empty() ? ExperimentConfig{} : load_config(o.config_path);
  if (!o.out_dir.empty()) {
    cfg.out_dir = o.out_dir;
  }
  if (o.seed) {
    cfg.seed = *o.seed;
  }
  if (!o.eta.empty()) {
    cfg.kde.eta = o.eta;
  }
  if (!o.dims.empty()) {
    cfg.sweep_dims = o.dims;
  }
  validate_config(cfg);
  return cfg;
}

void print_result(const CommandResult& r) {
  std::cout << csv_header() << "\n";
  for (const auto& row : r.rows) {
    std::cout << csv_row(row) << "\n";
  }
  for (const auto& a : r.artifacts) {
    std::cerr << "wrote " << a.string() << "\n";
  }
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conditional latent dynamics: simulate, train, traverse and evaluate"};
  app.require_subcommand(1);
  Options o;

  using Command = CommandResult (*)(const ExperimentConfig&, const RunOptions&);
  const std::vector<std::tuple<std::string, std::string, Command>> commands{
      {"simulate", "Generate the oscillator dataset", cmd_simulate},
      {"pipeline", "Train, invert, embed, traverse and score held-out frames", cmd_pipeline},
      {"classify", "SVM class probes in Z, C and PCA", cmd_classify},
      {"kde-edit", "Class traversal between KDE peaks with rendered strip", cmd_kde_edit},
      {"sweep-dim", "Prediction metrics across embedding dimensions", cmd_sweep_dim},
      {"probe-orthogonality", "Cosine between tau and mu regression directions", cmd_probe_orthogonality},
  };
  Command chosen = nullptr;
  for (const auto& [name, help, fn] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", o.config_path, "JSON config (defaults when omitted)")->check(CLI::ExistingFile);
    sub->add_option("--out", o.out_dir, "Output directory (overrides out_dir)");
    sub->add_option("--seed", o.seed, "Master seed (overrides seed)");
    sub->add_flag("--force", o.force, "Recompute cached stages");
    sub->add_flag("-v,--verbose", o.verbose, "Progress on stderr");
    if (name == "kde-edit") {
      sub->add_option("--eta", o.eta, "Traversal fractions (overrides kde.eta)");
    }
    if (name == "sweep-dim") {
      sub->add_option("--dims", o.dims, "Embedding dimensions (overrides sweep.dims)");
    }
    sub->callback([&chosen, fn = fn] { chosen = fn; });
  }
  bool schema = false;
  app.add_subcommand("config-schema", "Print every config field with its default and description")
      ->callback([&schema] { schema = true; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (schema) {
      std::cout << config_schema().dump(2) << "\n";
      return 0;
    }
    const ExperimentConfig cfg = resolve(o);
    print_result(chosen(cfg, RunOptions{o.force, o.verbose}));
    return 0;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const ParseError& e) {
    std::cerr << "parse error at byte " << e.offset() << ": " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 2;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return 2;
  } catch (const ShapeError& e) {
    std::cerr << "shape error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
