#include "conda_dyn/config.hpp"

#include "conda_dyn/binio.hpp"

#include <functional>
#include <map>

namespace conda_dyn {

using nlohmann::json;

namespace {

[[noreturn]] void type_error(const std::string& path, const char* expected, const json& got) {
  throw ConfigError(path + ": expected " + expected + ", got " + got.dump());
}

template <typename T>
T parse_as(const json& j, const std::string& path);

template <>
int parse_as<int>(const json& j, const std::string& path) {
  if (!j.is_number_integer()) {
    type_error(path, "an integer", j);
  }
  const auto v = j.get<std::int64_t>();
  if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) {
    type_error(path, "a 32-bit integer", j);
  }
  return static_cast<int>(v);
}

template <>
long parse_as<long>(const json& j, const std::string& path) {
  if (!j.is_number_integer()) {
    type_error(path, "an integer", j);
  }
  return j.get<long>();
}

template <>
std::uint64_t parse_as<std::uint64_t>(const json& j, const std::string& path) {
  if (!j.is_number_unsigned() && !(j.is_number_integer() && j.get<std::int64_t>() >= 0)) {
    type_error(path, "a non-negative integer", j);
  }
  return j.get<std::uint64_t>();
}

template <>
double parse_as<double>(const json& j, const std::string& path) {
  if (!j.is_number()) {
    type_error(path, "a number", j);
  }
  return j.get<double>();
}

template <>
bool parse_as<bool>(const json& j, const std::string& path) {
  if (!j.is_boolean()) {
    type_error(path, "true or false", j);
  }
  return j.get<bool>();
}

template <>
std::string parse_as<std::string>(const json& j, const std::string& path) {
  if (!j.is_string()) {
    type_error(path, "a string", j);
  }
  return j.get<std::string>();
}

template <>
std::vector<int> parse_as<std::vector<int>>(const json& j, const std::string& path) {
  if (!j.is_array()) {
    type_error(path, "an array of integers", j);
  }
  std::vector<int> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    out.push_back(parse_as<int>(j[i], path + "[" + std::to_string(i) + "]"));
  }
  return out;
}

template <>
std::vector<double> parse_as<std::vector<double>>(const json& j, const std::string& path) {
  if (!j.is_array()) {
    type_error(path, "an array of numbers", j);
  }
  std::vector<double> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    out.push_back(parse_as<double>(j[i], path + "[" + std::to_string(i) + "]"));
  }
  return out;
}

template <>
std::optional<std::uint64_t> parse_as<std::optional<std::uint64_t>>(const json& j, const std::string& path) {
  if (j.is_null()) {
    return std::nullopt;
  }
  return parse_as<std::uint64_t>(j, path);
}

template <>
std::optional<double> parse_as<std::optional<double>>(const json& j, const std::string& path) {
  if (j.is_null()) {
    return std::nullopt;
  }
  return parse_as<double>(j, path);
}

template <typename T>
json to_json_value(const T& v) {
  return json(v);
}

template <typename T>
json to_json_value(const std::optional<T>& v) {
  return v ? json(*v) : json(nullptr);
}

struct Field {
  std::string path;
  std::string doc;
  std::function<json(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const json&)> set;
};

template <typename T>
Field leaf(std::string path, std::string doc, std::function<T&(ExperimentConfig&)> ref) {
  Field f;
  f.path = path;
  f.doc = std::move(doc);
  f.get = [ref](const ExperimentConfig& c) { return to_json_value(ref(const_cast<ExperimentConfig&>(c))); };
  f.set = [ref, path](ExperimentConfig& c, const json& j) { ref(c) = parse_as<T>(j, path); };
  return f;
}

template <typename E>
Field enum_leaf(std::string path, std::string doc, std::function<E&(ExperimentConfig&)> ref,
                std::function<std::string(E)> name, std::function<E(const std::string&)> parse) {
  Field f;
  f.path = path;
  f.doc = std::move(doc);
  f.get = [ref, name](const ExperimentConfig& c) { return json(name(ref(const_cast<ExperimentConfig&>(c)))); };
  f.set = [ref, parse, path](ExperimentConfig& c, const json& j) {
    try {
      ref(c) = parse(parse_as<std::string>(j, path));
    } catch (const ConfigError& e) {
      throw ConfigError(path + ": " + e.what());
    }
  };
  return f;
}

#define REF(T, expr) std::function<T&(ExperimentConfig&)>([](ExperimentConfig& c) -> T& { return expr; })

const std::vector<Field>& registry() {
  static const std::vector<Field> fields = [] {
    std::vector<Field> f;
    const auto act_name = std::function<std::string(Activation)>([](Activation a) { return to_string(a); });
    const auto act_parse = std::function<Activation(const std::string&)>(activation_from_string);

    f.push_back(leaf<std::uint64_t>("seed", "master seed; stages without an explicit seed derive theirs from it",
                                    REF(std::uint64_t, c.seed)));
    f.push_back(leaf<std::string>("out_dir", "output directory", REF(std::string, c.out_dir)));

    f.push_back(leaf<std::string>("dataset.name", "dataset label written to CSV rows", REF(std::string, c.dataset_name)));
    f.push_back(leaf<int>("dataset.n_traj", "number of trajectories", REF(int, c.dataset.n_traj)));
    f.push_back(leaf<int>("dataset.frames", "frames per trajectory", REF(int, c.dataset.frames)));
    {
      Field m;
      m.path = "dataset.mu_range";
      m.doc = "[lo, hi] interval for the regime parameter; the class threshold is its midpoint";
      m.get = [](const ExperimentConfig& c) { return json::array({c.dataset.mu_lo, c.dataset.mu_hi}); };
      m.set = [](ExperimentConfig& c, const json& j) {
        const auto v = parse_as<std::vector<double>>(j, "dataset.mu_range");
        if (v.size() != 2) {
          throw ConfigError("dataset.mu_range: expected [lo, hi]");
        }
        c.dataset.mu_lo = v[0];
        c.dataset.mu_hi = v[1];
      };
      f.push_back(m);
    }
    f.push_back(leaf<int>("dataset.dim", "state dimension D", REF(int, c.dataset.dim)));
    f.push_back(leaf<int>("dataset.n_test", "test trajectories", REF(int, c.dataset.n_test)));
    f.push_back(leaf<int>("dataset.n_val", "validation trajectories", REF(int, c.dataset.n_val)));
    f.push_back(leaf<double>("dataset.periods", "oscillation periods per trajectory at mid-range mu",
                             REF(double, c.dataset.periods)));
    f.push_back(leaf<double>("dataset.decay", "envelope decay of steady trajectories just below threshold",
                             REF(double, c.dataset.decay)));
    f.push_back(leaf<double>("dataset.perturbation", "amplitude of the tanh perturbation of the embedding map",
                             REF(double, c.dataset.perturbation)));
    f.push_back(leaf<std::optional<std::uint64_t>>("dataset.seed", "generator seed (null: derived)",
                                                   REF(std::optional<std::uint64_t>, c.dataset_seed)));

    f.push_back(leaf<int>("diffusion.T", "diffusion steps of the training schedule", REF(int, c.diffusion.T)));
    f.push_back(leaf<double>("diffusion.beta_start", "first beta of the linear schedule",
                             REF(double, c.diffusion.beta_start)));
    f.push_back(leaf<double>("diffusion.beta_end", "last beta of the linear schedule", REF(double, c.diffusion.beta_end)));
    f.push_back(leaf<int>("diffusion.steps", "strided DDIM steps for inversion and sampling",
                          REF(int, c.diffusion.steps)));
    f.push_back(leaf<std::vector<int>>("diffusion.hidden", "hidden widths of the noise predictor",
                                       REF(std::vector<int>, c.diffusion.net.hidden)));
    f.push_back(leaf<int>("diffusion.time_features", "sinusoidal timestep features (even)",
                          REF(int, c.diffusion.net.time_features)));
    f.push_back(leaf<int>("diffusion.cond_features", "sinusoidal features per condition value (even)",
                          REF(int, c.diffusion.net.cond_features)));
    f.push_back(enum_leaf<Activation>("diffusion.activation", "silu or tanh",
                                      REF(Activation, c.diffusion.net.activation), act_name, act_parse));
    f.push_back(leaf<int>("diffusion.epochs", "training epochs", REF(int, c.diffusion.train.epochs)));
    f.push_back(leaf<int>("diffusion.batch", "minibatch size", REF(int, c.diffusion.train.batch)));
    f.push_back(leaf<double>("diffusion.lr", "Adam learning rate", REF(double, c.diffusion.train.adam.lr)));
    f.push_back(leaf<double>("diffusion.final_lr_fraction", "cosine decay floor as a fraction of lr",
                             REF(double, c.diffusion.train.final_lr_fraction)));
    f.push_back(leaf<std::optional<std::uint64_t>>("diffusion.seed", "training seed (null: derived)",
                                                   REF(std::optional<std::uint64_t>, c.diffusion.seed)));

    f.push_back(leaf<int>("embedding.d", "embedding dimension", REF(int, c.embedding.d)));
    f.push_back(leaf<std::vector<int>>("embedding.hidden", "encoder hidden widths",
                                       REF(std::vector<int>, c.embedding.hidden)));
    f.push_back(leaf<double>("embedding.temperature", "InfoNCE temperature", REF(double, c.embedding.temperature)));
    f.push_back(leaf<std::optional<double>>("embedding.delta_t", "phase window for positives (null: 2 / (S - 1))",
                                            REF(std::optional<double>, c.embedding.delta_t)));
    f.push_back(leaf<double>("embedding.delta_y", "regime radius for positives (0 disables)",
                             REF(double, c.embedding.delta_y)));
    f.push_back(leaf<bool>("embedding.cross_trajectory",
                           "time positives span all trajectories (false: within one trajectory)",
                           REF(bool, c.embedding.cross_trajectory)));
    f.push_back(leaf<bool>("embedding.use_condition", "feed (tau, mu) features to the encoder",
                           REF(bool, c.embedding.use_condition)));
    f.push_back(leaf<int>("embedding.max_epochs", "epoch cap", REF(int, c.embedding.train.max_epochs)));
    f.push_back(leaf<int>("embedding.batches_per_epoch", "minibatches per epoch",
                          REF(int, c.embedding.train.batches_per_epoch)));
    f.push_back(leaf<int>("embedding.batch_trajectories", "trajectories per minibatch",
                          REF(int, c.embedding.train.batch_trajectories)));
    f.push_back(leaf<int>("embedding.anchors_per_trajectory", "anchors drawn per trajectory",
                          REF(int, c.embedding.train.anchors_per_trajectory)));
    f.push_back(leaf<double>("embedding.val_fraction", "fraction of training trajectories used for early stopping",
                             REF(double, c.embedding.train.val_fraction)));
    f.push_back(leaf<int>("embedding.val_batches", "fixed validation minibatches",
                          REF(int, c.embedding.train.val_batches)));
    f.push_back(leaf<int>("embedding.patience", "epochs without improvement before stopping",
                          REF(int, c.embedding.train.patience)));
    f.push_back(leaf<double>("embedding.min_improvement", "validation improvement that resets patience",
                             REF(double, c.embedding.train.min_improvement)));
    f.push_back(leaf<double>("embedding.lr", "Adam learning rate", REF(double, c.embedding.train.adam.lr)));
    f.push_back(leaf<std::optional<std::uint64_t>>("embedding.seed", "encoder seed (null: derived)",
                                                   REF(std::optional<std::uint64_t>, c.embedding.seed)));

    f.push_back(leaf<double>("traversal.lambda", "spline smoothing weight", REF(double, c.traversal.lambda)));
    f.push_back(leaf<int>("traversal.holdout_stride", "hide every n-th frame of test trajectories (n >= 4)",
                          REF(int, c.traversal.holdout_stride)));
    f.push_back(leaf<bool>("traversal.spline_in_z", "also evaluate the spline in Z",
                           REF(bool, c.traversal.spline_in_z)));
    f.push_back(leaf<int>("traversal.recurrent.hidden", "recurrent baseline hidden width",
                          REF(int, c.traversal.recurrent_hidden)));
    f.push_back(leaf<int>("traversal.recurrent.epochs", "recurrent baseline epochs",
                          REF(int, c.traversal.recurrent.epochs)));
    f.push_back(leaf<int>("traversal.recurrent.batch", "recurrent baseline minibatch size",
                          REF(int, c.traversal.recurrent.batch)));
    f.push_back(leaf<double>("traversal.recurrent.lr", "recurrent baseline learning rate",
                             REF(double, c.traversal.recurrent.adam.lr)));
    f.push_back(leaf<double>("traversal.recurrent.clip_norm", "gradient norm clip (0 disables)",
                             REF(double, c.traversal.recurrent.clip_norm)));
    f.push_back(leaf<std::optional<std::uint64_t>>("traversal.seed", "recurrent baseline seed (null: derived)",
                                                   REF(std::optional<std::uint64_t>, c.traversal.seed)));

    f.push_back(enum_leaf<Kernel>(
        "lifting.kernel", "uniform, inverse_distance or gaussian", REF(Kernel, c.lifting.kernel),
        std::function<std::string(Kernel)>([](Kernel k) { return to_string(k); }),
        std::function<Kernel(const std::string&)>(kernel_from_string)));
    f.push_back(enum_leaf<Metric>(
        "lifting.metric", "euclidean or cosine", REF(Metric, c.lifting.metric),
        std::function<std::string(Metric)>([](Metric m) { return to_string(m); }),
        std::function<Metric(const std::string&)>(metric_from_string)));
    f.push_back(leaf<std::vector<int>>("lifting.k_grid", "candidate neighbour counts",
                                       REF(std::vector<int>, c.lifting.k_grid)));
    f.push_back(leaf<double>("lifting.bandwidth", "gaussian sigma (<= 0: median nearest-neighbour distance)",
                             REF(double, c.lifting.bandwidth)));
    f.push_back(leaf<double>("lifting.heldout_fraction", "training trajectories held out to select k",
                             REF(double, c.lifting.heldout_fraction)));

    f.push_back(leaf<int>("classify.d", "embedding dimension of the class encoder (<= 3 for KDE)",
                          REF(int, c.classify.d)));
    f.push_back(leaf<int>("classify.folds", "leave-mu-band-out folds (1: train split vs test split)",
                          REF(int, c.classify.folds)));
    f.push_back(leaf<double>("classify.svm_lambda", "SVM regularisation", REF(double, c.classify.svm.lambda)));
    f.push_back(leaf<long>("classify.svm_steps", "SVM subgradient steps", REF(long, c.classify.svm.steps)));
    f.push_back(leaf<double>("classify.svm_gamma", "RBF width (<= 0: 1 / feature count)",
                             REF(double, c.classify.svm.gamma)));
    f.push_back(leaf<bool>("classify.shuffle_labels", "permutation control: shuffle labels before training",
                           REF(bool, c.classify.shuffle_labels)));
    f.push_back(leaf<std::optional<std::uint64_t>>("classify.seed", "class encoder and SVM seed (null: derived)",
                                                   REF(std::optional<std::uint64_t>, c.classify.seed)));

    f.push_back(leaf<double>("kde.bandwidth", "KDE bandwidth (<= 0: Scott's rule)", REF(double, c.kde.bandwidth)));
    f.push_back(leaf<std::vector<double>>("kde.eta", "traversal fractions in [0, 1]",
                                          REF(std::vector<double>, c.kde.eta)));
    f.push_back(leaf<int>("kde.source_class", "class the traversal starts from (0 or 1)",
                          REF(int, c.kde.source_class)));
    f.push_back(leaf<int>("kde.max_nodes_per_axis", "grid resolution cap (spacing never exceeds the bandwidth)",
                          REF(int, c.kde.max_nodes_per_axis)));

    f.push_back(leaf<std::vector<int>>("sweep.dims", "embedding dimensions for sweep-dim",
                                       REF(std::vector<int>, c.sweep_dims)));
    f.push_back(leaf<int>("render.grid", "rendered image size in pixels", REF(int, c.render_grid)));
    f.push_back(leaf<int>("render.strip_trajectories", "test trajectories exported as PGM strips",
                          REF(int, c.strip_trajectories)));
    return f;
  }();
  return fields;
}

#undef REF

const std::map<std::string, const Field*>& by_path() {
  static const std::map<std::string, const Field*> index = [] {
    std::map<std::string, const Field*> m;
    for (const auto& f : registry()) {
      m[f.path] = &f;
    }
    return m;
  }();
  return index;
}

void apply(ExperimentConfig& c, const json& node, const std::string& prefix) {
  for (auto it = node.begin(); it != node.end(); ++it) {
    const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    const auto found = by_path().find(path);
    if (found != by_path().end()) {
      found->second->set(c, it.value());
    } else if (it.value().is_object()) {
      bool known_prefix = false;
      for (const auto& [p, _] : by_path()) {
        if (p.rfind(path + ".", 0) == 0) {
          known_prefix = true;
          break;
        }
      }
      if (!known_prefix) {
        throw ConfigError(path + ": unknown field");
      }
      apply(c, it.value(), path);
    } else {
      throw ConfigError(path + ": unknown field");
    }
  }
}

json::json_pointer pointer_for(const std::string& path) {
  std::string p = "/" + path;
  for (auto& ch : p) {
    if (ch == '.') {
      ch = '/';
    }
  }
  return json::json_pointer(p);
}

} // namespace

ExperimentConfig config_from_json(const json& doc) {
  if (!doc.is_object()) {
    throw ConfigError("config: top level must be a JSON object");
  }
  ExperimentConfig c;
  apply(c, doc, "");
  validate_config(c);
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes;
  try {
    bytes = read_file_bytes(path);
  } catch (const Error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  json doc;
  try {
    doc = json::parse(bytes.begin(), bytes.end());
  } catch (const json::parse_error& e) {
    throw ConfigError("config: " + path.string() + " is not valid JSON (byte " + std::to_string(e.byte) + ")");
  }
  return config_from_json(doc);
}

json config_to_json(const ExperimentConfig& config) {
  json out = json::object();
  for (const auto& f : registry()) {
    out[pointer_for(f.path)] = f.get(config);
  }
  return out;
}

std::string canonical_text(const ExperimentConfig& config) { return config_to_json(config).dump(); }

std::uint64_t config_hash(const ExperimentConfig& config) { return fnv1a64(canonical_text(config)); }

json config_schema() {
  const ExperimentConfig defaults;
  json fields = json::array();
  for (const auto& f : registry()) {
    fields.push_back({{"path", f.path}, {"default", f.get(defaults)}, {"description", f.doc}});
  }
  return {{"fields", fields}, {"defaults", config_to_json(defaults)}};
}

void validate_config(const ExperimentConfig& c) {
  const auto& d = c.dataset;
  if (d.dim < 2) {
    throw ConfigError("dataset.dim: must be at least 2");
  }
  if (d.n_traj < 2) {
    throw ConfigError("dataset.n_traj: need at least 2 trajectories");
  }
  if (d.frames < 8) {
    throw ConfigError("dataset.frames: need at least 8 frames per trajectory");
  }
  if (!(d.mu_lo <= d.mu_hi)) {
    throw ConfigError("dataset.mu_range: lower bound must not exceed upper bound");
  }
  if (d.n_test < 1 || d.n_val < 0 || d.n_test + d.n_val >= d.n_traj) {
    throw ConfigError("dataset.n_test: need at least one test trajectory and at least one training trajectory");
  }
  if (c.diffusion.T < 2) {
    throw ConfigError("diffusion.T: need at least 2 diffusion steps");
  }
  if (c.diffusion.steps < 1 || c.diffusion.steps > c.diffusion.T) {
    throw ConfigError("diffusion.steps: must lie in [1, diffusion.T]");
  }
  if (c.diffusion.train.epochs < 1 || c.diffusion.train.batch < 1) {
    throw ConfigError("diffusion.epochs: epochs and batch must be positive");
  }
  if (c.embedding.d < 1) {
    throw ConfigError("embedding.d: must be positive");
  }
  if (!(c.embedding.temperature > 0.0)) {
    throw ConfigError("embedding.temperature: must be positive");
  }
  if (c.embedding.delta_t && !(*c.embedding.delta_t >= 0.0)) {
    throw ConfigError("embedding.delta_t: must be non-negative");
  }
  if (c.traversal.holdout_stride < 4) {
    throw ConfigError("traversal.holdout_stride: must be at least 4 so the extrapolation window stays observed");
  }
  if (c.traversal.holdout_stride + 1 > d.frames - 1) {
    throw ConfigError("traversal.holdout_stride: leaves no frame to hold out");
  }
  if (!(c.traversal.lambda >= 0.0)) {
    throw ConfigError("traversal.lambda: must be non-negative");
  }
  if (c.lifting.k_grid.empty()) {
    throw ConfigError("lifting.k_grid: must not be empty");
  }
  for (int k : c.lifting.k_grid) {
    if (k < 1) {
      throw ConfigError("lifting.k_grid: entries must be at least 1");
    }
  }
  if (!(c.lifting.heldout_fraction > 0.0 && c.lifting.heldout_fraction < 1.0)) {
    throw ConfigError("lifting.heldout_fraction: must lie in (0, 1)");
  }
  if (c.classify.d < 1 || c.classify.d > 3) {
    throw ConfigError("classify.d: must lie in [1, 3]");
  }
  if (c.classify.folds < 1) {
    throw ConfigError("classify.folds: must be at least 1");
  }
  if (c.classify.folds == 2) {
    // Two mu bands meet at the class threshold, so every fold would train on one class.
    throw ConfigError("classify.folds: 2 bands split exactly at the class threshold; use 1 or at least 3");
  }
  if (c.kde.eta.empty()) {
    throw ConfigError("kde.eta: must not be empty");
  }
  for (double e : c.kde.eta) {
    if (!(e >= 0.0 && e <= 1.0)) {
      throw ConfigError("kde.eta: values must lie in [0, 1]");
    }
  }
  if (c.kde.source_class != 0 && c.kde.source_class != 1) {
    throw ConfigError("kde.source_class: must be 0 or 1");
  }
  if (c.sweep_dims.empty()) {
    throw ConfigError("sweep.dims: must not be empty");
  }
  for (int v : c.sweep_dims) {
    if (v < 1) {
      throw ConfigError("sweep.dims: entries must be positive");
    }
  }
  if (c.render_grid < 8) {
    throw ConfigError("render.grid: must be at least 8");
  }
  if (c.strip_trajectories < 0) {
    throw ConfigError("render.strip_trajectories: must be non-negative");
  }
}

std::uint64_t stage_seed(const ExperimentConfig& config, std::string_view stage) {
  std::optional<std::uint64_t> explicit_seed;
  if (stage == "dataset") {
    explicit_seed = config.dataset_seed;
  } else if (stage == "diffusion") {
    explicit_seed = config.diffusion.seed;
  } else if (stage == "embedding") {
    explicit_seed = config.embedding.seed;
  } else if (stage == "traversal") {
    explicit_seed = config.traversal.seed;
  } else if (stage == "classify") {
    explicit_seed = config.classify.seed;
  }
  if (explicit_seed) {
    return *explicit_seed;
  }
  return Rng::stream(config.seed, std::string("stage.") + std::string(stage)).next_u64();
}

} // namespace conda_dyn
