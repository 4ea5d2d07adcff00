#include "conda_dyn/harness.hpp"

#include "conda_dyn/binio.hpp"
#include "conda_dyn/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cctype>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <numeric>
#include <sstream>

namespace conda_dyn {

using nlohmann::json;

namespace {

constexpr char kLatentMagic[] = "CDYNLATS";

std::string hex16(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

Matrix gather(const Matrix& m, std::span<const int> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  }
  return out;
}

std::string slug(const std::string& s) {
  std::string out;
  for (char ch : s) {
    if (std::isalnum(static_cast<unsigned char>(ch))) {
      out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    } else if (ch == '=' || ch == '.') {
      out.push_back('_');
    }
  }
  return out;
}

double resolved_delta_t(const ExperimentConfig& c) {
  return c.embedding.delta_t ? *c.embedding.delta_t : 2.0 / static_cast<double>(c.dataset.frames - 1);
}

std::unique_ptr<bool[]> mask_of(int n, std::span<const int> hidden) {
  std::unique_ptr<bool[]> m(new bool[n]);
  std::fill(m.get(), m.get() + n, false);
  for (int s : hidden) {
    m[s] = true;
  }
  return m;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

void write_manifest(const ExperimentConfig& config, const std::string& command, const CommandResult& result,
                    const std::map<std::string, double>& seconds) {
  const std::filesystem::path out = config.out_dir;
  json m;
  m["command"] = command;
  m["config_hash"] = hex16(config_hash(config));
  m["config"] = config_to_json(config);
  json files = json::array();
  for (const auto& a : result.artifacts) {
    files.push_back(std::filesystem::relative(a, out).generic_string());
  }
  m["artifacts"] = files;
  m["stage_seconds"] = seconds;
  json metrics = json::array();
  for (const auto& r : result.rows) {
    metrics.push_back({{"dataset", r.dataset},
                       {"space", r.space},
                       {"method", r.method},
                       {"metric", r.metric},
                       {"value", r.value},
                       {"std", r.std},
                       {"n", r.count}});
  }
  m["metrics"] = metrics;
  m["summary"] = result.summary;
  write_text(out / ("manifest_" + command + ".json"), m.dump(2) + "\n");
}

MetricReport report(const ExperimentConfig& c, std::string space, std::string method, std::string metric,
                    double value, double std, long n) {
  MetricReport r;
  r.dataset = c.dataset_name;
  r.space = std::move(space);
  r.method = std::move(method);
  r.metric = std::move(metric);
  r.value = value;
  r.std = std;
  r.count = n;
  r.seed = c.seed;
  if (!std::isfinite(value)) {
    throw NumericError("metric " + r.metric + " for " + r.space + "/" + r.method + " is not finite");
  }
  return r;
}

std::vector<FeatureLatent> feature_latents(const LatentSet& lat, std::span<const int> rows) {
  std::vector<FeatureLatent> out;
  out.reserve(rows.size());
  for (int r : rows) {
    out.push_back({lat.z.row(r).transpose(), lat.conditions[r], lat.steps});
  }
  return out;
}

} // namespace

// ---------------------------------------------------------------------------

void save_latents(const LatentSet& lat, const std::filesystem::path& path) {
  BinaryWriter w(kLatentMagic);
  w.u32(static_cast<std::uint32_t>(lat.steps));
  w.matrix(lat.z);
  w.u64(lat.conditions.size());
  for (std::size_t i = 0; i < lat.conditions.size(); ++i) {
    const auto& c = lat.conditions[i];
    w.f64(c.tau);
    w.f64(c.mu);
    w.u8(c.class_label ? 1 : 0);
    w.i64(c.class_label.value_or(0));
    w.i64(lat.trajectory[i]);
    w.i64(lat.frame[i]);
  }
  w.save(path);
}

LatentSet load_latents(const std::filesystem::path& path) {
  auto r = BinaryReader::open(path, kLatentMagic);
  LatentSet lat;
  lat.steps = static_cast<int>(r.u32());
  lat.z = r.matrix();
  const std::uint64_t n = r.u64();
  if (n != static_cast<std::uint64_t>(lat.z.rows())) {
    throw ParseError("latent file row count disagrees with its matrix", r.offset());
  }
  lat.conditions.resize(n);
  lat.trajectory.resize(n);
  lat.frame.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& c = lat.conditions[i];
    c.tau = r.f64();
    c.mu = r.f64();
    const bool has = r.u8() != 0;
    const auto label = r.i64();
    if (has) {
      c.class_label = static_cast<int>(label);
    }
    lat.trajectory[i] = static_cast<int>(r.i64());
    lat.frame[i] = static_cast<int>(r.i64());
  }
  r.expect_end();
  return lat;
}

// ---------------------------------------------------------------------------

Workspace::Workspace(ExperimentConfig config, RunOptions options)
    : config_(std::move(config)), options_(options) {
  validate_config(config_);
}

void Workspace::log(const std::string& msg) const {
  if (options_.verbose) {
    std::cerr << "[conda_dyn] " << msg << std::endl;
  }
}

void Workspace::time_stage(const std::string& name, std::chrono::steady_clock::time_point start) {
  seconds_[name] += std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::filesystem::path Workspace::cache_path(const std::string& key, const std::string& file) const {
  return std::filesystem::path(config_.out_dir) / "cache" / key / file;
}

std::string Workspace::dataset_key() const {
  json j = config_to_json(config_)["dataset"];
  j.erase("name");
  j["seed"] = stage_seed(config_, "dataset");
  return hex16(fnv1a64(j.dump()));
}

std::string Workspace::diffusion_key() const {
  json j = config_to_json(config_)["diffusion"];
  j.erase("steps");
  j["seed"] = stage_seed(config_, "diffusion");
  j["parent"] = dataset_key();
  return hex16(fnv1a64(j.dump()));
}

std::string Workspace::latents_key() const {
  const json j = {{"parent", diffusion_key()}, {"steps", config_.diffusion.steps}};
  return hex16(fnv1a64(j.dump()));
}

std::string Workspace::encoder_key(int d) const {
  json j = config_to_json(config_)["embedding"];
  j["d"] = d;
  j["seed"] = stage_seed(config_, "embedding");
  j["parent"] = latents_key();
  return hex16(fnv1a64(j.dump()));
}

std::string Workspace::class_encoder_key() const {
  json j = config_to_json(config_)["embedding"];
  j["d"] = config_.classify.d;
  j["class_match"] = true;
  j["seed"] = stage_seed(config_, "classify");
  j["parent"] = latents_key();
  return hex16(fnv1a64(j.dump()));
}

const Dataset& Workspace::dataset() {
  if (dataset_) {
    return *dataset_;
  }
  const auto path = cache_path(dataset_key(), "dataset.bin");
  const auto start = std::chrono::steady_clock::now();
  if (!options_.force && std::filesystem::exists(path)) {
    dataset_ = load_dataset(path);
  } else {
    log("simulate: generating dataset");
    OscillatorSpec spec = config_.dataset;
    spec.seed = stage_seed(config_, "dataset");
    dataset_ = generate_oscillator(spec);
    save_dataset(*dataset_, path);
  }
  cached_.push_back(path);
  time_stage("simulate", start);
  return *dataset_;
}

const Denoiser& Workspace::denoiser() {
  if (denoiser_) {
    return *denoiser_;
  }
  const Dataset& ds = dataset();
  const auto path = cache_path(diffusion_key(), "denoiser.ckpt");
  const auto start = std::chrono::steady_clock::now();
  if (!options_.force && std::filesystem::exists(path)) {
    auto [model, sched] = load_denoiser(path);
    denoiser_ = std::move(model);
    schedule_ = std::move(sched);
  } else {
    log("diffusion: training noise predictor");
    const std::uint64_t seed = stage_seed(config_, "diffusion");
    DenoiserConfig net = config_.diffusion.net;
    net.dim = ds.spec.dim;
    Rng init = Rng::stream(seed, "diffusion.init");
    Denoiser model(net, init);
    NoiseSchedule sched = make_schedule(config_.diffusion.T, config_.diffusion.beta_start, config_.diffusion.beta_end);
    DiffusionTrainConfig train = config_.diffusion.train;
    train.seed = seed;
    const TrainCurve curve = train_denoiser(model, ds, sched, train);
    log("diffusion: final epoch loss " + format_number(curve.epoch_loss.back()));
    save_denoiser(model, sched, path);
    json c = curve.epoch_loss;
    write_text(cache_path(diffusion_key(), "train_curve.json"), c.dump() + "\n");
    denoiser_ = std::move(model);
    schedule_ = std::move(sched);
  }
  cached_.push_back(path);
  time_stage("diffusion", start);
  return *denoiser_;
}

const NoiseSchedule& Workspace::schedule() {
  denoiser();
  return *schedule_;
}

const LatentSet& Workspace::latents(bool may_compute) {
  if (latents_) {
    return *latents_;
  }
  const auto path = cache_path(latents_key(), "latents.bin");
  if (!options_.force && std::filesystem::exists(path)) {
    const auto start = std::chrono::steady_clock::now();
    dataset();
    latents_ = load_latents(path);
    cached_.push_back(path);
    time_stage("invert", start);
    return *latents_;
  }
  if (!may_compute) {
    throw InputError("missing inverted latents for this configuration (expected " + path.string() +
                     "); run `conda_dyn pipeline` with the same config first");
  }
  const Dataset& ds = dataset();
  const Denoiser& model = denoiser();
  const auto start = std::chrono::steady_clock::now();
  log("invert: DDIM inversion of every frame");
  LatentSet lat;
  lat.steps = config_.diffusion.steps;
  const std::size_t n = ds.frame_count();
  Matrix x(static_cast<Eigen::Index>(n), ds.spec.dim);
  Eigen::Index row = 0;
  for (std::size_t t = 0; t < ds.trajectories.size(); ++t) {
    const auto& tr = ds.trajectories[t];
    for (std::size_t f = 0; f < tr.frames.size(); ++f) {
      x.row(row++) = tr.frames[f].x.transpose();
      lat.conditions.push_back(tr.frames[f].condition);
      lat.trajectory.push_back(static_cast<int>(t));
      lat.frame.push_back(static_cast<int>(f));
    }
  }
  lat.z = ddim_invert_many(model, x, lat.conditions, schedule(), lat.steps);
  save_latents(lat, path);
  latents_ = std::move(lat);
  cached_.push_back(path);
  time_stage("invert", start);
  return *latents_;
}

std::vector<int> Workspace::rows_of(Split split) {
  const Dataset& ds = dataset();
  const LatentSet& lat = latents(false);
  std::vector<int> rows;
  for (std::size_t i = 0; i < lat.trajectory.size(); ++i) {
    if (ds.splits[lat.trajectory[i]] == split) {
      rows.push_back(static_cast<int>(i));
    }
  }
  return rows;
}

const Encoder& Workspace::dynamics_encoder(int d, bool may_compute) {
  if (auto it = encoders_.find(d); it != encoders_.end()) {
    return it->second;
  }
  const auto path = cache_path(encoder_key(d), "encoder.ckpt");
  if (!options_.force && std::filesystem::exists(path)) {
    encoders_.emplace(d, load_encoder(path));
    cached_.push_back(path);
    return encoders_.at(d);
  }
  if (!may_compute) {
    throw InputError("missing trained encoder for this configuration (expected " + path.string() +
                     "); run `conda_dyn pipeline` with the same config first");
  }
  const LatentSet& lat = latents(may_compute);
  const auto start = std::chrono::steady_clock::now();
  log("embedding: training encoder with d = " + std::to_string(d));
  const std::uint64_t seed = stage_seed(config_, "embedding");
  EncoderConfig ec;
  ec.input_dim = static_cast<int>(lat.z.cols());
  ec.embed_dim = d;
  ec.hidden = config_.embedding.hidden;
  ec.use_condition = config_.embedding.use_condition;
  Rng init = Rng::stream(seed, "embedding.init");
  Encoder enc(ec, init);
  ContrastiveTrainConfig tc = config_.embedding.train;
  tc.temperature = config_.embedding.temperature;
  tc.rule = PositiveRule{resolved_delta_t(config_), config_.embedding.delta_y, false, config_.embedding.cross_trajectory};
  tc.seed = seed;
  const auto rows = rows_of(Split::train);
  const auto latents_train = feature_latents(lat, rows);
  std::vector<int> ids;
  for (int r : rows) {
    ids.push_back(lat.trajectory[r]);
  }
  const ContrastiveCurve curve = train_encoder(enc, latents_train, ids, tc);
  log("embedding: best validation loss at epoch " + std::to_string(curve.best_epoch));
  save_encoder(enc, path);
  write_text(cache_path(encoder_key(d), "train_curve.json"),
             json{{"train", curve.train_loss}, {"val", curve.val_loss}, {"best_epoch", curve.best_epoch}}.dump() +
                 "\n");
  encoders_.emplace(d, std::move(enc));
  cached_.push_back(path);
  time_stage("embedding", start);
  return encoders_.at(d);
}

const Encoder& Workspace::class_encoder() {
  if (class_encoder_) {
    return *class_encoder_;
  }
  const auto path = cache_path(class_encoder_key(), "class_encoder.ckpt");
  if (!options_.force && std::filesystem::exists(path)) {
    class_encoder_ = load_encoder(path);
    cached_.push_back(path);
    return *class_encoder_;
  }
  const LatentSet& lat = latents(false);
  const auto start = std::chrono::steady_clock::now();
  log("classify: training class encoder with d = " + std::to_string(config_.classify.d));
  const std::uint64_t seed = stage_seed(config_, "classify");
  EncoderConfig ec;
  ec.input_dim = static_cast<int>(lat.z.cols());
  ec.embed_dim = config_.classify.d;
  ec.hidden = config_.embedding.hidden;
  // Labels are a threshold of mu, so the class probe never sees the condition.
  ec.use_condition = false;
  Rng init = Rng::stream(seed, "class_encoder.init");
  Encoder enc(ec, init);
  ContrastiveTrainConfig tc = config_.embedding.train;
  tc.temperature = config_.embedding.temperature;
  tc.rule = PositiveRule{resolved_delta_t(config_), 0.0, true};
  tc.seed = seed;
  const auto rows = rows_of(Split::train);
  const auto latents_train = feature_latents(lat, rows);
  std::vector<int> ids;
  for (int r : rows) {
    ids.push_back(lat.trajectory[r]);
  }
  train_encoder(enc, latents_train, ids, tc);
  save_encoder(enc, path);
  class_encoder_ = std::move(enc);
  cached_.push_back(path);
  time_stage("class_encoder", start);
  return *class_encoder_;
}

// ---------------------------------------------------------------------------

std::string csv_header() { return "dataset,space,method,metric,value,std,n,seed"; }

std::string csv_row(const MetricReport& r) {
  return r.dataset + "," + r.space + "," + r.method + "," + r.metric + "," + format_number(r.value) + "," +
         format_number(r.std) + "," + std::to_string(r.count) + "," + std::to_string(r.seed);
}

void write_csv(const std::filesystem::path& path, const std::vector<MetricReport>& rows) {
  std::string text = csv_header() + "\n";
  for (const auto& r : rows) {
    text += csv_row(r) + "\n";
  }
  write_text(path, text);
}

void write_pgm(const std::filesystem::path& path, const Matrix& image) {
  const std::string header =
      "P5\n" + std::to_string(image.cols()) + " " + std::to_string(image.rows()) + "\n255\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  for (Eigen::Index r = 0; r < image.rows(); ++r) {
    for (Eigen::Index c = 0; c < image.cols(); ++c) {
      const double v = std::clamp(image(r, c), 0.0, 1.0);
      bytes.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0)));
    }
  }
  write_file_bytes(path, bytes);
}

Matrix hstack(const std::vector<Matrix>& images) {
  if (images.empty()) {
    return Matrix();
  }
  const Eigen::Index h = images.front().rows();
  Eigen::Index w = 0;
  for (const auto& im : images) {
    if (im.rows() != h) {
      throw ShapeError("hstack: images differ in height");
    }
    w += im.cols();
  }
  Matrix out(h, w);
  Eigen::Index at = 0;
  for (const auto& im : images) {
    out.middleCols(at, im.cols()) = im;
    at += im.cols();
  }
  return out;
}

// ---------------------------------------------------------------------------

std::vector<int> holdout_frames(int frames, int stride) {
  std::vector<int> out;
  for (int s = stride; s <= frames - 2; s += stride) {
    out.push_back(s);
  }
  return out;
}

std::vector<Prediction> predict_heldout(Workspace& ws, const Matrix& c_all, bool include_z,
                                        const std::vector<std::string>& only_methods) {
  const ExperimentConfig& cfg = ws.config();
  const Dataset& ds = ws.dataset();
  const LatentSet& lat = ws.latents();
  const int S = ds.spec.frames;
  const double h = 1.0 / static_cast<double>(S - 1);
  const auto hidden = holdout_frames(S, cfg.traversal.holdout_stride);
  const auto mask = mask_of(S, hidden);
  std::vector<double> alpha_obs;
  std::vector<int> obs_frames;
  for (int f = 0; f < S; ++f) {
    if (!mask[f]) {
      obs_frames.push_back(f);
      alpha_obs.push_back(static_cast<double>(f) * h);
    }
  }
  const auto test_traj = ds.indices(Split::test);
  const auto train_traj = ds.indices(Split::train);
  const std::uint64_t seed = stage_seed(cfg, "traversal");
  const auto wanted = [&](const std::string& m) {
    return only_methods.empty() || std::find(only_methods.begin(), only_methods.end(), m) != only_methods.end();
  };

  std::vector<std::pair<std::string, const Matrix*>> spaces;
  if (include_z) {
    spaces.emplace_back("Z", &lat.z);
  }
  spaces.emplace_back("C", &c_all);

  std::vector<Prediction> out;
  for (const auto& [space, values] : spaces) {
    const Eigen::Index dim = values->cols();
    std::vector<std::string> methods{"Lerp", "Slerp", "Recurrent", "TEX-1", "TEX-2"};
    if (space == "C" || cfg.traversal.spline_in_z) {
      methods.push_back("Spline");
    }
    methods.erase(std::remove_if(methods.begin(), methods.end(), [&](const auto& m) { return !wanted(m); }),
                  methods.end());
    if (methods.empty()) {
      continue;
    }

    std::optional<RecurrentPredictor> rnn;
    if (wanted("Recurrent")) {
      std::vector<Matrix> seqs;
      for (auto t : train_traj) {
        seqs.push_back(values->middleRows(static_cast<Eigen::Index>(t) * S, S));
      }
      Rng init = Rng::stream(seed, "recurrent.init." + space);
      rnn.emplace(RecurrentConfig{static_cast<int>(dim), cfg.traversal.recurrent_hidden}, init);
      RecurrentTrainConfig rc = cfg.traversal.recurrent;
      rc.seed = Rng::stream(seed, "recurrent.train." + space).next_u64();
      train_recurrent(*rnn, seqs, rc);
    }

    const Eigen::Index total = static_cast<Eigen::Index>(test_traj.size() * hidden.size());
    std::map<std::string, Prediction> per;
    for (const auto& m : methods) {
      Prediction p;
      p.space = space;
      p.method = m;
      p.values.resize(total, dim);
      p.truth.resize(total, dim);
      per.emplace(m, std::move(p));
    }
    Eigen::Index at = 0;
    for (auto t : test_traj) {
      const Eigen::Index base = static_cast<Eigen::Index>(t) * S;
      const Matrix traj = values->middleRows(base, S);
      std::optional<SplineCurve> curve;
      if (per.count("Spline")) {
        Matrix obs(static_cast<Eigen::Index>(obs_frames.size()), dim);
        for (std::size_t i = 0; i < obs_frames.size(); ++i) {
          obs.row(static_cast<Eigen::Index>(i)) = traj.row(obs_frames[i]);
        }
        curve = fit_spline(alpha_obs, obs, cfg.traversal.lambda);
      }
      Matrix filled;
      if (rnn) {
        filled = rnn->fill(traj, std::span<const bool>(mask.get(), static_cast<std::size_t>(S)));
      }
      for (int s : hidden) {
        const Vector prev = traj.row(s - 1).transpose();
        const Vector next = traj.row(s + 1).transpose();
        for (auto& [m, p] : per) {
          Vector v;
          if (m == "Lerp") {
            v = lerp(prev, next, 0.5);
          } else if (m == "Slerp") {
            v = slerp(prev, next, 0.5);
          } else if (m == "Recurrent") {
            v = filled.row(s).transpose();
          } else if (m == "TEX-1" || m == "TEX-2") {
            v = tex_extrapolate(trailing_stencil(traj.middleRows(s - 3, 3), h), m == "TEX-1" ? 1 : 2);
          } else {
            v = spline_traverse(*curve, static_cast<double>(s - 1) * h, h).c;
          }
          p.values.row(at) = v.transpose();
          p.truth.row(at) = traj.row(s);
        }
        for (auto& [m, p] : per) {
          p.rows.push_back(static_cast<int>(base + s));
        }
        ++at;
      }
    }
    for (const auto& m : methods) {
      out.push_back(std::move(per.at(m)));
    }
  }
  return out;
}

KnnTable fit_lifting(Workspace& ws, const Matrix& c_all, KSelection* selection) {
  const ExperimentConfig& cfg = ws.config();
  const LatentSet& lat = ws.latents();
  const Dataset& ds = ws.dataset();
  auto traj = ds.indices(Split::train);
  Rng rng = Rng::stream(stage_seed(cfg, "embedding"), "lifting.split");
  rng.shuffle(std::span(traj));
  const std::size_t n_hold = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::lround(cfg.lifting.heldout_fraction * static_cast<double>(traj.size()))), 1,
      traj.size() > 1 ? traj.size() - 1 : 1);
  std::vector<char> held(ds.trajectories.size(), 0);
  for (std::size_t i = 0; i < n_hold && traj.size() > 1; ++i) {
    held[traj[i]] = 1;
  }
  std::vector<int> all_rows;
  std::vector<int> fit_rows;
  std::vector<int> held_rows;
  for (std::size_t r = 0; r < lat.trajectory.size(); ++r) {
    const int t = lat.trajectory[r];
    if (ds.splits[t] != Split::train) {
      continue;
    }
    all_rows.push_back(static_cast<int>(r));
    (held[t] ? held_rows : fit_rows).push_back(static_cast<int>(r));
  }
  const auto conditions_of = [&](const std::vector<int>& rows) {
    std::vector<Condition> y;
    for (int r : rows) {
      y.push_back(lat.conditions[r]);
    }
    return y;
  };
  KnnConfig kc;
  kc.metric = cfg.lifting.metric;
  kc.kernel = cfg.lifting.kernel;
  kc.bandwidth = cfg.lifting.bandwidth;
  kc.k = *std::max_element(cfg.lifting.k_grid.begin(), cfg.lifting.k_grid.end());
  int k = cfg.lifting.k_grid.front();
  if (!held_rows.empty()) {
    const KnnTable probe =
        build_table(gather(c_all, fit_rows), gather(lat.z, fit_rows), conditions_of(fit_rows), kc, lat.steps);
    KSelection sel = select_k(probe, cfg.lifting.k_grid, gather(c_all, held_rows), gather(lat.z, held_rows));
    k = sel.k;
    if (selection) {
      *selection = sel;
    }
  }
  kc.k = k;
  return build_table(gather(c_all, all_rows), gather(lat.z, all_rows), conditions_of(all_rows), kc, lat.steps);
}

std::vector<MetricReport> score_predictions(Workspace& ws, const std::vector<Prediction>& predictions,
                                            const KnnTable& table, std::map<std::string, Matrix>* decoded) {
  const ExperimentConfig& cfg = ws.config();
  const Dataset& ds = ws.dataset();
  const LatentSet& lat = ws.latents();
  std::vector<MetricReport> rows;
  for (const auto& p : predictions) {
    const Eigen::Index n = p.values.rows();
    // Per-trajectory grouping, in prediction order.
    std::vector<int> traj_of(n);
    std::vector<int> traj_ids;
    for (Eigen::Index i = 0; i < n; ++i) {
      traj_of[i] = lat.trajectory[p.rows[i]];
      if (traj_ids.empty() || traj_ids.back() != traj_of[i]) {
        traj_ids.push_back(traj_of[i]);
      }
    }
    const auto per_traj = [&](const std::function<double(const std::vector<Eigen::Index>&)>& fn) {
      std::vector<double> v;
      for (int t : traj_ids) {
        std::vector<Eigen::Index> idx;
        for (Eigen::Index i = 0; i < n; ++i) {
          if (traj_of[i] == t) {
            idx.push_back(i);
          }
        }
        v.push_back(fn(idx));
      }
      return v;
    };
    const auto sub = [](const Matrix& m, const std::vector<Eigen::Index>& idx) {
      Matrix out(static_cast<Eigen::Index>(idx.size()), m.cols());
      for (std::size_t i = 0; i < idx.size(); ++i) {
        out.row(static_cast<Eigen::Index>(i)) = m.row(idx[i]);
      }
      return out;
    };

    const auto own = per_traj([&](const auto& idx) { return rmse(sub(p.values, idx), sub(p.truth, idx)); });
    rows.push_back(report(cfg, p.space, p.method, "rmse", rmse(p.values, p.truth), mean_std(own).second, n));

    const Matrix z_hat = p.space == "Z" ? p.values : lift_many(table, p.values);
    std::vector<Condition> y;
    Matrix x_true(n, ds.spec.dim);
    for (Eigen::Index i = 0; i < n; ++i) {
      const int r = p.rows[i];
      y.push_back(lat.conditions[r]);
      x_true.row(i) = ds.trajectories[lat.trajectory[r]].frames[lat.frame[r]].x.transpose();
    }
    const Matrix x_hat = ddim_sample_many(ws.denoiser(), z_hat, y, ws.schedule(), cfg.diffusion.steps);
    if (decoded) {
      (*decoded)[p.space + "/" + p.method] = x_hat;
    }
    const auto srm = per_traj([&](const auto& idx) { return rmse(sub(x_hat, idx), sub(x_true, idx)); });
    rows.push_back(report(cfg, p.space, p.method, "state_rmse", rmse(x_hat, x_true), mean_std(srm).second, n));

    std::vector<double> ps(n);
    std::vector<double> ss(n);
    parallel_for(static_cast<std::size_t>(n), [&](std::size_t i) {
      const Eigen::Index r = static_cast<Eigen::Index>(i);
      const Matrix a = render_state(x_hat.row(r).transpose(), ds.map, cfg.render_grid);
      const Matrix b = render_state(x_true.row(r).transpose(), ds.map, cfg.render_grid);
      ps[i] = psnr(a, b, 1.0);
      ss[i] = ssim(a, b, 1.0);
    });
    const auto [pm, psd] = mean_std(ps);
    const auto [sm, ssd] = mean_std(ss);
    rows.push_back(report(cfg, p.space, p.method, "psnr", pm, psd, n));
    rows.push_back(report(cfg, p.space, p.method, "ssim", sm, ssd, n));

    std::vector<Matrix> pred_traj;
    std::vector<Matrix> true_traj;
    for (int t : traj_ids) {
      std::vector<Eigen::Index> idx;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (traj_of[i] == t) {
          idx.push_back(i);
        }
      }
      pred_traj.push_back(sub(x_hat, idx));
      true_traj.push_back(sub(x_true, idx));
    }
    const TaeSummary tae = total_abs_error(pred_traj, true_traj);
    rows.push_back(report(cfg, p.space, p.method, "tae", tae.mean, tae.std, static_cast<long>(traj_ids.size())));
  }
  return rows;
}

// ---------------------------------------------------------------------------

CommandResult cmd_simulate(const ExperimentConfig& config, const RunOptions& options) {
  Workspace ws(config, options);
  CommandResult res;
  const Dataset& ds = ws.dataset();
  const auto path = std::filesystem::path(config.out_dir) / "dataset.bin";
  save_dataset(ds, path);
  res.artifacts.push_back(path);
  std::size_t counts[3] = {0, 0, 0};
  for (auto s : ds.splits) {
    ++counts[static_cast<int>(s)];
  }
  res.summary = {{"trajectories", ds.trajectories.size()},
                 {"frames", ds.frame_count()},
                 {"train", counts[0]},
                 {"val", counts[1]},
                 {"test", counts[2]},
                 {"dataset_seed", ds.spec.seed}};
  write_manifest(config, "simulate", res, ws.stage_seconds());
  return res;
}

CommandResult cmd_pipeline(const ExperimentConfig& config, const RunOptions& options) {
  Workspace ws(config, options);
  CommandResult res;
  const std::filesystem::path out = config.out_dir;
  const Dataset& ds = ws.dataset();
  const LatentSet& lat = ws.latents();
  const Encoder& enc = ws.dynamics_encoder(config.embedding.d);

  auto start = std::chrono::steady_clock::now();
  const Matrix c_all = embed_many(enc, lat.z, lat.conditions);
  KSelection sel;
  const KnnTable table = fit_lifting(ws, c_all, &sel);
  const auto preds = predict_heldout(ws, c_all);
  std::map<std::string, double> seconds = ws.stage_seconds();
  seconds["traverse"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  start = std::chrono::steady_clock::now();
  std::map<std::string, Matrix> decoded;
  res.rows = score_predictions(ws, preds, table, &decoded);
  seconds["decode_and_score"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  const auto csv = out / "pipeline_metrics.csv";
  write_csv(csv, res.rows);
  res.artifacts.push_back(csv);

  // Rendered strips of the held-out frames for the first test trajectories.
  const auto test_traj = ds.indices(Split::test);
  const auto hidden = holdout_frames(ds.spec.frames, config.traversal.holdout_stride);
  const int n_strip = std::min<int>(config.strip_trajectories, static_cast<int>(test_traj.size()));
  for (int k = 0; k < n_strip; ++k) {
    const auto& tr = ds.trajectories[test_traj[k]];
    std::vector<Matrix> truth;
    for (int s : hidden) {
      truth.push_back(render(tr.frames[s], ds.map, config.render_grid));
    }
    const auto tpath = out / "strips" / ("traj" + std::to_string(k) + "_truth.pgm");
    write_pgm(tpath, hstack(truth));
    res.artifacts.push_back(tpath);
    for (const auto& p : preds) {
      const Matrix& x_hat = decoded.at(p.space + "/" + p.method);
      std::vector<Matrix> frames;
      for (std::size_t i = 0; i < p.rows.size(); ++i) {
        if (lat.trajectory[p.rows[i]] == static_cast<int>(test_traj[k])) {
          frames.push_back(render_state(x_hat.row(static_cast<Eigen::Index>(i)).transpose(), ds.map,
                                        config.render_grid));
        }
      }
      const auto path =
          out / "strips" / ("traj" + std::to_string(k) + "_" + slug(p.space) + "_" + slug(p.method) + ".pgm");
      write_pgm(path, hstack(frames));
      res.artifacts.push_back(path);
    }
  }

  res.summary = {{"selected_k", table.k},
                 {"k_grid", sel.grid},
                 {"k_rmse", sel.rmse},
                 {"bandwidth", table.bandwidth},
                 {"heldout_per_trajectory", hidden.size()},
                 {"test_trajectories", test_traj.size()}};
  write_text(out / "pipeline_summary.json", res.summary.dump(2) + "\n");
  res.artifacts.push_back(out / "pipeline_summary.json");
  write_manifest(config, "pipeline", res, seconds);
  return res;
}

std::vector<FoldSplit> classification_folds(Workspace& ws) {
  const ExperimentConfig& cfg = ws.config();
  const LatentSet& lat = ws.latents(false);
  const auto test_rows = ws.rows_of(Split::test);
  std::vector<FoldSplit> folds;
  if (cfg.classify.folds == 1) {
    // Kernel training is quadratic in the sample count; thin the training
    // split to at most 3000 frames with a fixed stride.
    const auto train_rows = ws.rows_of(Split::train);
    const std::size_t stride = std::max<std::size_t>(1, (train_rows.size() + 2999) / 3000);
    FoldSplit f;
    for (std::size_t i = 0; i < train_rows.size(); i += stride) {
      f.train_rows.push_back(train_rows[i]);
    }
    f.test_rows = test_rows;
    folds.push_back(std::move(f));
    return folds;
  }
  const double lo = cfg.dataset.mu_lo;
  const double width = (cfg.dataset.mu_hi - lo) / cfg.classify.folds;
  const auto band = [&](double mu) {
    if (!(width > 0.0)) {
      return 0;
    }
    return std::clamp(static_cast<int>(std::floor((mu - lo) / width)), 0, cfg.classify.folds - 1);
  };
  for (int b = 0; b < cfg.classify.folds; ++b) {
    FoldSplit f;
    for (int r : test_rows) {
      (band(lat.conditions[r].mu) == b ? f.test_rows : f.train_rows).push_back(r);
    }
    if (!f.test_rows.empty()) {
      folds.push_back(std::move(f));
    }
  }
  return folds;
}

CommandResult cmd_classify(const ExperimentConfig& config, const RunOptions& options) {
  Workspace ws(config, options);
  CommandResult res;
  const LatentSet& lat = ws.latents(false);
  const Encoder& enc = ws.class_encoder();
  const std::uint64_t seed = stage_seed(config, "classify");

  const auto train_rows = ws.rows_of(Split::train);
  const PcaModel pca = fit_pca(gather(lat.z, train_rows), config.classify.d);
  const std::vector<std::pair<std::string, Matrix>> spaces{
      {"Z", lat.z}, {"C", embed_many(enc, lat.z, lat.conditions)}, {"PCA", pca_project(pca, lat.z)}};
  const auto folds = classification_folds(ws);
  const auto label_of = [&](int r) {
    if (!lat.conditions[r].class_label) {
      throw InputError("classify: frame without a class label");
    }
    return *lat.conditions[r].class_label;
  };

  auto start = std::chrono::steady_clock::now();
  for (const auto& [space, x] : spaces) {
    for (SvmKernel kernel : {SvmKernel::linear, SvmKernel::rbf}) {
      std::vector<double> decision;
      std::vector<int> truth;
      for (std::size_t f = 0; f < folds.size(); ++f) {
        std::vector<int> y_train;
        for (int r : folds[f].train_rows) {
          y_train.push_back(label_of(r));
        }
        if (config.classify.shuffle_labels) {
          Rng shuffle = Rng::stream(seed, "classify.shuffle." + std::to_string(f));
          shuffle.shuffle(std::span(y_train));
        }
        SvmConfig sc = config.classify.svm;
        sc.kernel = kernel;
        sc.seed = Rng::stream(seed, "svm." + space + "." + to_string(kernel) + "." + std::to_string(f)).next_u64();
        const SvmModel model = train_svm(gather(x, folds[f].train_rows), y_train, sc);
        const Vector d = svm_decision(model, gather(x, folds[f].test_rows));
        for (Eigen::Index i = 0; i < d.size(); ++i) {
          decision.push_back(d[i]);
          truth.push_back(label_of(folds[f].test_rows[i]));
        }
      }
      const ClassifierScore s = svm_score(decision, truth);
      const std::string method = kernel == SvmKernel::linear ? "SVM-Linear" : "SVM-RBF";
      const long n = static_cast<long>(decision.size());
      res.rows.push_back(report(config, space, method, "accuracy", s.accuracy, 0.0, n));
      res.rows.push_back(report(config, space, method, "f1", s.f1, 0.0, n));
      res.rows.push_back(report(config, space, method, "auc", s.auc, 0.0, n));
    }
  }
  std::map<std::string, double> seconds = ws.stage_seconds();
  seconds["svm"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const auto csv = std::filesystem::path(config.out_dir) / "classify_metrics.csv";
  write_csv(csv, res.rows);
  res.artifacts.push_back(csv);
  res.summary = {{"folds", folds.size()}, {"shuffle_labels", config.classify.shuffle_labels}};
  write_manifest(config, "classify", res, seconds);
  return res;
}

CommandResult cmd_kde_edit(const ExperimentConfig& config, const RunOptions& options) {
  Workspace ws(config, options);
  CommandResult res;
  const std::filesystem::path out = config.out_dir;
  const Dataset& ds = ws.dataset();
  const LatentSet& lat = ws.latents(false);
  const Encoder& enc = ws.class_encoder();
  const Matrix c_all = embed_many(enc, lat.z, lat.conditions);

  auto start = std::chrono::steady_clock::now();
  std::vector<int> rows0;
  std::vector<int> rows1;
  for (int r : ws.rows_of(Split::test)) {
    (lat.conditions[r].class_label.value_or(0) == 1 ? rows1 : rows0).push_back(r);
  }
  if (rows0.empty() || rows1.empty()) {
    throw InputError("kde-edit: the test split must contain both classes");
  }
  const Matrix c0 = gather(c_all, rows0);
  const Matrix c1 = gather(c_all, rows1);
  const double h = config.kde.bandwidth > 0.0 ? config.kde.bandwidth : scott_bandwidth(c0, c1);
  const KdeModel kde = kde_fit(c0, c1, h, kde_auto_grid(c0, c1, h, 3.0, config.kde.max_nodes_per_axis));
  if (kde.degenerate) {
    throw InputError("kde-edit: class densities do not separate (degenerate peaks); no traversal direction");
  }
  const KnnTable table = fit_lifting(ws, c_all);
  std::map<std::string, double> seconds = ws.stage_seconds();
  seconds["kde"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  start = std::chrono::steady_clock::now();
  std::vector<Matrix> frames;
  for (double eta : config.kde.eta) {
    const double along = config.kde.source_class == 0 ? eta : 1.0 - eta;
    const Vector c = kde_traverse(kde, along);
    const FeatureLatent z = lift(table, c, table.k);
    const Vector x = ddim_sample(ws.denoiser(), z, ws.schedule(), config.diffusion.steps);
    frames.push_back(render_state(x, ds.map, config.render_grid));
  }
  const auto strip = out / "kde_strip.pgm";
  write_pgm(strip, hstack(frames));
  res.artifacts.push_back(strip);
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const Matrix diff = frames[i] - frames.front();
    const auto path = out / ("kde_diff_" + std::to_string(i) + ".pgm");
    write_pgm(path, (diff.array() + 1.0) * 0.5);
    res.artifacts.push_back(path);
    res.rows.push_back(report(config, "C", "KDE@eta=" + format_number(config.kde.eta[i]), "diff_l1",
                              diff.cwiseAbs().mean(), 0.0, static_cast<long>(diff.size())));
  }
  seconds["decode"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const auto csv = out / "kde_metrics.csv";
  write_csv(csv, res.rows);
  res.artifacts.push_back(csv);
  const auto vec = [](const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  res.summary = {{"bandwidth", h},
                 {"peak_class0", vec(kde.peak0)},
                 {"peak_class1", vec(kde.peak1)},
                 {"grid_nodes", kde.grid.count},
                 {"source_class", config.kde.source_class}};
  write_manifest(config, "kde-edit", res, seconds);
  return res;
}

CommandResult cmd_sweep_dim(const ExperimentConfig& config, const RunOptions& options) {
  if (config.sweep_dims.empty()) {
    throw ConfigError("sweep.dims: must not be empty");
  }
  Workspace ws(config, options);
  CommandResult res;
  const LatentSet& lat = ws.latents();
  for (int d : config.sweep_dims) {
    const Encoder& enc = ws.dynamics_encoder(d);
    const Matrix c_all = embed_many(enc, lat.z, lat.conditions);
    const KnnTable table = fit_lifting(ws, c_all);
    const auto preds = predict_heldout(ws, c_all, false, {"Spline"});
    for (const auto& r : score_predictions(ws, preds, table)) {
      if (r.metric == "state_rmse") {
        MetricReport row = r;
        row.method = "Spline@d=" + std::to_string(d);
        res.rows.push_back(row);
      }
    }
  }
  const auto csv = std::filesystem::path(config.out_dir) / "sweep_dim.csv";
  write_csv(csv, res.rows);
  res.artifacts.push_back(csv);
  write_manifest(config, "sweep-dim", res, ws.stage_seconds());
  return res;
}

CommandResult cmd_probe_orthogonality(const ExperimentConfig& config, const RunOptions& options) {
  Workspace ws(config, options);
  CommandResult res;
  const LatentSet& lat = ws.latents(false);
  const Encoder& enc = ws.dynamics_encoder(config.embedding.d, false);
  const auto rows = ws.rows_of(Split::test);
  std::vector<double> taus;
  std::vector<double> mus;
  for (int r : rows) {
    taus.push_back(lat.conditions[r].tau);
    mus.push_back(lat.conditions[r].mu);
  }
  if (*std::max_element(mus.begin(), mus.end()) == *std::min_element(mus.begin(), mus.end())) {
    throw InputError("probe-orthogonality: mu is constant over the test split, so the mu regression is undefined");
  }
  const Matrix z = gather(lat.z, rows);
  const Matrix c = gather(embed_many(enc, lat.z, lat.conditions), rows);
  json summary = json::object();
  for (const auto& [space, x] : std::vector<std::pair<std::string, Matrix>>{{"Z", z}, {"C", c}}) {
    const ProbeResult p = orthogonality_probe(x, taus, mus);
    res.rows.push_back(report(config, space, "OLS-probe", "cosine", p.cosine, 0.0, static_cast<long>(rows.size())));
    summary[space] = {{"cosine", p.cosine}, {"regularized", p.regularized}};
  }
  res.summary = summary;
  const auto csv = std::filesystem::path(config.out_dir) / "orthogonality.csv";
  write_csv(csv, res.rows);
  res.artifacts.push_back(csv);
  write_manifest(config, "probe-orthogonality", res, ws.stage_seconds());
  return res;
}

} // namespace conda_dyn
