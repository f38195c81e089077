// deepssm — pipeline front end: synthetic populations, KDE/TPS augmentation,
// network training, inference, evaluation, severity scoring and population
// analysis. Every subcommand reads an optional JSON config, takes all
// randomness from --seed, and writes its artifacts plus a run_manifest.json
// into --out. Exit codes: 0 success, 1 runtime failure, 2 usage/config error.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "deepssm/analysis.hpp"
#include "deepssm/augment.hpp"
#include "deepssm/checkpoint.hpp"
#include "deepssm/correspondence.hpp"
#include "deepssm/evaluate.hpp"
#include "deepssm/networks.hpp"
#include "deepssm/ops.hpp"
#include "deepssm/rng.hpp"
#include "deepssm/severity.hpp"
#include "deepssm/shape_model.hpp"
#include "deepssm/synthbench.hpp"
#include "deepssm/training.hpp"
#include "deepssm/volume.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace deepssm;

namespace {

constexpr const char* kVersion = "0.1.0";

/// Problems with flags, configs or input layout — mapped to exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  std::string out = ".";
  int threads = 1;
  bool seed_given = false;
  bool threads_given = false;
};

// ---- config helpers ----------------------------------------------------------

json load_json_file(const fs::path& path, const char* what) {
  if (!fs::exists(path)) {
    throw UsageError(std::string(what) + " not found: " + path.string());
  }
  std::ifstream in(path);
  if (!in) throw UsageError(std::string("cannot open ") + what + ": " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError(std::string("invalid JSON in ") + path.string() + ": " + e.what());
  }
}

json load_config(const Common& common) {
  if (common.config.empty()) return json::object();
  json cfg = load_json_file(common.config, "config file");
  if (!cfg.is_object()) {
    throw UsageError("config file must hold a JSON object: " + common.config);
  }
  return cfg;
}

[[noreturn]] void missing_key(const std::string& key) {
  throw UsageError("missing required config key '" + key + "'");
}

double get_double(const json& cfg, const std::string& key, double fallback) {
  if (!cfg.contains(key)) return fallback;
  const json& v = cfg.at(key);
  if (!v.is_number()) throw UsageError("config key '" + key + "' must be a number");
  return v.get<double>();
}

std::size_t get_size(const json& cfg, const std::string& key, std::size_t fallback) {
  if (!cfg.contains(key)) return fallback;
  const json& v = cfg.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 0) {
    throw UsageError("config key '" + key + "' must be a non-negative integer");
  }
  return static_cast<std::size_t>(v.get<long long>());
}

std::string get_string(const json& cfg, const std::string& key,
                       const std::string& fallback) {
  if (!cfg.contains(key)) return fallback;
  const json& v = cfg.at(key);
  if (!v.is_string()) throw UsageError("config key '" + key + "' must be a string");
  return v.get<std::string>();
}

std::array<double, 3> get_vec3(const json& cfg, const std::string& key,
                               const std::array<double, 3>& fallback) {
  if (!cfg.contains(key)) return fallback;
  const json& v = cfg.at(key);
  if (!v.is_array() || v.size() != 3 ||
      !std::all_of(v.begin(), v.end(), [](const json& x) { return x.is_number(); })) {
    throw UsageError("config key '" + key + "' must be an array of 3 numbers");
  }
  return {v[0].get<double>(), v[1].get<double>(), v[2].get<double>()};
}

/// Either the flag value (when non-empty) or the config key; errors if both
/// are absent.
std::string pick_path(const std::string& flag_value, const json& cfg,
                      const std::string& key) {
  if (!flag_value.empty()) return flag_value;
  const std::string from_cfg = get_string(cfg, key, "");
  if (from_cfg.empty()) {
    throw UsageError("missing --" + key + " flag (or config key '" + key + "')");
  }
  return from_cfg;
}

std::uint64_t effective_seed(const Common& common, const json& cfg) {
  if (common.seed_given) return common.seed;
  if (cfg.contains("seed")) {
    const json& v = cfg.at("seed");
    if (!v.is_number_integer() || v.get<long long>() < 0) {
      throw UsageError("config key 'seed' must be a non-negative integer");
    }
    return v.get<std::uint64_t>();
  }
  return common.seed;
}

int effective_threads(const Common& common, const json& cfg) {
  long long t = common.threads;
  if (!common.threads_given && cfg.contains("threads")) {
    const json& v = cfg.at("threads");
    if (!v.is_number_integer()) throw UsageError("config key 'threads' must be an integer");
    t = v.get<long long>();
  }
  if (t < 1) throw UsageError("threads must be >= 1");
  return static_cast<int>(t);
}

// ---- run manifest --------------------------------------------------------------

fs::path ensure_out_dir(const Common& common) {
  fs::path out(common.out);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec && !fs::is_directory(out)) {
    throw UsageError("cannot create output directory " + out.string() + ": " +
                     ec.message());
  }
  return out;
}

void write_run_manifest(const fs::path& out_dir, const std::string& stage,
                        const json& config, std::uint64_t seed, int threads,
                        const std::vector<std::string>& inputs,
                        const std::vector<std::string>& outputs, json timings) {
  json manifest;
  manifest["stage"] = stage;
  manifest["version"] = kVersion;
  manifest["seed"] = seed;
  manifest["threads"] = threads;
  manifest["config"] = config;
  manifest["inputs"] = inputs;
  manifest["outputs"] = outputs;
  manifest["timings"] = std::move(timings);
  std::ofstream out(out_dir / "run_manifest.json");
  if (!out) throw std::runtime_error("cannot write run_manifest.json");
  out << manifest.dump(2) << "\n";
}

class StageTimer {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_)
        .count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string padded_name(const char* prefix, std::size_t i, const char* suffix) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s%04zu%s", prefix, i, suffix);
  return buf;
}

// ---- dataset I/O ----------------------------------------------------------------

struct DatasetEntry {
  std::string id;
  fs::path volume;
  fs::path particles;
  std::string label;  // "" when the dataset carries no labels
};

struct Dataset {
  json raw;
  fs::path dir;
  std::vector<DatasetEntry> entries;
  fs::path shape_model;  // empty when absent
};

Dataset load_dataset(const fs::path& path) {
  Dataset ds;
  ds.raw = load_json_file(path, "dataset manifest");
  ds.dir = path.parent_path();
  if (!ds.raw.is_object() || !ds.raw.contains("samples") ||
      !ds.raw.at("samples").is_array() || ds.raw.at("samples").empty()) {
    throw UsageError("dataset manifest has no 'samples' array: " + path.string());
  }
  const std::string model_rel = get_string(ds.raw, "shape_model", "");
  if (!model_rel.empty()) ds.shape_model = ds.dir / model_rel;
  std::size_t index = 0;
  for (const json& s : ds.raw.at("samples")) {
    if (!s.is_object() || !s.contains("volume") || !s.contains("particles")) {
      throw UsageError("dataset sample " + std::to_string(index) +
                       " lacks 'volume'/'particles' paths");
    }
    DatasetEntry e;
    e.id = get_string(s, "id", "sample_" + std::to_string(index));
    e.volume = ds.dir / s.at("volume").get<std::string>();
    e.particles = ds.dir / s.at("particles").get<std::string>();
    e.label = get_string(s, "label", "");
    ds.entries.push_back(std::move(e));
    ++index;
  }
  return ds;
}

std::vector<Volume> load_dataset_volumes(const Dataset& ds) {
  std::vector<Volume> volumes;
  volumes.reserve(ds.entries.size());
  for (const DatasetEntry& e : ds.entries) volumes.push_back(read_volume(e.volume));
  return volumes;
}

std::vector<CorrespondenceSet> load_dataset_particles(const Dataset& ds) {
  std::vector<CorrespondenceSet> sets;
  sets.reserve(ds.entries.size());
  for (const DatasetEntry& e : ds.entries) {
    CorrespondenceSet set = read_particles(e.particles);
    set.sample_id = e.id;
    sets.push_back(std::move(set));
  }
  return sets;
}

/// All *.particles files in a directory, sorted by filename.
std::vector<CorrespondenceSet> read_particles_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) {
    throw UsageError("not a directory: " + dir.string());
  }
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".particles") {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) {
    throw UsageError("no .particles files in " + dir.string());
  }
  std::vector<CorrespondenceSet> sets;
  sets.reserve(files.size());
  for (const fs::path& f : files) sets.push_back(read_particles(f));
  return sets;
}

void write_descriptor(const std::vector<double>& descriptor, const fs::path& path) {
  std::FILE* f = std::fopen(path.string().c_str(), "w");
  if (!f) throw std::runtime_error("cannot write " + path.string());
  for (double v : descriptor) std::fprintf(f, "%.17g\n", v);
  std::fclose(f);
}

// ---- synth ----------------------------------------------------------------------

FamilyKind parse_family(const std::string& name) {
  if (name == "ellipsoid_linear") return FamilyKind::ellipsoid_linear;
  if (name == "ellipsoid_bump") return FamilyKind::ellipsoid_bump;
  if (name == "twisted") return FamilyKind::twisted;
  throw UsageError("unknown family '" + name +
                   "' (expected ellipsoid_linear, ellipsoid_bump or twisted)");
}

const char* family_name(FamilyKind kind) {
  switch (kind) {
    case FamilyKind::ellipsoid_linear: return "ellipsoid_linear";
    case FamilyKind::ellipsoid_bump: return "ellipsoid_bump";
    case FamilyKind::twisted: return "twisted";
  }
  return "?";
}

GridSpec parse_grid(const json& cfg, const GridSpec& fallback) {
  if (!cfg.contains("grid")) return fallback;
  const json& g = cfg.at("grid");
  if (!g.is_object()) throw UsageError("config key 'grid' must be an object");
  GridSpec grid = fallback;
  if (g.contains("extents")) {
    const json& e = g.at("extents");
    if (!e.is_array() || e.size() != 3) {
      throw UsageError("grid.extents must be an array of 3 integers (D, H, W)");
    }
    for (int i = 0; i < 3; ++i) {
      if (!e[i].is_number_integer() || e[i].get<long long>() < 1) {
        throw UsageError("grid.extents must be positive integers");
      }
      grid.extents[static_cast<std::size_t>(i)] =
          static_cast<std::size_t>(e[i].get<long long>());
    }
  }
  if (g.contains("spacing")) {
    if (g.at("spacing").is_number()) {
      const double s = g.at("spacing").get<double>();
      grid.spacing = {s, s, s};
    } else {
      grid.spacing = get_vec3(g, "spacing", grid.spacing);
    }
  }
  grid.origin = get_vec3(g, "origin", grid.origin);
  return grid;
}

void run_synth(const Common& common) {
  const json cfg = load_config(common);
  const std::uint64_t seed = effective_seed(common, cfg);
  const int threads = effective_threads(common, cfg);
  const fs::path out = ensure_out_dir(common);
  StageTimer timer;

  SyntheticFamily family;
  family.kind = parse_family(get_string(cfg, "family", "ellipsoid_linear"));
  family.particles = get_size(cfg, "particles", family.particles);
  family.grid = parse_grid(cfg, family.grid);
  family.noise = get_double(cfg, "noise", family.noise);
  family.seed = seed;
  family.center = get_vec3(cfg, "center", family.center);
  family.radii_min = get_vec3(cfg, "radii_min", family.radii_min);
  family.radii_max = get_vec3(cfg, "radii_max", family.radii_max);
  family.bump_amplitude_min = get_double(cfg, "bump_amplitude_min", family.bump_amplitude_min);
  family.bump_amplitude_max = get_double(cfg, "bump_amplitude_max", family.bump_amplitude_max);
  family.bump_width = get_double(cfg, "bump_width", family.bump_width);
  family.bump_direction = get_vec3(cfg, "bump_direction", family.bump_direction);
  family.pathological_fraction =
      get_double(cfg, "pathological_fraction", family.pathological_fraction);
  family.twist_min = get_double(cfg, "twist_min", family.twist_min);
  family.twist_max = get_double(cfg, "twist_max", family.twist_max);
  const std::size_t n = get_size(cfg, "samples", 60);

  const std::vector<GroundTruthSample> population =
      generate_population(family, n, threads);

  json samples = json::array();
  std::vector<std::string> outputs;
  for (std::size_t i = 0; i < population.size(); ++i) {
    const GroundTruthSample& s = population[i];
    const std::string vol_name = padded_name("sample_", i, ".vol");
    const std::string part_name = padded_name("sample_", i, ".particles");
    write_volume(s.volume, out / vol_name);
    CorrespondenceSet corr = s.correspondences;
    corr.sample_id = padded_name("sample_", i, "");
    write_particles(corr, out / part_name);

    json entry;
    entry["id"] = corr.sample_id;
    entry["volume"] = vol_name;
    entry["particles"] = part_name;
    entry["label"] = s.label == SampleLabel::pathological ? "pathological" : "control";
    entry["radii"] = s.surface.radii;
    if (family.kind == FamilyKind::ellipsoid_bump) {
      entry["bump_amplitude"] = s.surface.bump_amplitude;
    }
    if (family.kind == FamilyKind::twisted) {
      entry["twist_rate"] = s.surface.twist_rate;
    }
    samples.push_back(std::move(entry));
    outputs.push_back(vol_name);
    outputs.push_back(vol_name + ".json");
    outputs.push_back(part_name);
  }

  json dataset;
  dataset["stage"] = "synth";
  dataset["family"] = family_name(family.kind);
  dataset["seed"] = seed;
  dataset["particles"] = family.particles;
  dataset["noise"] = family.noise;
  dataset["grid"] = {{"extents", family.grid.extents},
                     {"spacing", family.grid.spacing},
                     {"origin", family.grid.origin}};
  dataset["samples"] = std::move(samples);
  {
    std::ofstream ds(out / "dataset.json");
    if (!ds) throw std::runtime_error("cannot write dataset.json");
    ds << dataset.dump(2) << "\n";
  }
  outputs.push_back("dataset.json");

  write_run_manifest(out, "synth", cfg, seed, threads, {}, outputs,
                     {{"total_seconds", timer.seconds()}});
  std::printf("synth: %zu %s samples, %zu particles, %zux%zux%zu voxels -> %s\n",
              population.size(), family_name(family.kind), family.particles,
              family.grid.dim_z(), family.grid.dim_y(), family.grid.dim_x(),
              out.string().c_str());
}

// ---- augment --------------------------------------------------------------------

void run_augment(const Common& common, const std::string& dataset_flag) {
  const json cfg = load_config(common);
  const std::uint64_t seed = effective_seed(common, cfg);
  const int threads = effective_threads(common, cfg);
  const fs::path out = ensure_out_dir(common);
  StageTimer timer;

  const fs::path dataset_path = pick_path(dataset_flag, cfg, "dataset");
  const Dataset source = load_dataset(dataset_path);
  const std::vector<Volume> volumes = load_dataset_volumes(source);
  const std::vector<CorrespondenceSet> particles = load_dataset_particles(source);

  const std::size_t count = get_size(cfg, "count", 500);
  const double tps_lambda = get_double(cfg, "tps_lambda", -1.0);
  const std::size_t factor = get_size(cfg, "downsample", 1);
  if (factor < 1) throw UsageError("config key 'downsample' must be >= 1");

  // Mode count: explicit key, else the smallest L capturing 95% of variance.
  std::size_t num_modes = get_size(cfg, "num_modes", 0);
  if (num_modes == 0) {
    const PcaSpectrum spectrum = pca_spectrum(particles);
    const std::size_t max_modes = particles.size() - 1;
    double cumulative = 0.0;
    num_modes = max_modes;
    for (std::size_t k = 0; k < max_modes; ++k) {
      cumulative += spectrum.values[static_cast<Eigen::Index>(k)];
      if (cumulative >= 0.95 * spectrum.total_variance) {
        num_modes = k + 1;
        break;
      }
    }
    num_modes = std::max<std::size_t>(num_modes, 1);
  }

  const ShapeModel model = fit_pca(particles, num_modes);
  save_shape_model(model, out / "shape_model.dssm");

  AugmentResult result =
      augment_population(volumes, particles, model, count, seed, tps_lambda, threads);

  json samples = json::array();
  std::vector<std::string> outputs{"shape_model.dssm"};
  const auto write_pair = [&](const Volume& vol, const CorrespondenceSet& corr,
                              const char* prefix, std::size_t i) {
    const std::string vol_name = padded_name(prefix, i, ".vol");
    const std::string part_name = padded_name(prefix, i, ".particles");
    write_volume(factor > 1 ? downsample(vol, factor) : vol, out / vol_name);
    CorrespondenceSet named = corr;
    named.sample_id = padded_name(prefix, i, "");
    write_particles(named, out / part_name);
    outputs.push_back(vol_name);
    outputs.push_back(vol_name + ".json");
    outputs.push_back(part_name);
    json entry;
    entry["id"] = named.sample_id;
    entry["volume"] = vol_name;
    entry["particles"] = part_name;
    return entry;
  };

  for (std::size_t i = 0; i < volumes.size(); ++i) {
    json entry = write_pair(volumes[i], particles[i], "orig_", i);
    entry["kind"] = "original";
    entry["source_id"] = source.entries[i].id;
    if (!source.entries[i].label.empty()) entry["label"] = source.entries[i].label;
    samples.push_back(std::move(entry));
  }
  for (std::size_t i = 0; i < result.samples.size(); ++i) {
    const AugmentedSample& s = result.samples[i];
    json entry = write_pair(s.volume, s.correspondences, "aug_", i);
    entry["kind"] = "augmented";
    entry["parent"] = s.parent_id;
    entry["scores"] = s.scores;
    samples.push_back(std::move(entry));
  }

  json dataset;
  dataset["stage"] = "augment";
  dataset["source_dataset"] = dataset_path.string();
  dataset["shape_model"] = "shape_model.dssm";
  dataset["bandwidth"] = result.bandwidth;
  dataset["num_modes"] = num_modes;
  dataset["downsample"] = factor;
  dataset["tps_lambda"] = tps_lambda;
  dataset["seed"] = seed;
  dataset["samples"] = std::move(samples);
  {
    std::ofstream ds(out / "dataset.json");
    if (!ds) throw std::runtime_error("cannot write dataset.json");
    ds << dataset.dump(2) << "\n";
  }
  outputs.push_back("dataset.json");

  write_run_manifest(out, "augment", cfg, seed, threads, {dataset_path.string()},
                     outputs, {{"total_seconds", timer.seconds()}});
  std::printf(
      "augment: %zu originals + %zu augmented pairs (sigma = %.6g, %zu modes, "
      "downsample %zu) -> %s\n",
      volumes.size(), result.samples.size(), result.bandwidth, num_modes, factor,
      out.string().c_str());
}

// ---- train ----------------------------------------------------------------------

LossKind variant_loss(const std::string& variant) {
  if (variant == "base") return LossKind::corr;
  if (variant == "base-focal") return LossKind::focal_corr;
  if (variant == "tl") return LossKind::corr;
  if (variant == "tl-focal") return LossKind::focal_tl;
  throw UsageError("unknown variant '" + variant +
                   "' (expected base, base-focal, tl or tl-focal)");
}

void run_train(const Common& common, const std::string& dataset_flag) {
  const json cfg = load_config(common);
  const std::uint64_t seed = effective_seed(common, cfg);
  const int threads = effective_threads(common, cfg);
  const fs::path out = ensure_out_dir(common);
  StageTimer timer;

  const fs::path dataset_path = pick_path(dataset_flag, cfg, "dataset");
  const std::string variant = get_string(cfg, "variant", "base");
  const bool is_tl = variant.rfind("tl", 0) == 0;

  TrainConfig train_cfg;
  train_cfg.loss = variant_loss(variant);
  if (cfg.contains("loss")) train_cfg.loss = parse_loss_kind(get_string(cfg, "loss", ""));
  train_cfg.epochs = get_size(cfg, "epochs", train_cfg.epochs);
  if (cfg.contains("tl_epochs")) {
    const json& e = cfg.at("tl_epochs");
    if (!e.is_array() || e.size() != 3) {
      throw UsageError("config key 'tl_epochs' must be an array of 3 integers");
    }
    for (std::size_t i = 0; i < 3; ++i) {
      if (!e[i].is_number_integer() || e[i].get<long long>() < 1) {
        throw UsageError("config key 'tl_epochs' must hold positive integers");
      }
      train_cfg.tl_epochs[i] = static_cast<std::size_t>(e[i].get<long long>());
    }
  }
  train_cfg.batch_size = get_size(cfg, "batch_size", train_cfg.batch_size);
  train_cfg.learning_rate = get_double(cfg, "learning_rate", train_cfg.learning_rate);
  train_cfg.ae_learning_rate =
      get_double(cfg, "ae_learning_rate", train_cfg.ae_learning_rate);
  train_cfg.weight_decay = get_double(cfg, "weight_decay", train_cfg.weight_decay);
  train_cfg.patience = get_size(cfg, "patience", train_cfg.patience);
  train_cfg.val_fraction = get_double(cfg, "val_fraction", train_cfg.val_fraction);
  train_cfg.bottleneck = get_size(cfg, "bottleneck", train_cfg.bottleneck);
  train_cfg.hidden = get_size(cfg, "hidden", train_cfg.hidden);
  train_cfg.seed = seed;
  train_cfg.threads = threads;

  const Dataset dataset = load_dataset(dataset_path);
  TrainingSet data;
  data.volumes = load_dataset_volumes(dataset);
  data.correspondences = load_dataset_particles(dataset);

  TrainIo io;
  io.save_last = out / "last.dssm";
  const std::string resume = get_string(cfg, "resume", "");
  if (!resume.empty()) io.resume = resume;

  TrainHistory history;
  double best_val = 0.0;
  std::size_t best_epoch = 0;
  if (!is_tl) {
    if (dataset.shape_model.empty()) {
      throw UsageError(
          "train: dataset manifest has no 'shape_model' entry; run augment first");
    }
    const ShapeModel shape_model = load_shape_model(dataset.shape_model);
    if (train_cfg.loss == LossKind::pca) {
      data.scores.reserve(data.correspondences.size());
      for (const CorrespondenceSet& c : data.correspondences) {
        data.scores.push_back(project(shape_model, c));
      }
    }
    BaseTrainResult result = train_base(data, shape_model, train_cfg, io);
    result.model.save(out / "model.dssm",
                      {{"best_epoch", static_cast<double>(result.best_epoch)},
                       {"best_val_loss", result.best_val_loss}});
    history = std::move(result.history);
    best_val = result.best_val_loss;
    best_epoch = result.best_epoch;
  } else {
    TlTrainResult result = train_tl(data, train_cfg, io);
    result.model.save(out / "model.dssm",
                      {{"best_epoch", static_cast<double>(result.best_epoch)},
                       {"best_val_loss", result.best_val_loss}});
    history = std::move(result.history);
    best_val = result.best_val_loss;
    best_epoch = result.best_epoch;
  }
  history.save_csv(out / "history.csv");

  std::vector<std::string> inputs{dataset_path.string()};
  if (!io.resume.empty() && fs::exists(io.resume)) inputs.push_back(io.resume.string());
  write_run_manifest(out, "train", cfg, seed, threads, inputs,
                     {"model.dssm", "last.dssm", "history.csv"},
                     {{"total_seconds", timer.seconds()}});
  std::printf("train [%s, loss=%s]: %zu epochs, best val loss %.6g at epoch %zu -> %s\n",
              variant.c_str(), loss_kind_name(train_cfg.loss).c_str(),
              history.epochs.size(), best_val, best_epoch, out.string().c_str());
}

// ---- infer ----------------------------------------------------------------------

void run_infer(const Common& common, const std::string& model_flag,
               const std::string& image_flag) {
  const json cfg = load_config(common);
  const std::uint64_t seed = effective_seed(common, cfg);
  const int threads = effective_threads(common, cfg);
  const fs::path out = ensure_out_dir(common);
  StageTimer timer;

  const fs::path model_path = pick_path(model_flag, cfg, "model");
  const fs::path image_path = pick_path(image_flag, cfg, "image");
  const std::size_t repetitions = get_size(cfg, "repetitions", 5);
  if (!fs::exists(model_path)) throw UsageError("model not found: " + model_path.string());
  if (!fs::exists(image_path)) throw UsageError("image not found: " + image_path.string());

  const Volume volume = read_volume(image_path);
  const std::string variant = nn::Checkpoint::load(model_path).meta_string("variant");
  nn::set_compute_threads(threads);

  InferenceResult result;
  double median_seconds = 0.0;
  if (variant == "base") {
    BaseDeepSSM model = BaseDeepSSM::load(model_path);
    result = model.infer(volume);
    median_seconds = time_inference(model, volume, repetitions);
  } else if (variant == "tl") {
    TlDeepSSM model = TlDeepSSM::load(model_path);
    result = model.infer(volume);
    median_seconds = time_inference(model, volume, repetitions);
  } else {
    throw UsageError("unrecognized model variant '" + variant + "' in " +
                     model_path.string());
  }

  result.correspondences.sample_id = image_path.stem().string();
  write_particles(result.correspondences, out / "prediction.particles");
  write_descriptor(result.descriptor, out / "descriptor.txt");

  write_run_manifest(out, "infer", cfg, seed, threads,
                     {model_path.string(), image_path.string()},
                     {"prediction.particles", "descriptor.txt"},
                     {{"median_inference_seconds", median_seconds},
                      {"total_seconds", timer.seconds()}});
  std::printf("infer [%s]: %zu particles, descriptor length %zu\n", variant.c_str(),
              result.correspondences.size(), result.descriptor.size());
  std::printf("median_inference_seconds %.6f\n", median_seconds);
}

// ---- evaluate -------------------------------------------------------------------

void run_evaluate(const Common& common, const std::string& pred_flag,
                  const std::string& truth_flag) {
  const json cfg = load_config(common);
  const std::uint64_t seed = effective_seed(common, cfg);
  const int threads = effective_threads(common, cfg);
  const fs::path out = ensure_out_dir(common);
  StageTimer timer;

  const fs::path pred_dir = pick_path(pred_flag, cfg, "pred");
  const fs::path truth_dir = pick_path(truth_flag, cfg, "truth");
  if (!fs::is_directory(truth_dir)) {
    throw UsageError("not a directory: " + truth_dir.string());
  }

  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(truth_dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".particles") {
      names.push_back(entry.path().filename().string());
    }
  }
  std::sort(names.begin(), names.end());
  if (names.empty()) throw UsageError("no .particles files in " + truth_dir.string());

  std::vector<CorrespondenceSet> truth, pred;
  std::vector<std::string> ids;
  for (const std::string& name : names) {
    const fs::path other = pred_dir / name;
    if (!fs::exists(other)) {
      throw UsageError("prediction missing for " + name + " in " + pred_dir.string());
    }
    truth.push_back(read_particles(truth_dir / name));
    pred.push_back(read_particles(other));
    ids.push_back(truth.back().sample_id);
  }

  const RmseReport report = evaluate_rmse(pred, truth);
  save_rmse_csv(report, ids, out / "rmse_report.csv");

  // Per-point fields anchored on the mean ground-truth shape.
  CorrespondenceSet anchor = truth.front();
  anchor.sample_id = "mean_truth";
  for (std::size_t j = 0; j < anchor.size(); ++j) {
    Point3 acc{0.0, 0.0, 0.0};
    for (const CorrespondenceSet& t : truth) {
      acc[0] += t.points[j][0];
      acc[1] += t.points[j][1];
      acc[2] += t.points[j][2];
    }
    const auto n = static_cast<double>(truth.size());
    anchor.points[j] = {acc[0] / n, acc[1] / n, acc[2] / n};
  }
  write_particles_with_scalar(anchor, report.per_point_mean,
                              out / "rmse_per_point_mean.particles");
  write_particles_with_scalar(anchor, report.per_point_std,
                              out / "rmse_per_point_std.particles");

  write_run_manifest(out, "evaluate", cfg, seed, threads,
                     {pred_dir.string(), truth_dir.string()},
                     {"rmse_report.csv", "rmse_per_point_mean.particles",
                      "rmse_per_point_std.particles"},
                     {{"total_seconds", timer.seconds()}});
  std::printf("evaluate: %zu samples, average RMSE %.17g\n", truth.size(),
              report.average_rmse);
}

// ---- severity -------------------------------------------------------------------

void run_severity(const Common& common, const std::string& controls_flag,
                  const std::string& query_flag) {
  const json cfg = load_config(common);
  const std::uint64_t seed = effective_seed(common, cfg);
  const int threads = effective_threads(common, cfg);
  const fs::path out = ensure_out_dir(common);
  StageTimer timer;

  const fs::path controls_dir = pick_path(controls_flag, cfg, "controls");
  const fs::path query_path = pick_path(query_flag, cfg, "query");
  const double fraction = get_double(cfg, "subspace_fraction", 0.95);
  const std::size_t neighbors = get_size(cfg, "normal_neighbors", 8);
  if (!fs::exists(query_path)) throw UsageError("query not found: " + query_path.string());

  const std::vector<CorrespondenceSet> controls = read_particles_dir(controls_dir);
  const SeverityModel model = fit_ppca(controls, fraction);
  const CorrespondenceSet query = read_particles(query_path);
  const double score = severity_score(model, query);

  CorrespondenceSet mean_shape = CorrespondenceSet::from_flat(
      std::span<const double>(model.mean.data(),
                              static_cast<std::size_t>(model.mean.size())),
      "mean_control");
  const std::vector<Point3> normals = estimate_normals(mean_shape, neighbors);
  const std::vector<double> field = pointwise_mahalanobis(model, {query}, normals);
  write_particles_with_scalar(mean_shape, field, out / "severity_field.particles");

  json summary;
  summary["score"] = score;
  summary["controls"] = controls.size();
  summary["num_modes"] = model.num_modes();
  summary["subspace_fraction"] = model.subspace_fraction;
  summary["sigma2"] = model.sigma2;
  summary["sigma2_raw"] = model.sigma2_raw;
  summary["sigma2_floored"] = model.floored;
  summary["query"] = query_path.string();
  {
    std::ofstream js(out / "severity.json");
    if (!js) throw std::runtime_error("cannot write severity.json");
    js << summary.dump(2) << "\n";
  }

  write_run_manifest(out, "severity", cfg, seed, threads,
                     {controls_dir.string(), query_path.string()},
                     {"severity.json", "severity_field.particles"},
                     {{"total_seconds", timer.seconds()}});
  std::printf("severity: score %.17g (%zu controls, %zu modes, sigma2 %.6g%s)\n",
              score, controls.size(), model.num_modes(), model.sigma2,
              model.floored ? ", floored" : "");
}

// ---- analyze --------------------------------------------------------------------

void run_group_difference(const json& cfg, const fs::path& out,
                          const std::string& a_flag, const std::string& b_flag,
                          std::uint64_t seed, int threads, const StageTimer& timer) {
  const fs::path a_dir = pick_path(a_flag, cfg, "a");
  const fs::path b_dir = pick_path(b_flag, cfg, "b");
  const std::vector<CorrespondenceSet> group_a = read_particles_dir(a_dir);
  const std::vector<CorrespondenceSet> group_b = read_particles_dir(b_dir);
  const GroupDifference diff = group_difference(group_a, group_b);

  write_particles_with_scalar(diff.anchor, diff.magnitude,
                              out / "group_difference.particles");
  CorrespondenceSet displacement;
  displacement.sample_id = "displacement";
  displacement.points = diff.displacement;
  write_particles(displacement, out / "displacement.particles");

  double max_mm = 0.0;
  double mean_mm = 0.0;
  for (const Point3& d : diff.displacement) {
    const double norm = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
    max_mm = std::max(max_mm, norm);
    mean_mm += norm;
  }
  mean_mm /= static_cast<double>(diff.displacement.size());

  json summary;
  summary["mode"] = "group_difference";
  summary["points"] = diff.anchor.size();
  summary["group_a"] = group_a.size();
  summary["group_b"] = group_b.size();
  summary["max_displacement_mm"] = max_mm;
  summary["mean_displacement_mm"] = mean_mm;
  std::ofstream js(out / "analysis.json");
  if (!js) throw std::runtime_error("cannot write analysis.json");
  js << summary.dump(2) << "\n";

  write_run_manifest(out, "analyze", cfg, seed, threads,
                     {a_dir.string(), b_dir.string()},
                     {"group_difference.particles", "displacement.particles",
                      "analysis.json"},
                     {{"total_seconds", timer.seconds()}});
  std::printf("analyze group_difference: max displacement %.6g mm, mean %.6g mm\n",
              max_mm, mean_mm);
}

void run_latent_swim(const json& cfg, const fs::path& out,
                     const std::string& model_flag, const std::string& a_flag,
                     const std::string& b_flag, std::uint64_t seed, int threads,
                     const StageTimer& timer) {
  const fs::path model_path = pick_path(model_flag, cfg, "model");
  const fs::path a_dir = pick_path(a_flag, cfg, "a");
  const fs::path b_dir = pick_path(b_flag, cfg, "b");
  const std::size_t steps = get_size(cfg, "steps", 7);
  if (!fs::exists(model_path)) throw UsageError("model not found: " + model_path.string());
  if (nn::Checkpoint::load(model_path).meta_string("variant") != "tl") {
    throw UsageError("latent_swim needs a TL model: " + model_path.string());
  }

  TlDeepSSM model = TlDeepSSM::load(model_path);
  const std::vector<CorrespondenceSet> group_a = read_particles_dir(a_dir);
  const std::vector<CorrespondenceSet> group_b = read_particles_dir(b_dir);
  const std::vector<CorrespondenceSet> swim = latent_swim(model, group_a, group_b, steps);

  std::vector<std::string> outputs;
  for (std::size_t i = 0; i < swim.size(); ++i) {
    const std::string name = padded_name("swim_", i, ".particles");
    write_particles(swim[i], out / name);
    outputs.push_back(name);
  }

  write_run_manifest(out, "analyze", cfg, seed, threads,
                     {model_path.string(), a_dir.string(), b_dir.string()}, outputs,
                     {{"total_seconds", timer.seconds()}});
  std::printf("analyze latent_swim: %zu interpolated shapes -> %s\n", swim.size(),
              out.string().c_str());
}

void run_classifier(const json& cfg, const fs::path& out,
                    const std::string& model_flag, const std::string& dataset_flag,
                    std::uint64_t seed, int threads, const StageTimer& timer) {
  const fs::path model_path = pick_path(model_flag, cfg, "model");
  const fs::path dataset_path = pick_path(dataset_flag, cfg, "dataset");
  if (!fs::exists(model_path)) throw UsageError("model not found: " + model_path.string());

  const Dataset dataset = load_dataset(dataset_path);
  std::vector<int> labels;
  labels.reserve(dataset.entries.size());
  for (const DatasetEntry& e : dataset.entries) {
    if (e.label != "control" && e.label != "pathological") {
      throw UsageError("classifier: sample '" + e.id +
                       "' lacks a control/pathological label");
    }
    labels.push_back(e.label == "pathological" ? 1 : 0);
  }

  nn::set_compute_threads(threads);
  const std::string variant = nn::Checkpoint::load(model_path).meta_string("variant");
  std::function<std::vector<double>(const Volume&)> describe;
  std::optional<BaseDeepSSM> base_model;
  std::optional<TlDeepSSM> tl_model;
  if (variant == "base") {
    base_model.emplace(BaseDeepSSM::load(model_path));
    describe = [&](const Volume& v) { return base_model->infer(v).descriptor; };
  } else if (variant == "tl") {
    tl_model.emplace(TlDeepSSM::load(model_path));
    describe = [&](const Volume& v) { return tl_model->infer(v).descriptor; };
  } else {
    throw UsageError("unrecognized model variant '" + variant + "' in " +
                     model_path.string());
  }

  std::vector<std::vector<double>> descriptors;
  descriptors.reserve(dataset.entries.size());
  for (const DatasetEntry& e : dataset.entries) {
    descriptors.push_back(describe(read_volume(e.volume)));
  }

  // Deterministic train/test split.
  const double test_fraction = get_double(cfg, "test_fraction", 0.25);
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw UsageError("config key 'test_fraction' must lie in (0, 1)");
  }
  const std::size_t n = descriptors.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng split_rng(mix_seed(seed, 0x636c617373ULL));
  split_rng.shuffle(order);
  const auto n_test = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n))), 1,
      n - 2);

  std::vector<std::vector<double>> train_x;
  std::vector<int> train_y;
  for (std::size_t i = 0; i < n - n_test; ++i) {
    train_x.push_back(descriptors[order[i]]);
    train_y.push_back(labels[order[i]]);
  }

  ClassifierConfig clf_cfg;
  clf_cfg.selected_features = get_size(cfg, "selected_features", clf_cfg.selected_features);
  clf_cfg.hidden = get_size(cfg, "hidden", clf_cfg.hidden);
  clf_cfg.epochs = get_size(cfg, "epochs", clf_cfg.epochs);
  clf_cfg.learning_rate = get_double(cfg, "learning_rate", clf_cfg.learning_rate);
  clf_cfg.seed = seed;
  MlpClassifier classifier = fit_classifier(train_x, train_y, clf_cfg);

  const std::vector<double> all_scores = classifier.predict_all(descriptors);
  std::vector<char> is_test(n, 0);
  for (std::size_t i = n - n_test; i < n; ++i) is_test[order[i]] = 1;

  std::vector<double> test_scores, test_targets;
  for (std::size_t i = 0; i < n; ++i) {
    if (is_test[i]) {
      test_scores.push_back(all_scores[i]);
      test_targets.push_back(static_cast<double>(labels[i]));
    }
  }
  const Metrics metrics = compute_metrics(test_scores, test_targets);

  {
    std::FILE* f = std::fopen((out / "predictions.csv").string().c_str(), "w");
    if (!f) throw std::runtime_error("cannot write predictions.csv");
    std::fprintf(f, "sample,label,score,split\n");
    for (std::size_t i = 0; i < n; ++i) {
      std::fprintf(f, "%s,%d,%.17g,%s\n", dataset.entries[i].id.c_str(), labels[i],
                   all_scores[i], is_test[i] ? "test" : "train");
    }
    std::fclose(f);
  }

  json summary;
  summary["mode"] = "classifier";
  summary["train_samples"] = n - n_test;
  summary["test_samples"] = n_test;
  summary["selected_features"] = classifier.selected();
  summary["auc"] = metrics.auc;
  summary["accuracy"] = metrics.accuracy;
  summary["pearson"] = metrics.pearson;
  summary["spearman"] = metrics.spearman;
  {
    std::ofstream js(out / "analysis.json");
    if (!js) throw std::runtime_error("cannot write analysis.json");
    js << summary.dump(2) << "\n";
  }

  write_run_manifest(out, "analyze", cfg, seed, threads,
                     {model_path.string(), dataset_path.string()},
                     {"predictions.csv", "analysis.json"},
                     {{"total_seconds", timer.seconds()}});
  std::printf("analyze classifier: test AUC %.4f, accuracy %.4f (%zu train / %zu test)\n",
              metrics.auc, metrics.accuracy, n - n_test, n_test);
}

void run_analyze(const Common& common, const std::string& mode_flag,
                 const std::string& model_flag, const std::string& a_flag,
                 const std::string& b_flag, const std::string& dataset_flag) {
  const json cfg = load_config(common);
  const std::uint64_t seed = effective_seed(common, cfg);
  const int threads = effective_threads(common, cfg);
  const fs::path out = ensure_out_dir(common);
  StageTimer timer;

  std::string mode = mode_flag.empty() ? get_string(cfg, "mode", "") : mode_flag;
  if (mode.empty()) {
    throw UsageError("missing --mode flag (or config key 'mode'): expected "
                     "group_difference, latent_swim or classifier");
  }
  if (mode == "group_difference") {
    run_group_difference(cfg, out, a_flag, b_flag, seed, threads, timer);
  } else if (mode == "latent_swim") {
    run_latent_swim(cfg, out, model_flag, a_flag, b_flag, seed, threads, timer);
  } else if (mode == "classifier") {
    run_classifier(cfg, out, model_flag, dataset_flag, seed, threads, timer);
  } else {
    throw UsageError("unknown analyze mode '" + mode + "'");
  }
}

void add_common(CLI::App* sub, Common& common) {
  sub->add_option("--config", common.config, "JSON config file");
  sub->add_option("--seed", common.seed, "random seed (default 0)");
  sub->add_option("--out", common.out, "output directory (default .)");
  sub->add_option("--threads", common.threads, "worker threads (default 1)");
  sub->parse_complete_callback([sub, &common] {
    common.seed_given = sub->count("--seed") > 0;
    common.threads_given = sub->count("--threads") > 0;
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"deepssm — image-to-correspondence shape modeling pipeline"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  Common common;
  std::string dataset_flag, model_flag, image_flag, pred_flag, truth_flag;
  std::string controls_flag, query_flag, mode_flag, a_flag, b_flag;

  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic population");
  add_common(synth, common);

  CLI::App* augment = app.add_subcommand("augment", "fit PCA and augment via KDE + TPS");
  add_common(augment, common);
  augment->add_option("--dataset", dataset_flag, "dataset.json from synth");

  CLI::App* train = app.add_subcommand("train", "train a Base or TL network");
  add_common(train, common);
  train->add_option("--dataset", dataset_flag, "dataset.json from augment");

  CLI::App* infer = app.add_subcommand("infer", "predict correspondences for one image");
  add_common(infer, common);
  infer->add_option("--model", model_flag, "model checkpoint (.dssm)");
  infer->add_option("--image", image_flag, "input volume (.vol)");

  CLI::App* evaluate = app.add_subcommand("evaluate", "RMSE report for predictions");
  add_common(evaluate, common);
  evaluate->add_option("--pred", pred_flag, "directory of predicted .particles");
  evaluate->add_option("--truth", truth_flag, "directory of ground-truth .particles");

  CLI::App* severity = app.add_subcommand("severity", "PPCA severity score for a query");
  add_common(severity, common);
  severity->add_option("--controls", controls_flag, "directory of control .particles");
  severity->add_option("--query", query_flag, "query .particles file");

  CLI::App* analyze = app.add_subcommand(
      "analyze", "group difference, latent swim or descriptor classifier");
  add_common(analyze, common);
  analyze->add_option("--mode", mode_flag, "group_difference | latent_swim | classifier");
  analyze->add_option("--model", model_flag, "model checkpoint (.dssm)");
  analyze->add_option("--a", a_flag, "directory of group-A .particles");
  analyze->add_option("--b", b_flag, "directory of group-B .particles");
  analyze->add_option("--dataset", dataset_flag, "labeled dataset.json");

  try {
    app.parse(argc, argv);
    if (*synth) run_synth(common);
    if (*augment) run_augment(common, dataset_flag);
    if (*train) run_train(common, dataset_flag);
    if (*infer) run_infer(common, model_flag, image_flag);
    if (*evaluate) run_evaluate(common, pred_flag, truth_flag);
    if (*severity) run_severity(common, controls_flag, query_flag);
    if (*analyze) run_analyze(common, mode_flag, model_flag, a_flag, b_flag, dataset_flag);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "deepssm: %s\n", e.what());
    return 2;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "deepssm: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "deepssm: %s\n", e.what());
    return 1;
  }
  return 0;
}
