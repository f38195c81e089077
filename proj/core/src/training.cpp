#include "deepssm/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <utility>

#include "deepssm/checkpoint.hpp"
#include "deepssm/optimizer.hpp"
#include "deepssm/rng.hpp"

namespace deepssm {

using nn::Tape;
using nn::Tensor;

LossKind parse_loss_kind(const std::string& name) {
  if (name == "corr") return LossKind::corr;
  if (name == "pca") return LossKind::pca;
  if (name == "focal_corr") return LossKind::focal_corr;
  if (name == "focal_tl") return LossKind::focal_tl;
  throw std::invalid_argument("unknown loss '" + name +
                              "' (expected corr, pca, focal_corr or focal_tl)");
}

std::string loss_kind_name(LossKind kind) {
  switch (kind) {
    case LossKind::corr: return "corr";
    case LossKind::pca: return "pca";
    case LossKind::focal_corr: return "focal_corr";
    case LossKind::focal_tl: return "focal_tl";
  }
  throw std::logic_error("loss_kind_name: invalid enum value");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("train config: epochs must be ≥ 1");
  for (std::size_t e : tl_epochs)
    if (e < 1) throw std::invalid_argument("train config: every TL phase needs ≥ 1 epoch");
  if (batch_size < 2)
    throw std::invalid_argument("train config: batch size must be ≥ 2 (batch norm)");
  if (!(learning_rate > 0.0) || !(ae_learning_rate > 0.0))
    throw std::invalid_argument("train config: learning rates must be positive");
  if (!(weight_decay >= 0.0))
    throw std::invalid_argument("train config: weight decay must be ≥ 0");
  if (patience < 1) throw std::invalid_argument("train config: patience must be ≥ 1");
  if (!(val_fraction > 0.0) || !(val_fraction < 1.0))
    throw std::invalid_argument("train config: val fraction must be in (0, 1)");
  if (bottleneck < 1 || hidden < 1)
    throw std::invalid_argument("train config: bottleneck/hidden must be ≥ 1");
  if (threads < 1) throw std::invalid_argument("train config: threads must be ≥ 1");
}

void TrainingSet::validate() const {
  if (volumes.empty()) throw std::invalid_argument("training set is empty");
  if (correspondences.size() != volumes.size())
    throw std::invalid_argument("training set: " + std::to_string(volumes.size()) +
                                " volumes but " + std::to_string(correspondences.size()) +
                                " correspondence sets");
  if (!scores.empty() && scores.size() != volumes.size())
    throw std::invalid_argument("training set: score count does not match volumes");
  check_consistent_sizes(correspondences);
  for (const auto& c : correspondences) c.check_finite();
  const GridSpec& grid = volumes.front().grid;
  grid.validate();
  for (const auto& v : volumes) {
    if (!(v.grid == grid))
      throw std::invalid_argument("training set: all volumes must share one grid");
    if (v.data.size() != grid.voxel_count())
      throw std::invalid_argument("training set: volume data length mismatch");
    for (double x : v.data)
      if (!std::isfinite(x))
        throw std::invalid_argument("training set: non-finite voxel value");
  }
  if (!scores.empty()) {
    const std::size_t l = scores.front().size();
    if (l == 0) throw std::invalid_argument("training set: empty score vectors");
    for (const auto& s : scores) {
      if (s.size() != l)
        throw std::invalid_argument("training set: inconsistent score lengths");
      for (double v : s)
        if (!std::isfinite(v))
          throw std::invalid_argument("training set: non-finite score value");
    }
  }
}

void TrainHistory::save_csv(const std::filesystem::path& path) const {
  std::FILE* f = std::fopen(path.string().c_str(), "wb");
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  std::fputs("epoch,train_loss,val_loss,lr\n", f);
  for (const EpochRecord& r : epochs)
    std::fprintf(f, "%zu,%.17g,%.17g,%.17g\n", r.epoch, r.train_loss, r.val_loss,
                 r.learning_rate);
  if (std::fclose(f) != 0)
    throw std::runtime_error("failed writing " + path.string());
}

namespace {

constexpr std::uint64_t kTrainDomain = 0x747261696e646f6dULL;

// Streams: 0 = train/val split, 1+e = shuffle for (cumulative) epoch e.
// Double-mixed so they cannot collide with other stages using the same seed.
std::uint64_t train_stream(std::uint64_t seed, std::uint64_t index) {
  return mix_seed(mix_seed(seed, kTrainDomain), index);
}

// ---- batch assembly ----------------------------------------------------------

struct Arrays {
  std::array<std::size_t, 3> dhw{};
  std::vector<std::vector<double>> voxels;  // standardized, one per sample
  std::vector<std::vector<double>> corr;    // flattened 3M rows
  std::vector<std::vector<double>> scores;  // empty unless the loss needs them
  std::vector<std::size_t> train_idx, val_idx;
};

Arrays prepare_arrays(const TrainingSet& data, const TrainConfig& config,
                      bool need_scores) {
  data.validate();
  if (need_scores && data.scores.size() != data.size())
    throw std::invalid_argument("train: the pca loss needs per-sample score vectors");

  const std::size_t n = data.size();
  if (n < 3)
    throw std::invalid_argument("train: need ≥ 3 samples for a train/validation split");

  Arrays a;
  const GridSpec& g = data.volumes.front().grid;
  a.dhw = {g.dim_z(), g.dim_y(), g.dim_x()};
  a.voxels.reserve(n);
  a.corr.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    a.voxels.push_back(standardized_voxels(data.volumes[i]));
    a.corr.push_back(data.correspondences[i].flatten());
  }
  if (need_scores) a.scores = data.scores;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(train_stream(config.seed, 0));
  rng.shuffle(order);
  auto n_val = static_cast<std::size_t>(std::llround(config.val_fraction *
                                                     static_cast<double>(n)));
  n_val = std::clamp<std::size_t>(n_val, 1, n - 2);
  a.train_idx.assign(order.begin(), order.end() - static_cast<std::ptrdiff_t>(n_val));
  a.val_idx.assign(order.end() - static_cast<std::ptrdiff_t>(n_val), order.end());
  return a;
}

Tensor batch_volumes(const Arrays& a, std::span<const std::size_t> idx) {
  const std::size_t voxn = a.dhw[0] * a.dhw[1] * a.dhw[2];
  Tensor x({idx.size(), 1, a.dhw[0], a.dhw[1], a.dhw[2]});
  double* out = x.data();
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::memcpy(out + i * voxn, a.voxels[idx[i]].data(), voxn * sizeof(double));
  return x;
}

Tensor batch_rows(const std::vector<std::vector<double>>& rows,
                  std::span<const std::size_t> idx) {
  const std::size_t len = rows.front().size();
  Tensor t({idx.size(), len});
  double* out = t.data();
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::memcpy(out + i * len, rows[idx[i]].data(), len * sizeof(double));
  return t;
}

/// Exact mean of a per-batch loss over an index set (batches weighted by size).
template <typename BatchLoss>
double mean_loss_over(const std::vector<std::size_t>& idx, std::size_t batch_size,
                      BatchLoss&& batch_loss) {
  double total = 0.0;
  for (std::size_t lo = 0; lo < idx.size(); lo += batch_size) {
    const std::size_t hi = std::min(lo + batch_size, idx.size());
    std::span<const std::size_t> b(idx.data() + lo, hi - lo);
    total += batch_loss(b) * static_cast<double>(b.size());
  }
  return total / static_cast<double>(idx.size());
}

// ---- snapshots and resumable state --------------------------------------------

std::vector<nn::NamedTensor> clone_state(const std::vector<nn::NamedTensor>& live) {
  std::vector<nn::NamedTensor> out;
  out.reserve(live.size());
  for (const auto& nt : live) out.push_back({nt.name, nt.tensor.clone()});
  return out;
}

void restore_state(const std::vector<nn::NamedTensor>& saved,
                   const std::vector<nn::NamedTensor>& live) {
  nn::CheckpointSection sec;
  sec.tensors = saved;
  nn::restore_tensors(sec, live);
}

Tensor history_tensor(const TrainHistory& history) {
  Tensor t({history.epochs.size(), 5});
  double* out = t.data();
  for (const EpochRecord& r : history.epochs) {
    *out++ = static_cast<double>(r.epoch);
    *out++ = static_cast<double>(r.phase);
    *out++ = r.train_loss;
    *out++ = r.val_loss;
    *out++ = r.learning_rate;
  }
  return t;
}

TrainHistory history_from_tensor(const Tensor& t) {
  TrainHistory history;
  if (!t.defined()) return history;
  const double* in = t.data();
  for (std::size_t i = 0; i < t.dim(0); ++i) {
    EpochRecord r;
    r.epoch = static_cast<std::size_t>(in[0]);
    r.phase = static_cast<int>(in[1]);
    r.train_loss = in[2];
    r.val_loss = in[3];
    r.learning_rate = in[4];
    history.epochs.push_back(r);
    in += 5;
  }
  return history;
}

struct StopState {
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;  // cumulative, 1-based; 0 = never improved
  std::size_t since_improve = 0;
  std::vector<nn::NamedTensor> best;
};

void check_resume_compatible(const nn::Checkpoint& ckpt, const std::string& kind,
                             const TrainConfig& config) {
  if (ckpt.meta_string("kind") != kind)
    throw std::runtime_error("resume: checkpoint is not a " + kind);
  if (ckpt.meta_string("loss") != loss_kind_name(config.loss) ||
      ckpt.meta_string("seed") != std::to_string(config.seed) ||
      static_cast<std::size_t>(ckpt.meta("batch_size")) != config.batch_size ||
      ckpt.meta("val_fraction") != config.val_fraction)
    throw std::runtime_error(
        "resume: checkpoint was produced under a different seed/loss/batch/split "
        "configuration — continuing would not reproduce the original trajectory");
}

void put_common_meta(nn::Checkpoint& ckpt, const std::string& kind,
                     const TrainConfig& config, const StopState& stop,
                     std::size_t adam_step) {
  ckpt.meta_str["kind"] = kind;
  ckpt.meta_str["loss"] = loss_kind_name(config.loss);
  ckpt.meta_str["seed"] = std::to_string(config.seed);
  ckpt.meta_num["batch_size"] = static_cast<double>(config.batch_size);
  ckpt.meta_num["val_fraction"] = config.val_fraction;
  ckpt.meta_num["best_val"] = stop.best_val;
  ckpt.meta_num["best_epoch"] = static_cast<double>(stop.best_epoch);
  ckpt.meta_num["since_improve"] = static_cast<double>(stop.since_improve);
  ckpt.meta_num["adam_step"] = static_cast<double>(adam_step);
}

void load_stop_state(const nn::Checkpoint& ckpt, StopState& stop) {
  stop.best_val = ckpt.meta("best_val");
  stop.best_epoch = static_cast<std::size_t>(ckpt.meta("best_epoch"));
  stop.since_improve = static_cast<std::size_t>(ckpt.meta("since_improve"));
}

void restore_section_into(const nn::Checkpoint& ckpt, const std::string& name,
                          const std::vector<nn::NamedTensor>& live) {
  const auto* sec = ckpt.find_section(name);
  if (!sec) throw std::runtime_error("resume: missing checkpoint section '" + name + "'");
  nn::restore_tensors(*sec, live);
}

void require_finite(double loss, const char* what, std::size_t epoch) {
  if (!std::isfinite(loss))
    throw std::runtime_error("train: non-finite " + std::string(what) + " at epoch " +
                             std::to_string(epoch) +
                             " — aborting (check learning rate and data scaling)");
}

/// Per-point mean shape of a correspondence subset (for the focal threshold).
CorrespondenceSet mean_correspondences(const std::vector<CorrespondenceSet>& all,
                                       const std::vector<std::size_t>& idx) {
  CorrespondenceSet mean;
  mean.sample_id = "mean";
  mean.points.assign(all.front().size(), Point3{0.0, 0.0, 0.0});
  for (std::size_t i : idx)
    for (std::size_t j = 0; j < mean.points.size(); ++j)
      for (int k = 0; k < 3; ++k) mean.points[j][k] += all[i].points[j][k];
  for (auto& p : mean.points)
    for (int k = 0; k < 3; ++k) p[k] /= static_cast<double>(idx.size());
  return mean;
}

std::vector<CorrespondenceSet> subset(const std::vector<CorrespondenceSet>& all,
                                      const std::vector<std::size_t>& idx) {
  std::vector<CorrespondenceSet> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(all[i]);
  return out;
}

}  // namespace

// ---- Base training --------------------------------------------------------------

BaseTrainResult train_base(const TrainingSet& data, const ShapeModel& shape_model,
                           const TrainConfig& config, const TrainIo& io) {
  config.validate();
  if (config.loss == LossKind::focal_tl)
    throw std::invalid_argument("train_base: the focal_tl loss applies to train_tl");
  const bool use_pca = config.loss == LossKind::pca;
  const bool focal = config.loss == LossKind::focal_corr;

  Arrays a = prepare_arrays(data, config, use_pca);
  const std::size_t m = data.correspondences.front().size();
  if (shape_model.dim() != 3 * m)
    throw std::invalid_argument("train_base: shape model dimension " +
                                std::to_string(shape_model.dim()) + " != 3M = " +
                                std::to_string(3 * m));
  if (use_pca && a.scores.front().size() != shape_model.num_modes())
    throw std::invalid_argument("train_base: score length does not match model modes");

  nn::set_compute_threads(static_cast<std::size_t>(config.threads));
  BaseDeepSSM model(shape_model, a.dhw, config.seed);

  FocalParams fp{};
  if (focal) {
    fp.a = focal_a_default("particle");
    fp.c = focal_c_heuristic(subset(data.correspondences, a.train_idx),
                             mean_correspondences(data.correspondences, a.train_idx));
  }

  nn::AdamConfig adam_cfg;
  adam_cfg.learning_rate = config.learning_rate;
  adam_cfg.weight_decay = config.weight_decay;
  nn::Adam opt(model.trainable_parameters(), adam_cfg);
  nn::LrSchedule schedule{nn::LrSchedule::Kind::cosine_annealing, config.epochs};

  TrainHistory history;
  StopState stop;
  std::size_t start_epoch = 0;

  if (!io.resume.empty() && std::filesystem::exists(io.resume)) {
    nn::Checkpoint ckpt = nn::Checkpoint::load(io.resume);
    check_resume_compatible(ckpt, "base-train-state", config);
    restore_section_into(ckpt, "encoder", model.encoder().state());
    restore_section_into(ckpt, "optimizer", opt.state());
    opt.set_step_count(static_cast<std::size_t>(ckpt.meta("adam_step")));
    load_stop_state(ckpt, stop);
    if (const auto* best = ckpt.find_section("best.encoder")) stop.best = best->tensors;
    if (const auto* hist = ckpt.find_section("history"))
      history = history_from_tensor(hist->tensors.front().tensor);
    if (focal) fp.c = ckpt.meta("focal_c");
    start_epoch = static_cast<std::size_t>(ckpt.meta("epoch"));
  }

  auto batch_loss = [&](Tape* tape, std::span<const std::size_t> idx, bool training) {
    Tensor x = batch_volumes(a, idx);
    Tensor z = model.predict_scores(tape, x, training);
    if (use_pca) return loss_pca(tape, z, batch_rows(a.scores, idx));
    Tensor c = model.reconstruct_correspondences(tape, z);
    Tensor t = batch_rows(a.corr, idx);
    return focal ? loss_focal_particles(tape, c, t, fp) : loss_corr(tape, c, t);
  };

  for (std::size_t e = start_epoch;
       e < config.epochs && stop.since_improve < config.patience; ++e) {
    const double lr = schedule.rate_at(e, config.learning_rate);
    opt.set_learning_rate(lr);

    std::vector<std::size_t> order = a.train_idx;
    Rng erng(train_stream(config.seed, 1 + e));
    erng.shuffle(order);

    double train_total = 0.0;
    std::size_t train_count = 0;
    for (std::size_t lo = 0; lo < order.size(); lo += config.batch_size) {
      const std::size_t hi = std::min(lo + config.batch_size, order.size());
      if (hi - lo < 2) break;  // trailing singleton: batch norm cannot use it
      std::span<const std::size_t> idx(order.data() + lo, hi - lo);
      Tape tape;
      Tensor loss = batch_loss(&tape, idx, /*training=*/true);
      const double value = loss.item();
      require_finite(value, "training loss", e + 1);
      opt.zero_grad();
      tape.backward(loss);
      opt.step();
      train_total += value * static_cast<double>(idx.size());
      train_count += idx.size();
    }
    const double train_loss = train_total / static_cast<double>(train_count);

    const double val_loss =
        mean_loss_over(a.val_idx, config.batch_size,
                       [&](std::span<const std::size_t> idx) {
                         return batch_loss(nullptr, idx, /*training=*/false).item();
                       });
    require_finite(val_loss, "validation loss", e + 1);

    history.epochs.push_back({e + 1, 0, train_loss, val_loss, lr});
    if (val_loss < stop.best_val) {
      stop.best_val = val_loss;
      stop.best_epoch = e + 1;
      stop.since_improve = 0;
      stop.best = clone_state(model.encoder().state());
    } else {
      ++stop.since_improve;
    }

    if (!io.save_last.empty()) {
      nn::Checkpoint ckpt;
      put_common_meta(ckpt, "base-train-state", config, stop, opt.step_count());
      ckpt.meta_num["epoch"] = static_cast<double>(e + 1);
      if (focal) ckpt.meta_num["focal_c"] = fp.c;
      auto& enc = ckpt.add_section("encoder");
      enc.specs = model.encoder().specs();
      enc.tensors = model.encoder().state();
      ckpt.add_section("best.encoder").tensors = stop.best;
      ckpt.add_section("optimizer").tensors = opt.state();
      ckpt.add_section("history").tensors = {{"rows", history_tensor(history)}};
      ckpt.save(io.save_last);
    }
  }

  if (!stop.best.empty()) restore_state(stop.best, model.encoder().state());
  return {std::move(model), std::move(history), stop.best_val, stop.best_epoch};
}

// ---- TL training ------------------------------------------------------------------

namespace {

std::vector<nn::NamedTensor> tl_state(TlDeepSSM& model) {
  std::vector<nn::NamedTensor> out;
  auto append = [&out](const char* prefix, const std::vector<nn::NamedTensor>& sub) {
    for (const auto& nt : sub) out.push_back({std::string(prefix) + "." + nt.name, nt.tensor});
  };
  append("ae_encoder", model.ae_encoder().state());
  append("ae_decoder", model.ae_decoder().state());
  append("t_flank", model.t_flank().state());
  return out;
}

struct TlPhase {
  int index = 0;  // 1..3
  double lambda1 = 0.0, lambda2 = 0.0;
  std::vector<Tensor> params;
  double initial_rate = 0.0;
  nn::LrSchedule schedule;
  std::size_t max_epochs = 0;
};

}  // namespace

TlTrainResult train_tl(const TrainingSet& data, const TrainConfig& config,
                       const TrainIo& io) {
  config.validate();
  if (config.loss != LossKind::corr && config.loss != LossKind::focal_tl)
    throw std::invalid_argument("train_tl: loss must be corr or focal_tl");
  const bool focal = config.loss == LossKind::focal_tl;

  Arrays a = prepare_arrays(data, config, /*need_scores=*/false);
  const std::size_t m = data.correspondences.front().size();

  nn::set_compute_threads(static_cast<std::size_t>(config.threads));
  TlDeepSSM model(m, a.dhw, config.bottleneck, config.hidden, config.seed);

  std::pair<FocalParams, FocalParams> fp{};
  if (focal) {
    fp.first.a = focal_a_default("particle");
    fp.first.c = focal_c_heuristic(subset(data.correspondences, a.train_idx),
                                   mean_correspondences(data.correspondences, a.train_idx));
    fp.second.a = focal_a_default("latent");
    fp.second.c = 1.0;  // placeholder until the phase-2 latents exist
  }

  // Focal threshold for the latent term: 90th percentile of latent deviations
  // under the current autoencoder, recomputed when each latent-using phase starts.
  auto latent_c = [&]() {
    Tensor rows = batch_rows(a.corr, a.train_idx);
    Tensor latents = model.encode(nullptr, rows, /*training=*/false);
    std::vector<std::vector<double>> descriptors(a.train_idx.size());
    const double* in = latents.data();
    for (auto& d : descriptors) {
      d.assign(in, in + config.bottleneck);
      in += config.bottleneck;
    }
    return focal_c_latent(descriptors);
  };

  nn::AdamConfig adam_cfg;
  adam_cfg.weight_decay = config.weight_decay;

  TlPhase phases[3];
  phases[0] = {1, 1.0, 0.0, model.autoencoder_parameters(), config.ae_learning_rate,
               {nn::LrSchedule::Kind::constant, config.tl_epochs[0]}, config.tl_epochs[0]};
  phases[1] = {2, 0.0, 1.0, model.flank_parameters(), config.learning_rate,
               {nn::LrSchedule::Kind::cosine_annealing, config.tl_epochs[1]},
               config.tl_epochs[1]};
  phases[2] = {3, 1.0, 1.0, model.all_parameters(), config.learning_rate,
               {nn::LrSchedule::Kind::cosine_annealing, config.tl_epochs[2]},
               config.tl_epochs[2]};

  TrainHistory history;
  std::size_t cumulative = 0;   // completed epochs across phases
  int resume_phase = 0;         // 1..3 when resuming
  std::size_t resume_epoch = 0; // completed epochs within that phase
  StopState resume_stop;
  bool have_resume = false;
  std::size_t resume_adam_step = 0;
  nn::Checkpoint resume_ckpt;

  if (!io.resume.empty() && std::filesystem::exists(io.resume)) {
    resume_ckpt = nn::Checkpoint::load(io.resume);
    check_resume_compatible(resume_ckpt, "tl-train-state", config);
    restore_section_into(resume_ckpt, "ae_encoder", model.ae_encoder().state());
    restore_section_into(resume_ckpt, "ae_decoder", model.ae_decoder().state());
    restore_section_into(resume_ckpt, "t_flank", model.t_flank().state());
    if (const auto* hist = resume_ckpt.find_section("history"))
      history = history_from_tensor(hist->tensors.front().tensor);
    load_stop_state(resume_ckpt, resume_stop);
    if (const auto* best = resume_ckpt.find_section("best.state"))
      resume_stop.best = best->tensors;
    resume_phase = static_cast<int>(resume_ckpt.meta("phase"));
    resume_epoch = static_cast<std::size_t>(resume_ckpt.meta("phase_epoch"));
    cumulative = static_cast<std::size_t>(resume_ckpt.meta("epoch"));
    resume_adam_step = static_cast<std::size_t>(resume_ckpt.meta("adam_step"));
    if (focal) {
      fp.first.c = resume_ckpt.meta("focal_c_particle");
      fp.second.c = resume_ckpt.meta("focal_c_latent");
    }
    have_resume = true;
  }

  StopState final_stop;  // phase-3 early-stopping record, reported to the caller

  for (TlPhase& phase : phases) {
    if (have_resume && phase.index < resume_phase) continue;  // already finished

    const bool resuming_here = have_resume && phase.index == resume_phase;
    std::size_t start_epoch = resuming_here ? resume_epoch : 0;
    if (focal && !resuming_here && phase.index >= 2) fp.second.c = latent_c();

    nn::Adam opt(phase.params, adam_cfg);
    StopState stop;
    if (resuming_here) {
      stop = resume_stop;
      restore_section_into(resume_ckpt, "optimizer", opt.state());
      opt.set_step_count(resume_adam_step);
    }

    for (std::size_t e = start_epoch;
         e < phase.max_epochs && stop.since_improve < config.patience; ++e) {
      const double lr = phase.schedule.rate_at(e, phase.initial_rate);
      opt.set_learning_rate(lr);

      std::vector<std::size_t> order = a.train_idx;
      Rng erng(train_stream(config.seed, 1 + cumulative));
      erng.shuffle(order);

      double train_total = 0.0;
      std::size_t train_count = 0;
      for (std::size_t lo = 0; lo < order.size(); lo += config.batch_size) {
        const std::size_t hi = std::min(lo + config.batch_size, order.size());
        if (hi - lo < 2) break;
        std::span<const std::size_t> idx(order.data() + lo, hi - lo);
        Tensor corr = batch_rows(a.corr, idx);
        Tensor vols = batch_volumes(a, idx);
        Tape tape;
        TlLossTerms terms = loss_tl(&tape, model, corr, vols, phase.lambda1,
                                    phase.lambda2, focal ? &fp : nullptr,
                                    /*training=*/true);
        const double value = terms.total.item();
        require_finite(value, "training loss", cumulative + 1);
        opt.zero_grad();
        tape.backward(terms.total);
        opt.step();
        train_total += value * static_cast<double>(idx.size());
        train_count += idx.size();
      }
      const double train_loss = train_total / static_cast<double>(train_count);

      const double val_loss = mean_loss_over(
          a.val_idx, config.batch_size, [&](std::span<const std::size_t> idx) {
            Tensor corr = batch_rows(a.corr, idx);
            Tensor vols = batch_volumes(a, idx);
            return loss_tl(nullptr, model, corr, vols, phase.lambda1, phase.lambda2,
                           focal ? &fp : nullptr, /*training=*/false)
                .total.item();
          });
      require_finite(val_loss, "validation loss", cumulative + 1);

      ++cumulative;
      history.epochs.push_back({cumulative, phase.index, train_loss, val_loss, lr});
      if (val_loss < stop.best_val) {
        stop.best_val = val_loss;
        stop.best_epoch = cumulative;
        stop.since_improve = 0;
        stop.best = clone_state(tl_state(model));
      } else {
        ++stop.since_improve;
      }

      if (!io.save_last.empty()) {
        nn::Checkpoint ckpt;
        put_common_meta(ckpt, "tl-train-state", config, stop, opt.step_count());
        ckpt.meta_num["phase"] = phase.index;
        ckpt.meta_num["phase_epoch"] = static_cast<double>(e + 1);
        ckpt.meta_num["epoch"] = static_cast<double>(cumulative);
        if (focal) {
          ckpt.meta_num["focal_c_particle"] = fp.first.c;
          ckpt.meta_num["focal_c_latent"] = fp.second.c;
        }
        auto add = [&ckpt](const std::string& name, nn::Sequential& seq) {
          auto& sec = ckpt.add_section(name);
          sec.specs = seq.specs();
          sec.tensors = seq.state();
        };
        add("ae_encoder", model.ae_encoder());
        add("ae_decoder", model.ae_decoder());
        add("t_flank", model.t_flank());
        ckpt.add_section("best.state").tensors = stop.best;
        ckpt.add_section("optimizer").tensors = opt.state();
        ckpt.add_section("history").tensors = {{"rows", history_tensor(history)}};
        ckpt.save(io.save_last);
      }
    }

    if (!stop.best.empty()) restore_state(stop.best, tl_state(model));
    if (phase.index == 3) final_stop = std::move(stop);
  }

  return {std::move(model), std::move(history), final_stop.best_val,
          final_stop.best_epoch};
}

}  // namespace deepssm
