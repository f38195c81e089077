#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "deepssm/networks.hpp"
#include "deepssm/shape_model.hpp"
#include "deepssm/volume.hpp"

namespace deepssm {

/// Which loss drives training. `corr` and `pca` are the plain squared losses
/// on correspondences / PCA scores; `focal_corr` gates the correspondence
/// loss per particle; `focal_tl` gates both TL terms (particles for the
/// autoencoder, whole latent vectors for the T-flank).
enum class LossKind { corr, pca, focal_corr, focal_tl };

LossKind parse_loss_kind(const std::string& name);
std::string loss_kind_name(LossKind kind);

struct TrainConfig {
  std::size_t epochs = 60;                       // Base: maximum epochs
  std::array<std::size_t, 3> tl_epochs{80, 40, 20};  // TL: per-phase maxima
  std::size_t batch_size = 6;                    // 5–10 works well; ≥ 2 required
  double learning_rate = 1e-3;                   // cosine-annealed per phase
  double ae_learning_rate = 1e-4;                // constant, phase 1 only
  double weight_decay = 5e-5;
  LossKind loss = LossKind::corr;
  std::size_t patience = 10;                     // epochs without val improvement
  double val_fraction = 0.1;                     // 90%-10% split by default
  std::size_t bottleneck = 64;                   // TL latent width
  std::size_t hidden = 256;                      // TL autoencoder hidden width
  std::uint64_t seed = 0;
  int threads = 1;

  void validate() const;
};

/// Aligned training triplets. `scores` may be empty unless the loss is `pca`.
struct TrainingSet {
  std::vector<Volume> volumes;
  std::vector<CorrespondenceSet> correspondences;
  std::vector<ScoreVector> scores;

  std::size_t size() const { return volumes.size(); }
  /// Alignment, a shared grid, consistent particle counts, finite values.
  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based, cumulative across TL phases
  int phase = 0;          // 0 = Base; 1..3 = TL phases
  double train_loss = 0.0;
  double val_loss = 0.0;
  double learning_rate = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  /// CSV with header: epoch,train_loss,val_loss,lr
  void save_csv(const std::filesystem::path& path) const;
};

/// Optional persistence: `resume` (if it exists) restores a run saved by
/// `save_last`, reproducing the uninterrupted trajectory bit-exactly given
/// the same data and config; `save_last` is rewritten after every epoch.
struct TrainIo {
  std::filesystem::path resume;
  std::filesystem::path save_last;
};

struct BaseTrainResult {
  BaseDeepSSM model;  // parameters from the epoch with lowest validation loss
  TrainHistory history;
  double best_val_loss = 0.0;
  std::size_t best_epoch = 0;  // 1-based
};

struct TlTrainResult {
  TlDeepSSM model;
  TrainHistory history;
  double best_val_loss = 0.0;  // over the final (joint) phase
  std::size_t best_epoch = 0;
};

/// Train the CNN-to-PCA-scores regressor. The split, batch order and
/// initialization all derive from config.seed; reruns are bit-identical.
/// Throws on non-finite losses (with the offending epoch in the message).
BaseTrainResult train_base(const TrainingSet& data, const ShapeModel& shape_model,
                           const TrainConfig& config, const TrainIo& io = {});

/// Three-phase TL training: (λ1,λ2) = (1,0) autoencoder alone, (0,1) T-flank
/// against the frozen autoencoder's latents, (1,1) joint. Each phase early-
/// stops on its validation loss and restores its best parameters before the
/// next begins.
TlTrainResult train_tl(const TrainingSet& data, const TrainConfig& config,
                       const TrainIo& io = {});

}  // namespace deepssm
