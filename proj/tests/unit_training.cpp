// Unit tests for the training loops: configuration/data validation, history
// bookkeeping, the learning-rate trajectory, bit-exact determinism, resume
// equivalence, and the frozen layers surviving training untouched.
//
// All fixtures are deliberately tiny (8³ volumes, ≤ 9 samples, ≤ 4 epochs) so
// the full file runs in seconds.
//
// Provenance tags: [DERIVED] oracle-computed, [PAPER] method-pinned,
// [TRIVIAL] immediate contract consequence.

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "doctest.h"

#include "deepssm/optimizer.hpp"
#include "deepssm/rng.hpp"
#include "deepssm/shape_model.hpp"
#include "deepssm/training.hpp"
#include "deepssm/volume.hpp"
#include "support.hpp"

using deepssm::CorrespondenceSet;
using deepssm::GridSpec;
using deepssm::LossKind;
using deepssm::Rng;
using deepssm::ShapeModel;
using deepssm::TrainConfig;
using deepssm::TrainingSet;
using deepssm::TrainIo;
using deepssm::Volume;
namespace ts = testsupport;

namespace {

/// Nine aligned (volume, correspondence) pairs on an 8³ grid. The voxel data
/// is seeded per sample so images differ; no image-shape coupling is needed
/// for mechanics tests.
TrainingSet tiny_set(std::size_t n = 9, std::size_t m = 6) {
  TrainingSet set;
  set.correspondences = ts::random_population(n, m, /*seed=*/1234, /*spread=*/0.7);
  GridSpec grid{{8, 8, 8}, {4, 4, 4}, {-14, -14, -14}};
  for (std::size_t i = 0; i < n; ++i) {
    Volume v(grid);
    Rng rng(9000 + i);
    for (auto& d : v.data) d = rng.normal();
    set.volumes.push_back(std::move(v));
  }
  return set;
}

TrainConfig tiny_config(std::size_t epochs = 3) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.tl_epochs = {1, 1, 1};
  cfg.batch_size = 3;
  cfg.patience = 50;  // never triggers in these short runs
  cfg.val_fraction = 0.25;
  cfg.bottleneck = 2;
  cfg.hidden = 8;
  cfg.seed = 77;
  return cfg;
}

}  // namespace

// ---- parsing and validation ----------------------------------------------------

TEST_CASE("loss kinds parse and print round-trip") {
  for (auto kind : {LossKind::corr, LossKind::pca, LossKind::focal_corr,
                    LossKind::focal_tl})
    CHECK(deepssm::parse_loss_kind(deepssm::loss_kind_name(kind)) == kind);
  CHECK_THROWS_AS(static_cast<void>(deepssm::parse_loss_kind("l2")),
                  std::invalid_argument);
}

TEST_CASE("train config validation") {
  TrainConfig cfg = tiny_config();
  CHECK_NOTHROW(cfg.validate());

  auto broken = cfg;
  broken.batch_size = 1;  // batch norm needs ≥ 2
  CHECK_THROWS_AS(broken.validate(), std::invalid_argument);
  broken = cfg;
  broken.epochs = 0;
  CHECK_THROWS_AS(broken.validate(), std::invalid_argument);
  broken = cfg;
  broken.tl_epochs = {2, 0, 1};
  CHECK_THROWS_AS(broken.validate(), std::invalid_argument);
  broken = cfg;
  broken.val_fraction = 1.0;
  CHECK_THROWS_AS(broken.validate(), std::invalid_argument);
  broken = cfg;
  broken.learning_rate = 0.0;
  CHECK_THROWS_AS(broken.validate(), std::invalid_argument);
  broken = cfg;
  broken.patience = 0;
  CHECK_THROWS_AS(broken.validate(), std::invalid_argument);
}

TEST_CASE("training set validation") {
  TrainingSet set = tiny_set(4);
  CHECK_NOTHROW(set.validate());

  auto misaligned = set;
  misaligned.correspondences.pop_back();
  CHECK_THROWS_AS(misaligned.validate(), std::invalid_argument);

  auto mixed_grids = set;
  mixed_grids.volumes[1].grid.origin[0] += 1.0;
  CHECK_THROWS_AS(mixed_grids.validate(), std::invalid_argument);

  auto bad_voxel = set;
  bad_voxel.volumes[0].data[3] = std::nan("");
  CHECK_THROWS(bad_voxel.validate());

  auto bad_scores = set;
  bad_scores.scores = {{1.0}, {2.0}, {3.0}};  // wrong count
  CHECK_THROWS_AS(bad_scores.validate(), std::invalid_argument);
}

// ---- base training ---------------------------------------------------------------

TEST_CASE("train_base records history with the cosine learning-rate column") {
  TrainingSet set = tiny_set();
  ShapeModel model = deepssm::fit_pca(set.correspondences, 3);
  TrainConfig cfg = tiny_config(3);

  auto result = deepssm::train_base(set, model, cfg);
  REQUIRE(result.history.epochs.size() == 3);
  for (std::size_t e = 0; e < 3; ++e) {
    const auto& row = result.history.epochs[e];
    CHECK(row.epoch == e + 1);
    CHECK(row.phase == 0);
    CHECK(std::isfinite(row.train_loss));
    CHECK(std::isfinite(row.val_loss));
    // [DERIVED] lr(e) = 0.5·lr0·(1 + cos(π·e/epochs)).
    double expect = 0.5 * cfg.learning_rate *
                    (1.0 + std::cos(std::numbers::pi * static_cast<double>(e) / 3.0));
    CHECK(row.learning_rate == doctest::Approx(expect).epsilon(1e-12));
  }

  // Best-epoch bookkeeping is consistent with the recorded rows.
  REQUIRE(result.best_epoch >= 1);
  REQUIRE(result.best_epoch <= 3);
  CHECK(result.history.epochs[result.best_epoch - 1].val_loss == result.best_val_loss);
  for (const auto& row : result.history.epochs)
    CHECK(row.val_loss >= result.best_val_loss);

  // The frozen reconstruction layer is bit-unchanged by training. [PAPER]
  const auto& w = result.model.fixed_layer().weight();
  const auto& b = result.model.fixed_layer().bias();
  for (long i = 0; i < model.mean.size(); ++i) {
    CHECK(b[static_cast<std::size_t>(i)] == model.mean(i));
    for (long k = 0; k < 3; ++k)
      CHECK(w[static_cast<std::size_t>(i * 3 + k)] == model.basis(i, k));
  }

  // CSV export: header plus one row per epoch.
  auto dir = ts::fresh_temp_dir("history_csv");
  result.history.save_csv(dir / "history.csv");
  std::ifstream in(dir / "history.csv");
  std::string line;
  std::getline(in, line);
  CHECK(line == "epoch,train_loss,val_loss,lr");
  std::size_t rows = 0;
  while (std::getline(in, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 3);
  std::filesystem::remove_all(dir);
}

TEST_CASE("train_base is bit-exactly deterministic") {
  TrainingSet set = tiny_set();
  ShapeModel model = deepssm::fit_pca(set.correspondences, 3);
  TrainConfig cfg = tiny_config(2);

  auto r1 = deepssm::train_base(set, model, cfg);
  auto r2 = deepssm::train_base(set, model, cfg);
  REQUIRE(r1.history.epochs.size() == r2.history.epochs.size());
  for (std::size_t e = 0; e < r1.history.epochs.size(); ++e) {
    CHECK(r1.history.epochs[e].train_loss == r2.history.epochs[e].train_loss);
    CHECK(r1.history.epochs[e].val_loss == r2.history.epochs[e].val_loss);
  }

  auto dir = ts::fresh_temp_dir("base_det");
  r1.model.save(dir / "a.dssm");
  r2.model.save(dir / "b.dssm");
  CHECK(ts::same_bytes(dir / "a.dssm", dir / "b.dssm"));

  // A different seed trains a different model.
  auto cfg2 = cfg;
  cfg2.seed = 78;
  auto r3 = deepssm::train_base(set, model, cfg2);
  r3.model.save(dir / "c.dssm");
  CHECK_FALSE(ts::same_bytes(dir / "a.dssm", dir / "c.dssm"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("train_base resume reproduces the uninterrupted run bit-exactly") {
  TrainingSet set = tiny_set();
  ShapeModel model = deepssm::fit_pca(set.correspondences, 3);
  auto dir = ts::fresh_temp_dir("base_resume");

  // Straight three-epoch run.
  TrainConfig cfg = tiny_config(3);
  auto straight = deepssm::train_base(set, model, cfg);
  straight.model.save(dir / "straight.dssm");

  // Interrupted after one epoch: epoch 1 uses lr0 under any cosine horizon,
  // so its trajectory matches the straight run's first epoch exactly.
  TrainConfig one = cfg;
  one.epochs = 1;
  TrainIo io_first;
  io_first.save_last = dir / "last.dssm";
  static_cast<void>(deepssm::train_base(set, model, one, io_first));

  // Resume under the full horizon: epochs 2..3 must replay the straight run.
  TrainIo io_resume;
  io_resume.resume = dir / "last.dssm";
  auto resumed = deepssm::train_base(set, model, cfg, io_resume);
  resumed.model.save(dir / "resumed.dssm");

  CHECK(ts::same_bytes(dir / "straight.dssm", dir / "resumed.dssm"));
  REQUIRE(resumed.history.epochs.size() == straight.history.epochs.size());
  for (std::size_t e = 0; e < straight.history.epochs.size(); ++e) {
    CHECK(resumed.history.epochs[e].train_loss == straight.history.epochs[e].train_loss);
    CHECK(resumed.history.epochs[e].val_loss == straight.history.epochs[e].val_loss);
    CHECK(resumed.history.epochs[e].learning_rate ==
          straight.history.epochs[e].learning_rate);
  }
  CHECK(resumed.best_epoch == straight.best_epoch);
  CHECK(resumed.best_val_loss == straight.best_val_loss);

  // Resuming a finished run performs no further epochs and returns the same
  // model. [TRIVIAL] the checkpoint records three completed epochs
  TrainIo io_done;
  io_done.resume = dir / "last2.dssm";
  TrainIo io_save_full;
  io_save_full.save_last = dir / "last2.dssm";
  static_cast<void>(deepssm::train_base(set, model, cfg, io_save_full));
  auto replay = deepssm::train_base(set, model, cfg, io_done);
  replay.model.save(dir / "replay.dssm");
  CHECK(ts::same_bytes(dir / "straight.dssm", dir / "replay.dssm"));

  // Incompatible checkpoints are rejected rather than silently diverging.
  TrainConfig other = cfg;
  other.seed = 5;
  CHECK_THROWS_AS(static_cast<void>(deepssm::train_base(set, model, other, io_done)),
                  std::runtime_error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("train_base rejects unusable losses and data") {
  TrainingSet set = tiny_set(4);
  ShapeModel model = deepssm::fit_pca(set.correspondences, 3);

  TrainConfig cfg = tiny_config(1);
  cfg.loss = LossKind::focal_tl;
  CHECK_THROWS_AS(static_cast<void>(deepssm::train_base(set, model, cfg)),
                  std::invalid_argument);

  cfg.loss = LossKind::pca;  // needs per-sample scores
  CHECK_THROWS_AS(static_cast<void>(deepssm::train_base(set, model, cfg)),
                  std::invalid_argument);

  cfg.loss = LossKind::corr;
  TrainingSet pair = tiny_set(2);
  ShapeModel pair_model = deepssm::fit_pca(pair.correspondences, 1);
  CHECK_THROWS_AS(static_cast<void>(deepssm::train_base(pair, pair_model, cfg)),
                  std::invalid_argument);  // no split possible

  // Dimension mismatch between data and shape model.
  TrainingSet bigger = tiny_set(9, 8);
  CHECK_THROWS_AS(static_cast<void>(deepssm::train_base(bigger, model, tiny_config(1))),
                  std::invalid_argument);
}

TEST_CASE("train_base with the pca loss consumes per-sample scores") {
  TrainingSet set = tiny_set();
  ShapeModel model = deepssm::fit_pca(set.correspondences, 3);
  for (const auto& shape : set.correspondences)
    set.scores.push_back(deepssm::project(model, shape));

  TrainConfig cfg = tiny_config(2);
  cfg.loss = LossKind::pca;
  auto result = deepssm::train_base(set, model, cfg);
  CHECK(result.history.epochs.size() == 2);
  for (const auto& row : result.history.epochs) CHECK(std::isfinite(row.val_loss));
}

TEST_CASE("train_base with the focal loss trains and records finite rows") {
  TrainingSet set = tiny_set();
  ShapeModel model = deepssm::fit_pca(set.correspondences, 3);
  TrainConfig cfg = tiny_config(2);
  cfg.loss = LossKind::focal_corr;
  auto result = deepssm::train_base(set, model, cfg);
  CHECK(result.history.epochs.size() == 2);
  for (const auto& row : result.history.epochs) {
    CHECK(std::isfinite(row.train_loss));
    CHECK(row.train_loss >= 0.0);
  }
}

// ---- TL training -------------------------------------------------------------------

TEST_CASE("train_tl walks the three phases with their own schedules") {
  TrainingSet set = tiny_set();
  TrainConfig cfg = tiny_config();
  cfg.tl_epochs = {2, 2, 2};

  auto result = deepssm::train_tl(set, cfg);
  REQUIRE(result.history.epochs.size() == 6);
  // [TRIVIAL] phases appear in order, 1-based cumulative epoch numbering.
  for (std::size_t e = 0; e < 6; ++e) {
    CHECK(result.history.epochs[e].epoch == e + 1);
    CHECK(result.history.epochs[e].phase == static_cast<int>(e / 2) + 1);
  }
  // Phase 1 holds the autoencoder rate constant; phases 2-3 anneal from lr0.
  CHECK(result.history.epochs[0].learning_rate == cfg.ae_learning_rate);
  CHECK(result.history.epochs[1].learning_rate == cfg.ae_learning_rate);
  CHECK(result.history.epochs[2].learning_rate == cfg.learning_rate);
  CHECK(result.history.epochs[3].learning_rate <
        result.history.epochs[2].learning_rate);
  CHECK(result.history.epochs[4].learning_rate == cfg.learning_rate);

  // The reported best tracks the final (joint) phase only.
  double best = std::min(result.history.epochs[4].val_loss,
                         result.history.epochs[5].val_loss);
  CHECK(result.best_val_loss == best);
  CHECK(result.best_epoch >= 5);
}

TEST_CASE("train_tl is deterministic and rejects base-only losses") {
  TrainingSet set = tiny_set();
  TrainConfig cfg = tiny_config();

  auto r1 = deepssm::train_tl(set, cfg);
  auto r2 = deepssm::train_tl(set, cfg);
  auto dir = ts::fresh_temp_dir("tl_det");
  r1.model.save(dir / "a.dssm");
  r2.model.save(dir / "b.dssm");
  CHECK(ts::same_bytes(dir / "a.dssm", dir / "b.dssm"));
  std::filesystem::remove_all(dir);

  for (auto bad : {LossKind::pca, LossKind::focal_corr}) {
    auto broken = cfg;
    broken.loss = bad;
    CHECK_THROWS_AS(static_cast<void>(deepssm::train_tl(set, broken)),
                    std::invalid_argument);
  }
}

TEST_CASE("train_tl resume continues the joint phase bit-exactly") {
  TrainingSet set = tiny_set();
  auto dir = ts::fresh_temp_dir("tl_resume");

  // Straight run: one epoch per early phase, two joint epochs.
  TrainConfig cfg = tiny_config();
  cfg.tl_epochs = {1, 1, 2};
  auto straight = deepssm::train_tl(set, cfg);
  straight.model.save(dir / "straight.dssm");

  // Interrupted run: identical through cumulative epoch 3 (the first joint
  // epoch runs at lr0 under either phase horizon), then stops.
  TrainConfig shorter = cfg;
  shorter.tl_epochs = {1, 1, 1};
  TrainIo io_first;
  io_first.save_last = dir / "last.dssm";
  static_cast<void>(deepssm::train_tl(set, shorter, io_first));

  TrainIo io_resume;
  io_resume.resume = dir / "last.dssm";
  auto resumed = deepssm::train_tl(set, cfg, io_resume);
  resumed.model.save(dir / "resumed.dssm");

  CHECK(ts::same_bytes(dir / "straight.dssm", dir / "resumed.dssm"));
  REQUIRE(resumed.history.epochs.size() == straight.history.epochs.size());
  for (std::size_t e = 0; e < straight.history.epochs.size(); ++e) {
    CHECK(resumed.history.epochs[e].train_loss == straight.history.epochs[e].train_loss);
    CHECK(resumed.history.epochs[e].val_loss == straight.history.epochs[e].val_loss);
  }
  CHECK(resumed.best_val_loss == straight.best_val_loss);
  std::filesystem::remove_all(dir);
}

TEST_CASE("train_tl with the focal loss runs all phases") {
  TrainingSet set = tiny_set();
  TrainConfig cfg = tiny_config();
  cfg.loss = LossKind::focal_tl;
  auto result = deepssm::train_tl(set, cfg);
  CHECK(result.history.epochs.size() == 3);
  for (const auto& row : result.history.epochs) {
    CHECK(std::isfinite(row.train_loss));
    CHECK(row.train_loss >= 0.0);
  }
}
