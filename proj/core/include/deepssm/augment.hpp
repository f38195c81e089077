#pragma once

#include <cstdint>
#include <vector>

#include "deepssm/correspondence.hpp"
#include "deepssm/kde.hpp"
#include "deepssm/shape_model.hpp"
#include "deepssm/volume.hpp"

namespace deepssm {

/// One generated training pair: the sampled shape C_s (reconstructed from the
/// drawn scores Z_s) and the parent image warped onto it.
struct AugmentedSample {
  Volume volume;                    // I_s
  CorrespondenceSet correspondences;  // C_s
  ScoreVector scores;               // Z_s
  std::size_t parent_id = 0;        // n — index of the source kernel/image
};

struct AugmentResult {
  double bandwidth = 0.0;  // σ of the fitted KDE, for manifest cross-checks
  std::vector<AugmentedSample> samples;
};

/// §-style pipeline per draw: sample (Z_s, n) from the KDE over training
/// scores, reconstruct C_s, fit the backward TPS (C_s → C_n), and pull the
/// parent image back through it. Draw i uses its own RNG stream derived from
/// (seed, i), so results are independent of execution order and thread count.
/// tps_lambda < 0 selects the default spacing-based regularization.
AugmentResult augment_population(const std::vector<Volume>& images,
                                 const std::vector<CorrespondenceSet>& correspondences,
                                 const ShapeModel& model, std::size_t count,
                                 std::uint64_t seed, double tps_lambda = -1.0,
                                 std::size_t threads = 1);

}  // namespace deepssm
