#pragma once

#include <span>
#include <vector>

#include "deepssm/rng.hpp"
#include "deepssm/shape_model.hpp"

namespace deepssm {

/// Equal-weight isotropic Gaussian mixture over training PCA scores:
/// p_σ(Z) = (1/N)·Σ_n (2πσ²)^{−L/2}·exp(−||Z − Z_n||²/(2σ²)).
struct KdeModel {
  std::vector<ScoreVector> training_scores;  // N × L
  double bandwidth = 0.0;                    // σ
};

/// Bandwidth = average nearest-neighbor distance among the scores.
KdeModel fit_kde(const std::vector<ScoreVector>& scores);

/// Testing hook: same model with a caller-chosen bandwidth (σ ≥ 0; σ = 0 is
/// the degenerate resampling limit used by contract tests).
KdeModel kde_with_bandwidth(const std::vector<ScoreVector>& scores, double sigma);

double kde_density(const KdeModel& model, std::span<const double> z);

struct KdeDraw {
  ScoreVector score;   // Z_s = Z_n + σ·ε
  std::size_t parent;  // n — the training sample whose kernel was drawn from
};

KdeDraw kde_sample(const KdeModel& model, Rng& rng);

}  // namespace deepssm
