#pragma once

#include <cstddef>
#include <vector>

#include <Eigen/Dense>

#include "deepssm/correspondence.hpp"

namespace deepssm {

/// PPCA model of a control population: the 1/N covariance is completed to
/// full rank as S = U_[:L] Λ_[:L] U_[:L]ᵀ + σ²I, with σ² the average of the
/// discarded eigenvalues — so S has eigenvalues Λ_i + σ² along the retained
/// modes and σ² everywhere else.
struct SeverityModel {
  Eigen::VectorXd mean;      // C̄, length D = 3M
  Eigen::MatrixXd subspace;  // U_[:L], D × L
  Eigen::VectorXd lambda;    // Λ_[:L], descending
  double sigma2 = 0.0;       // residual variance, after flooring
  double sigma2_raw = 0.0;   // exact Σ_{i>L} Λ_i / (D−L)
  bool floored = false;      // true when sigma2_raw was below the floor
  double subspace_fraction = 0.95;

  std::size_t dim() const { return static_cast<std::size_t>(mean.size()); }
  std::size_t num_modes() const { return static_cast<std::size_t>(lambda.size()); }
  /// Eigenvalue of S for (sorted) mode index i, any i < D.
  double full_eigenvalue(std::size_t i) const {
    return i < num_modes() ? lambda[static_cast<Eigen::Index>(i)] + sigma2 : sigma2;
  }
};

/// Fit on ≥ 2 control shapes: L is the smallest k whose leading eigenvalues
/// reach `subspace_fraction` of total variance. σ² is floored at
/// 1e-8·Λ_max (flag `floored` set) so the whitening stays defined when the
/// data lies exactly in the subspace. Throws when the controls are all
/// identical (zero covariance).
SeverityModel fit_ppca(const std::vector<CorrespondenceSet>& controls,
                       double subspace_fraction = 0.95);

/// Whitened deviation C̃ = U_S Λ_S^{−1/2} U_Sᵀ (C − C̄), computed in closed
/// form from the stored subspace (no D×D matrices).
Eigen::VectorXd whiten(const SeverityModel& model, const Eigen::VectorXd& flat_shape);
Eigen::VectorXd whiten(const SeverityModel& model, const CorrespondenceSet& shape);

/// Severity = ||C̃||₂ — the multi-dimensional Z-score magnitude.
double severity_score(const SeverityModel& model, const CorrespondenceSet& shape);

/// Signed per-point field on the mean shape: the whitened deviations of all
/// `shapes` are averaged, read as M 3-vectors, and projected onto the given
/// outward unit normals (positive = outward).
std::vector<double> pointwise_mahalanobis(const SeverityModel& model,
                                          const std::vector<CorrespondenceSet>& shapes,
                                          const std::vector<Point3>& normals);

/// Outward unit normals estimated per point by a local plane fit over the k
/// nearest neighboring particles, oriented away from the shape centroid.
std::vector<Point3> estimate_normals(const CorrespondenceSet& points,
                                     std::size_t k = 8);

}  // namespace deepssm
