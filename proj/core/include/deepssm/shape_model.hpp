#pragma once

#include <Eigen/Core>

#include <filesystem>
#include <span>
#include <vector>

#include "deepssm/correspondence.hpp"

namespace deepssm {

using ScoreVector = std::vector<double>;

/// PCA factorization of a correspondence population: C ≈ U·z + C̄ with U the
/// orthonormal basis over flattened (3M-dimensional) shapes and Λ the
/// covariance eigenvalues under the 1/N convention. Immutable after fit.
struct ShapeModel {
  Eigen::VectorXd mean;         // 3M
  Eigen::MatrixXd basis;        // 3M × L, columns orthonormal, Λ non-increasing
  Eigen::VectorXd eigenvalues;  // L, all ≥ 0
  double total_variance = 0.0;  // trace of the covariance (all D eigenvalues)

  std::size_t dim() const { return static_cast<std::size_t>(mean.size()); }
  std::size_t num_modes() const { return static_cast<std::size_t>(basis.cols()); }
  std::size_t num_points() const { return dim() / 3; }
};

/// Full eigendecomposition of the 1/N covariance: `values` holds all D
/// eigenvalues (descending, zeros appended past the computed rank), `vectors`
/// the matching leading columns. Shared between PCA fitting and PPCA.
struct PcaSpectrum {
  Eigen::VectorXd mean;     // D
  Eigen::MatrixXd vectors;  // D × R (columns for the leading R eigenvalues)
  Eigen::VectorXd values;   // D
  double total_variance = 0.0;
};

PcaSpectrum pca_spectrum(const std::vector<CorrespondenceSet>& population);

/// Fit with num_modes = L ≤ N−1. Uses the N×N Gram matrix (dual PCA) when
/// 3M > N; deficient modes (zero eigenvalues beyond the data rank) get a
/// deterministic orthonormal completion so the basis invariants always hold.
ShapeModel fit_pca(const std::vector<CorrespondenceSet>& population,
                   std::size_t num_modes);

/// Z = Uᵀ(C − C̄)
ScoreVector project(const ShapeModel& model, const CorrespondenceSet& shape);

/// C = U·z + C̄
CorrespondenceSet reconstruct(const ShapeModel& model, std::span<const double> z);

/// Fraction of total data variance captured by the first k retained modes.
double variance_explained(const ShapeModel& model, std::size_t k);

void save_shape_model(const ShapeModel& model, const std::filesystem::path& path);
ShapeModel load_shape_model(const std::filesystem::path& path);

}  // namespace deepssm
