#pragma once

#include <Eigen/Core>

#include "deepssm/correspondence.hpp"

namespace deepssm {

/// Thin-plate-spline deformation fitted to landmark pairs, with the 3D kernel
/// φ(r) = r: f(p) = A·[1,p] + Σ_i w_i·φ(||p − s_i||), subject to the
/// polynomial side conditions Pᵀ·W = 0.
struct TpsWarp {
  Eigen::MatrixXd source;          // M × 3 landmark positions (warp domain)
  Eigen::MatrixXd kernel_weights;  // M × 3 (W)
  Eigen::MatrixXd affine;          // 4 × 3, rows are [1, x, y, z] coefficients
  double regularization = 0.0;     // λ on the kernel block

  Point3 apply(const Point3& p) const;

  /// Pᵀ·W — all-zero (≤ 1e-8) for a valid fit.
  Eigen::MatrixXd side_condition_residual() const;
};

/// Solves [K + λI, P; Pᵀ, 0]·[W; A] = [T; 0]. Throws std::invalid_argument on
/// size mismatch or M < 5, and std::runtime_error when the system is singular
/// at λ = 0 (degenerate landmarks — the message advises λ > 0).
TpsWarp fit_tps(const CorrespondenceSet& source, const CorrespondenceSet& target,
                double lambda);

/// Default stabilizing regularization: 1e-6 × mean nearest-neighbor landmark
/// spacing.
double tps_default_regularization(const CorrespondenceSet& landmarks);

}  // namespace deepssm
