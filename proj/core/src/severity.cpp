#include "deepssm/severity.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "deepssm/shape_model.hpp"

namespace deepssm {

SeverityModel fit_ppca(const std::vector<CorrespondenceSet>& controls,
                       double subspace_fraction) {
  if (controls.size() < 2)
    throw std::invalid_argument("ppca: need ≥ 2 control shapes");
  if (!(subspace_fraction > 0.0) || subspace_fraction > 1.0)
    throw std::invalid_argument("ppca: subspace fraction must be in (0, 1]");

  const PcaSpectrum spectrum = pca_spectrum(controls);
  if (!(spectrum.total_variance > 0.0))
    throw std::invalid_argument(
        "ppca: controls are all identical — covariance is zero, severity undefined");

  const auto d = static_cast<std::size_t>(spectrum.values.size());
  const auto rank = static_cast<std::size_t>(spectrum.vectors.cols());

  // Smallest L whose leading eigenvalues explain the requested fraction.
  std::size_t l = rank;
  double cumulative = 0.0;
  for (std::size_t i = 0; i < rank; ++i) {
    cumulative += spectrum.values[static_cast<Eigen::Index>(i)];
    if (cumulative >= subspace_fraction * spectrum.total_variance) {
      l = i + 1;
      break;
    }
  }
  // σ² averages the discarded spectrum; keep at least one discarded dimension.
  l = std::min(l, d - 1);
  if (l == 0) l = 1;

  double tail = 0.0;
  for (std::size_t i = l; i < d; ++i) tail += spectrum.values[static_cast<Eigen::Index>(i)];

  SeverityModel model;
  model.mean = spectrum.mean;
  model.subspace = spectrum.vectors.leftCols(static_cast<Eigen::Index>(l));
  model.lambda = spectrum.values.head(static_cast<Eigen::Index>(l));
  model.sigma2_raw = tail / static_cast<double>(d - l);
  model.subspace_fraction = subspace_fraction;

  const double floor = 1e-8 * spectrum.values[0];
  if (model.sigma2_raw < floor) {
    model.sigma2 = floor;
    model.floored = true;
  } else {
    model.sigma2 = model.sigma2_raw;
  }
  return model;
}

Eigen::VectorXd whiten(const SeverityModel& model, const Eigen::VectorXd& flat_shape) {
  if (flat_shape.size() != model.mean.size())
    throw std::invalid_argument("whiten: shape has dimension " +
                                std::to_string(flat_shape.size()) + ", model expects " +
                                std::to_string(model.mean.size()));
  const double sigma = std::sqrt(model.sigma2);
  const Eigen::VectorXd d = flat_shape - model.mean;
  const Eigen::VectorXd t = model.subspace.transpose() * d;  // U_Lᵀ d
  // U_S Λ_S^{−1/2} U_Sᵀ d  =  U_L[(Λ_L+σ²)^{−1/2} − σ^{−1}] U_Lᵀ d + d/σ:
  // the orthogonal complement of U_L is whitened uniformly by 1/σ.
  Eigen::VectorXd scaled = t;
  for (Eigen::Index i = 0; i < t.size(); ++i)
    scaled[i] *= 1.0 / std::sqrt(model.lambda[i] + model.sigma2) - 1.0 / sigma;
  return model.subspace * scaled + d / sigma;
}

Eigen::VectorXd whiten(const SeverityModel& model, const CorrespondenceSet& shape) {
  const std::vector<double> flat = shape.flatten();
  return whiten(model, Eigen::Map<const Eigen::VectorXd>(
                           flat.data(), static_cast<Eigen::Index>(flat.size())));
}

double severity_score(const SeverityModel& model, const CorrespondenceSet& shape) {
  return whiten(model, shape).norm();
}

std::vector<double> pointwise_mahalanobis(const SeverityModel& model,
                                          const std::vector<CorrespondenceSet>& shapes,
                                          const std::vector<Point3>& normals) {
  if (shapes.empty())
    throw std::invalid_argument("pointwise mahalanobis: no shapes given");
  const std::size_t m = model.dim() / 3;
  if (normals.size() != m)
    throw std::invalid_argument("pointwise mahalanobis: " +
                                std::to_string(normals.size()) + " normals for " +
                                std::to_string(m) + " points");

  Eigen::VectorXd mean_whitened = Eigen::VectorXd::Zero(model.mean.size());
  for (const auto& shape : shapes) mean_whitened += whiten(model, shape);
  mean_whitened /= static_cast<double>(shapes.size());

  std::vector<double> field(m);
  for (std::size_t j = 0; j < m; ++j) {
    const Eigen::Index base = static_cast<Eigen::Index>(3 * j);
    field[j] = mean_whitened[base] * normals[j][0] +
               mean_whitened[base + 1] * normals[j][1] +
               mean_whitened[base + 2] * normals[j][2];
  }
  return field;
}

std::vector<Point3> estimate_normals(const CorrespondenceSet& points, std::size_t k) {
  const std::size_t m = points.size();
  if (k < 3) throw std::invalid_argument("estimate_normals: k must be ≥ 3");
  if (m < k + 1)
    throw std::invalid_argument("estimate_normals: need more points than neighbors");

  Point3 centroid{0.0, 0.0, 0.0};
  for (const Point3& p : points.points)
    for (int c = 0; c < 3; ++c) centroid[c] += p[c] / static_cast<double>(m);

  std::vector<Point3> normals(m);
  std::vector<std::pair<double, std::size_t>> dist(m);
  for (std::size_t j = 0; j < m; ++j) {
    const Point3& p = points.points[j];
    for (std::size_t i = 0; i < m; ++i) {
      double sq = 0.0;
      for (int c = 0; c < 3; ++c) {
        const double diff = points.points[i][c] - p[c];
        sq += diff * diff;
      }
      dist[i] = {sq, i};
    }
    // The k nearest neighbors plus the point itself (distance 0, ties by index).
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k + 1),
                      dist.end());

    Eigen::Vector3d local_mean = Eigen::Vector3d::Zero();
    for (std::size_t i = 0; i <= k; ++i) {
      const Point3& q = points.points[dist[i].second];
      local_mean += Eigen::Vector3d(q[0], q[1], q[2]);
    }
    local_mean /= static_cast<double>(k + 1);

    Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
    for (std::size_t i = 0; i <= k; ++i) {
      const Point3& q = points.points[dist[i].second];
      const Eigen::Vector3d v = Eigen::Vector3d(q[0], q[1], q[2]) - local_mean;
      cov += v * v.transpose();
    }

    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> solver(cov);
    Eigen::Vector3d n = solver.eigenvectors().col(0);  // smallest-spread direction
    const Eigen::Vector3d outward(p[0] - centroid[0], p[1] - centroid[1],
                                  p[2] - centroid[2]);
    if (n.dot(outward) < 0.0) n = -n;
    const double norm = n.norm();
    if (!(norm > 0.0))
      throw std::runtime_error("estimate_normals: degenerate neighborhood at point " +
                               std::to_string(j));
    normals[j] = {n[0] / norm, n[1] / norm, n[2] / norm};
  }
  return normals;
}

}  // namespace deepssm
