#include "deepssm/tps.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <stdexcept>

namespace deepssm {

Point3 TpsWarp::apply(const Point3& p) const {
  const Eigen::Index m = source.rows();
  Eigen::RowVector3d out =
      affine.row(0) + p[0] * affine.row(1) + p[1] * affine.row(2) + p[2] * affine.row(3);
  for (Eigen::Index i = 0; i < m; ++i) {
    const double dx = p[0] - source(i, 0);
    const double dy = p[1] - source(i, 1);
    const double dz = p[2] - source(i, 2);
    const double r = std::sqrt(dx * dx + dy * dy + dz * dz);
    out += r * kernel_weights.row(i);
  }
  return {out(0), out(1), out(2)};
}

Eigen::MatrixXd TpsWarp::side_condition_residual() const {
  const Eigen::Index m = source.rows();
  Eigen::MatrixXd p(m, 4);
  p.col(0).setOnes();
  p.rightCols(3) = source;
  return p.transpose() * kernel_weights;  // 4 × 3
}

TpsWarp fit_tps(const CorrespondenceSet& source, const CorrespondenceSet& target,
                double lambda) {
  if (source.size() != target.size())
    throw std::invalid_argument("tps: " + std::to_string(source.size()) +
                                " source vs " + std::to_string(target.size()) +
                                " target landmarks");
  const std::size_t m = source.size();
  if (m < 5)
    throw std::invalid_argument("tps: need ≥ 5 landmarks, got " + std::to_string(m));
  if (lambda < 0.0) throw std::invalid_argument("tps: λ must be ≥ 0");
  source.check_finite();
  target.check_finite();

  const auto mi = static_cast<Eigen::Index>(m);
  Eigen::MatrixXd s(mi, 3), t(mi, 3);
  for (std::size_t i = 0; i < m; ++i)
    for (int j = 0; j < 3; ++j) {
      s(static_cast<Eigen::Index>(i), j) = source.points[i][static_cast<std::size_t>(j)];
      t(static_cast<Eigen::Index>(i), j) = target.points[i][static_cast<std::size_t>(j)];
    }

  Eigen::MatrixXd sys = Eigen::MatrixXd::Zero(mi + 4, mi + 4);
  for (Eigen::Index i = 0; i < mi; ++i) {
    for (Eigen::Index j = i + 1; j < mi; ++j) {
      const double r = (s.row(i) - s.row(j)).norm();
      sys(i, j) = r;
      sys(j, i) = r;
    }
    sys(i, i) = lambda;
    sys(i, mi) = 1.0;
    sys(mi, i) = 1.0;
    sys.block(i, mi + 1, 1, 3) = s.row(i);
    sys.block(mi + 1, i, 3, 1) = s.row(i).transpose();
  }

  Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(mi + 4, 3);
  rhs.topRows(mi) = t;

  Eigen::FullPivLU<Eigen::MatrixXd> lu(sys);
  if (!lu.isInvertible()) {
    throw std::runtime_error(
        "tps: singular system — landmarks are degenerate (coplanar/coincident); "
        "retry with regularization λ > 0");
  }
  Eigen::MatrixXd solution = lu.solve(rhs);

  TpsWarp warp;
  warp.source = std::move(s);
  warp.kernel_weights = solution.topRows(mi);
  warp.affine = solution.bottomRows(4);
  warp.regularization = lambda;
  return warp;
}

double tps_default_regularization(const CorrespondenceSet& landmarks) {
  const std::size_t m = landmarks.size();
  if (m < 2) throw std::invalid_argument("tps: need ≥ 2 landmarks for a spacing scale");
  double sum_nn = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m; ++j) {
      if (i == j) continue;
      const double dx = landmarks.points[i][0] - landmarks.points[j][0];
      const double dy = landmarks.points[i][1] - landmarks.points[j][1];
      const double dz = landmarks.points[i][2] - landmarks.points[j][2];
      best = std::min(best, dx * dx + dy * dy + dz * dz);
    }
    sum_nn += std::sqrt(best);
  }
  return 1e-6 * (sum_nn / static_cast<double>(m));
}

}  // namespace deepssm
