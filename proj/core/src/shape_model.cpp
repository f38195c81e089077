#include "deepssm/shape_model.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <stdexcept>

#include "deepssm/checkpoint.hpp"

namespace deepssm {

namespace {

/// Flip each column so its entry of largest magnitude is positive (first such
/// entry on ties), making eigenvector signs reproducible across solvers.
void fix_column_signs(Eigen::MatrixXd& m) {
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    Eigen::Index at = 0;
    m.col(c).cwiseAbs().maxCoeff(&at);
    if (m(at, c) < 0.0) m.col(c) = -m.col(c);
  }
}

/// Append deterministic orthonormal columns (Gram-Schmidt over the canonical
/// basis) until `m` has `target` columns. Used when a population has fewer
/// nonzero covariance modes than the caller requested.
void complete_orthonormal(Eigen::MatrixXd& m, Eigen::Index target) {
  const Eigen::Index d = m.rows();
  Eigen::Index have = m.cols();
  if (have >= target) return;
  m.conservativeResize(Eigen::NoChange, target);
  for (Eigen::Index e = 0; e < d && have < target; ++e) {
    Eigen::VectorXd v = Eigen::VectorXd::Unit(d, e);
    v -= m.leftCols(have) * (m.leftCols(have).transpose() * v);
    const double norm = v.norm();
    if (norm < 0.5) continue;  // canonical axis (nearly) inside the span
    m.col(have) = v / norm;
    ++have;
  }
  if (have < target)
    throw std::logic_error("pca: failed to complete an orthonormal basis");
  fix_column_signs(m);
}

Eigen::MatrixXd flatten_population(const std::vector<CorrespondenceSet>& population) {
  check_consistent_sizes(population);
  const std::size_t d = population.front().size() * 3;
  Eigen::MatrixXd x(d, population.size());
  for (std::size_t n = 0; n < population.size(); ++n) {
    population[n].check_finite();
    const std::vector<double> flat = population[n].flatten();
    x.col(static_cast<Eigen::Index>(n)) =
        Eigen::Map<const Eigen::VectorXd>(flat.data(), static_cast<Eigen::Index>(d));
  }
  return x;
}

}  // namespace

PcaSpectrum pca_spectrum(const std::vector<CorrespondenceSet>& population) {
  if (population.size() < 2)
    throw std::invalid_argument("pca: need at least 2 samples, got " +
                                std::to_string(population.size()));
  Eigen::MatrixXd x = flatten_population(population);
  const Eigen::Index d = x.rows();
  const Eigen::Index n = x.cols();
  const double inv_n = 1.0 / static_cast<double>(n);

  PcaSpectrum spec;
  spec.mean = x.rowwise().mean();
  x.colwise() -= spec.mean;
  spec.total_variance = x.squaredNorm() * inv_n;

  spec.values = Eigen::VectorXd::Zero(d);
  if (d > n) {
    // Dual route: the N×N Gram matrix shares the covariance's nonzero
    // spectrum; u_i = X·v_i / sqrt(N·λ_i) recovers the D-space eigenvectors.
    Eigen::MatrixXd gram = (x.transpose() * x) * inv_n;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(gram);
    if (solver.info() != Eigen::Success)
      throw std::runtime_error("pca: Gram eigendecomposition failed");
    // SelfAdjointEigenSolver sorts ascending; walk backwards for descending.
    const double lambda_max = std::max(0.0, solver.eigenvalues()(n - 1));
    const double tol = lambda_max * 1e-12;
    std::vector<Eigen::Index> keep;
    for (Eigen::Index i = n - 1; i >= 0; --i) {
      const double lambda = solver.eigenvalues()(i);
      spec.values(n - 1 - i) = std::max(0.0, lambda);
      if (lambda > tol && lambda > 0.0) keep.push_back(i);
    }
    spec.vectors.resize(d, static_cast<Eigen::Index>(keep.size()));
    for (std::size_t c = 0; c < keep.size(); ++c) {
      const double lambda = solver.eigenvalues()(keep[c]);
      spec.vectors.col(static_cast<Eigen::Index>(c)) =
          x * solver.eigenvectors().col(keep[c]) /
          std::sqrt(static_cast<double>(n) * lambda);
    }
  } else {
    Eigen::MatrixXd cov = (x * x.transpose()) * inv_n;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
    if (solver.info() != Eigen::Success)
      throw std::runtime_error("pca: covariance eigendecomposition failed");
    spec.vectors.resize(d, d);
    for (Eigen::Index i = 0; i < d; ++i) {
      spec.values(i) = std::max(0.0, solver.eigenvalues()(d - 1 - i));
      spec.vectors.col(i) = solver.eigenvectors().col(d - 1 - i);
    }
  }
  fix_column_signs(spec.vectors);
  return spec;
}

ShapeModel fit_pca(const std::vector<CorrespondenceSet>& population,
                   std::size_t num_modes) {
  if (population.size() < 2)
    throw std::invalid_argument("pca: need at least 2 samples");
  if (num_modes == 0)
    throw std::invalid_argument("pca: num_modes must be ≥ 1");
  if (num_modes > population.size() - 1)
    throw std::invalid_argument("pca: num_modes " + std::to_string(num_modes) +
                                " exceeds N−1 = " +
                                std::to_string(population.size() - 1));

  PcaSpectrum spec = pca_spectrum(population);
  const auto l = static_cast<Eigen::Index>(num_modes);

  ShapeModel model;
  model.mean = std::move(spec.mean);
  model.eigenvalues = spec.values.head(l);
  model.total_variance = spec.total_variance;
  if (spec.vectors.cols() >= l) {
    model.basis = spec.vectors.leftCols(l);
  } else {
    model.basis = spec.vectors;
    complete_orthonormal(model.basis, l);
  }
  return model;
}

ScoreVector project(const ShapeModel& model, const CorrespondenceSet& shape) {
  if (shape.size() * 3 != model.dim())
    throw std::invalid_argument("pca: shape has " + std::to_string(shape.size()) +
                                " points, model expects " +
                                std::to_string(model.num_points()));
  const std::vector<double> flat = shape.flatten();
  const Eigen::Map<const Eigen::VectorXd> c(flat.data(),
                                            static_cast<Eigen::Index>(flat.size()));
  Eigen::VectorXd z = model.basis.transpose() * (c - model.mean);
  return {z.data(), z.data() + z.size()};
}

CorrespondenceSet reconstruct(const ShapeModel& model, std::span<const double> z) {
  if (z.size() != model.num_modes())
    throw std::invalid_argument("pca: score length " + std::to_string(z.size()) +
                                " does not match " + std::to_string(model.num_modes()) +
                                " modes");
  const Eigen::Map<const Eigen::VectorXd> zv(z.data(),
                                             static_cast<Eigen::Index>(z.size()));
  Eigen::VectorXd c = model.basis * zv + model.mean;
  return CorrespondenceSet::from_flat({c.data(), static_cast<std::size_t>(c.size())});
}

double variance_explained(const ShapeModel& model, std::size_t k) {
  if (k < 1 || k > model.num_modes())
    throw std::invalid_argument("pca: k = " + std::to_string(k) +
                                " outside [1, " + std::to_string(model.num_modes()) + "]");
  if (model.total_variance <= 0.0) return 1.0;  // identical shapes: nothing to explain
  return model.eigenvalues.head(static_cast<Eigen::Index>(k)).sum() /
         model.total_variance;
}

void save_shape_model(const ShapeModel& model, const std::filesystem::path& path) {
  using nn::Tensor;
  nn::Checkpoint ckpt;
  ckpt.meta_str["kind"] = "shape_model";
  ckpt.meta_num["dim"] = static_cast<double>(model.dim());
  ckpt.meta_num["num_modes"] = static_cast<double>(model.num_modes());
  ckpt.meta_num["total_variance"] = model.total_variance;
  auto& sec = ckpt.add_section("shape_model");
  const std::size_t d = model.dim(), l = model.num_modes();
  Tensor mean({d}, std::vector<double>(model.mean.data(), model.mean.data() + d));
  // Row-major flattening of the (column-major) basis.
  Tensor basis({d, l});
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < l; ++j)
      basis[i * l + j] = model.basis(static_cast<Eigen::Index>(i),
                                     static_cast<Eigen::Index>(j));
  Tensor eig({l}, std::vector<double>(model.eigenvalues.data(),
                                      model.eigenvalues.data() + l));
  sec.tensors.push_back({"mean", std::move(mean)});
  sec.tensors.push_back({"basis", std::move(basis)});
  sec.tensors.push_back({"eigenvalues", std::move(eig)});
  ckpt.save(path);
}

ShapeModel load_shape_model(const std::filesystem::path& path) {
  nn::Checkpoint ckpt = nn::Checkpoint::load(path);
  if (ckpt.meta_string("kind") != "shape_model")
    throw std::runtime_error("shape model: " + path.string() +
                             " is not a shape-model file");
  const auto* sec = ckpt.find_section("shape_model");
  if (!sec || sec->tensors.size() != 3)
    throw std::runtime_error("shape model: malformed file " + path.string());
  const nn::Tensor& mean = sec->tensors[0].tensor;
  const nn::Tensor& basis = sec->tensors[1].tensor;
  const nn::Tensor& eig = sec->tensors[2].tensor;
  const std::size_t d = mean.size(), l = eig.size();
  if (basis.shape() != nn::Shape{d, l})
    throw std::runtime_error("shape model: inconsistent shapes in " + path.string());

  ShapeModel model;
  model.mean = Eigen::Map<const Eigen::VectorXd>(mean.data(),
                                                 static_cast<Eigen::Index>(d));
  model.basis.resize(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(l));
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < l; ++j)
      model.basis(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          basis[i * l + j];
  model.eigenvalues = Eigen::Map<const Eigen::VectorXd>(eig.data(),
                                                        static_cast<Eigen::Index>(l));
  model.total_variance = ckpt.meta("total_variance");
  return model;
}

}  // namespace deepssm
