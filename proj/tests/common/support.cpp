#include "support.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace testsupport {

using deepssm::CorrespondenceSet;
using deepssm::Point3;
using deepssm::Rng;
using deepssm::nn::Tape;
using deepssm::nn::Tensor;

void fill_normal(Tensor& t, Rng& rng, double scale) {
  for (double& v : t.values()) v = scale * rng.normal();
}

std::vector<CorrespondenceSet> random_population(std::size_t n, std::size_t m,
                                                 std::uint64_t seed, double spread) {
  Rng rng(seed);
  std::vector<Point3> base(m);
  for (Point3& p : base) p = {10.0 * rng.normal(), 10.0 * rng.normal(), 10.0 * rng.normal()};
  std::vector<CorrespondenceSet> population(n);
  for (std::size_t i = 0; i < n; ++i) {
    population[i].sample_id = "s" + std::to_string(i);
    population[i].points.resize(m);
    for (std::size_t j = 0; j < m; ++j) {
      population[i].points[j] = {base[j][0] + spread * rng.normal(),
                                 base[j][1] + spread * rng.normal(),
                                 base[j][2] + spread * rng.normal()};
    }
  }
  return population;
}

GradCheck check_gradients(const std::vector<Tensor>& leaves,
                          const std::function<Tensor(Tape*)>& scalar_forward,
                          double eps, std::size_t max_per_tensor) {
  // Analytic pass.
  for (const Tensor& leaf : leaves) {
    Tensor handle = leaf;
    handle.zero_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Tensor loss = scalar_forward(&tape);
    if (loss.size() != 1) throw std::logic_error("check_gradients: loss is not scalar");
    tape.backward(loss);
    for (const Tensor& leaf : leaves) {
      Tensor handle = leaf;
      std::span<double> g = handle.grad();
      analytic.emplace_back(g.begin(), g.end());
    }
  }

  GradCheck result;
  for (std::size_t t = 0; t < leaves.size(); ++t) {
    Tensor leaf = leaves[t];
    const std::size_t count = leaf.size();
    const std::size_t probes =
        (max_per_tensor == 0 || max_per_tensor >= count) ? count : max_per_tensor;
    const std::size_t stride = std::max<std::size_t>(1, count / probes);
    for (std::size_t p = 0; p < probes; ++p) {
      const std::size_t i = std::min(count - 1, p * stride);
      const double saved = leaf[i];
      leaf[i] = saved + eps;
      const double f_plus = scalar_forward(nullptr).item();
      leaf[i] = saved - eps;
      const double f_minus = scalar_forward(nullptr).item();
      leaf[i] = saved;
      const double fd = (f_plus - f_minus) / (2.0 * eps);
      const double a = analytic[t][i];
      const double rel = std::abs(a - fd) / std::max({1e-6, std::abs(a), std::abs(fd)});
      result.max_rel_error = std::max(result.max_rel_error, rel);
      ++result.checked;
    }
  }
  return result;
}

Tensor naive_conv3d(const Tensor& x, const Tensor& w, const Tensor& b) {
  const std::size_t n = x.dim(0), cin = x.dim(1), d = x.dim(2), h = x.dim(3),
                    wd = x.dim(4);
  const std::size_t cout = w.dim(0), k = w.dim(2);
  const auto pad = static_cast<long long>(k / 2);
  Tensor y({n, cout, d, h, wd});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t co = 0; co < cout; ++co)
      for (std::size_t z = 0; z < d; ++z)
        for (std::size_t yy = 0; yy < h; ++yy)
          for (std::size_t xx = 0; xx < wd; ++xx) {
            double acc = b[co];
            for (std::size_t ci = 0; ci < cin; ++ci)
              for (std::size_t kz = 0; kz < k; ++kz)
                for (std::size_t ky = 0; ky < k; ++ky)
                  for (std::size_t kx = 0; kx < k; ++kx) {
                    const long long sz = static_cast<long long>(z) + static_cast<long long>(kz) - pad;
                    const long long sy = static_cast<long long>(yy) + static_cast<long long>(ky) - pad;
                    const long long sx = static_cast<long long>(xx) + static_cast<long long>(kx) - pad;
                    if (sz < 0 || sy < 0 || sx < 0 || sz >= static_cast<long long>(d) ||
                        sy >= static_cast<long long>(h) || sx >= static_cast<long long>(wd))
                      continue;
                    const std::size_t xi =
                        ((i * cin + ci) * d + static_cast<std::size_t>(sz)) * h * wd +
                        static_cast<std::size_t>(sy) * wd + static_cast<std::size_t>(sx);
                    const std::size_t wi = (((co * cin + ci) * k + kz) * k + ky) * k + kx;
                    acc += x[xi] * w[wi];
                  }
            const std::size_t yi =
                ((i * cout + co) * d + z) * h * wd + yy * wd + xx;
            y[yi] = acc;
          }
  return y;
}

Tensor naive_max_pool3d(const Tensor& x, std::size_t factor) {
  const std::size_t n = x.dim(0), c = x.dim(1), d = x.dim(2), h = x.dim(3),
                    wd = x.dim(4);
  const std::size_t od = d / factor, oh = h / factor, ow = wd / factor;
  Tensor y({n, c, od, oh, ow});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t z = 0; z < od; ++z)
        for (std::size_t yy = 0; yy < oh; ++yy)
          for (std::size_t xx = 0; xx < ow; ++xx) {
            double best = -std::numeric_limits<double>::infinity();
            for (std::size_t kz = 0; kz < factor; ++kz)
              for (std::size_t ky = 0; ky < factor; ++ky)
                for (std::size_t kx = 0; kx < factor; ++kx) {
                  const std::size_t xi =
                      ((i * c + ch) * d + z * factor + kz) * h * wd +
                      (yy * factor + ky) * wd + (xx * factor + kx);
                  best = std::max(best, x[xi]);
                }
            y[((i * c + ch) * od + z) * oh * ow + yy * ow + xx] = best;
          }
  return y;
}

DirectPca direct_pca(const std::vector<CorrespondenceSet>& population) {
  const std::size_t n = population.size();
  const std::size_t d = population.front().size() * 3;
  Eigen::MatrixXd rows(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < n; ++i) {
    const std::vector<double> flat = population[i].flatten();
    for (std::size_t j = 0; j < d; ++j) {
      rows(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = flat[j];
    }
  }
  DirectPca out;
  out.mean = rows.colwise().mean();
  const Eigen::MatrixXd centered = rows.rowwise() - out.mean.transpose();
  const Eigen::MatrixXd cov =
      centered.transpose() * centered / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) {
    throw std::runtime_error("direct_pca: eigendecomposition failed");
  }
  // Ascending from Eigen — reverse to descending.
  const Eigen::Index dim = cov.rows();
  out.values.resize(dim);
  out.vectors.resize(dim, dim);
  for (Eigen::Index i = 0; i < dim; ++i) {
    out.values[i] = std::max(0.0, solver.eigenvalues()[dim - 1 - i]);
    out.vectors.col(i) = solver.eigenvectors().col(dim - 1 - i);
  }
  out.total_variance = cov.trace();
  return out;
}

double mahalanobis_ldlt(const deepssm::SeverityModel& model,
                        const Eigen::VectorXd& flat_shape) {
  const Eigen::Index d = model.mean.size();
  Eigen::MatrixXd s =
      model.subspace * model.lambda.asDiagonal() * model.subspace.transpose();
  s += model.sigma2 * Eigen::MatrixXd::Identity(d, d);
  const Eigen::VectorXd dev = flat_shape - model.mean;
  const Eigen::VectorXd solved = s.ldlt().solve(dev);
  return std::sqrt(dev.dot(solved));
}

double percentile_full_sort(std::vector<double> values, double q) {
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = static_cast<std::size_t>(std::ceil(pos));
  const double frac = pos - std::floor(pos);
  return values[lo] * (1.0 - frac) + values[hi] * frac;
}

double auc_all_pairs(const std::vector<double>& scores, const std::vector<int>& labels) {
  double wins = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      ++pairs;
      if (scores[i] > scores[j]) wins += 1.0;
      else if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  if (pairs == 0) throw std::invalid_argument("auc_all_pairs: need both classes");
  return wins / static_cast<double>(pairs);
}

double dense_surface_distance(const deepssm::SurfaceSpec& surface, const Point3& point,
                              int n_theta, int n_phi) {
  constexpr double kPi = std::numbers::pi;
  double best_sq = std::numeric_limits<double>::infinity();
  for (int i = 0; i < n_theta; ++i) {
    const double theta = 2.0 * kPi * (i + 0.5) / n_theta;
    for (int j = 0; j < n_phi; ++j) {
      const double phi = -0.5 * kPi + kPi * (j + 0.5) / n_phi;
      const Point3 q = deepssm::parametric_point(surface, theta, phi);
      const double dx = q[0] - point[0];
      const double dy = q[1] - point[1];
      const double dz = q[2] - point[2];
      best_sq = std::min(best_sq, dx * dx + dy * dy + dz * dz);
    }
  }
  return std::sqrt(best_sq);
}

std::string cli_binary() {
  const char* bin = std::getenv("DEEPSSM_BIN");
  if (bin == nullptr || *bin == '\0') {
    throw std::runtime_error("DEEPSSM_BIN is not set — point it at the deepssm binary");
  }
  return bin;
}

int run_cli(const std::string& command, const std::filesystem::path& log) {
  std::string full = command;
  if (log.empty()) {
    full += " > /dev/null 2>&1";
  } else {
    full += " >> '" + log.string() + "' 2>&1";
  }
  const int status = std::system(full.c_str());
  if (status == -1) return -1;
#ifdef WIFEXITED
  if (WIFEXITED(status)) return WEXITSTATUS(status);
  return -1;
#else
  return status;
#endif
}

std::filesystem::path fresh_temp_dir(const std::string& tag) {
  static std::uint64_t counter = 0;
  const std::filesystem::path dir = std::filesystem::temp_directory_path() /
                                    ("deepssm_test_" + tag + "_" +
                                     std::to_string(::getpid()) + "_" +
                                     std::to_string(counter++));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

bool same_bytes(const std::filesystem::path& a, const std::filesystem::path& b) {
  std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
  if (!fa || !fb) return false;
  std::string da((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
  std::string db((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
  return da == db;
}

bool same_tree(const std::filesystem::path& a, const std::filesystem::path& b,
               const std::vector<std::string>& exclude, std::string* diff) {
  const auto excluded = [&](const std::filesystem::path& p) {
    return std::find(exclude.begin(), exclude.end(), p.filename().string()) !=
           exclude.end();
  };
  for (int direction = 0; direction < 2; ++direction) {
    const std::filesystem::path& lhs = direction == 0 ? a : b;
    const std::filesystem::path& rhs = direction == 0 ? b : a;
    for (const auto& entry : std::filesystem::recursive_directory_iterator(lhs)) {
      if (!entry.is_regular_file() || excluded(entry.path())) continue;
      const std::filesystem::path rel = std::filesystem::relative(entry.path(), lhs);
      const std::filesystem::path other = rhs / rel;
      if (!std::filesystem::exists(other) ||
          (direction == 0 && !same_bytes(entry.path(), other))) {
        if (diff != nullptr) *diff = rel.string();
        return false;
      }
    }
  }
  return true;
}

}  // namespace testsupport
