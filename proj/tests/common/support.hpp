#pragma once

// Shared test utilities: independent oracles (finite differences, naive
// convolutions, direct eigendecompositions, brute-force statistics) and
// harness helpers for driving the CLI binary.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "deepssm/correspondence.hpp"
#include "deepssm/rng.hpp"
#include "deepssm/severity.hpp"
#include "deepssm/synthbench.hpp"
#include "deepssm/tape.hpp"
#include "deepssm/tensor.hpp"

namespace testsupport {

// ---- random data ------------------------------------------------------------

void fill_normal(deepssm::nn::Tensor& t, deepssm::Rng& rng, double scale = 1.0);

/// n shapes of m points: a fixed base shape plus per-sample Gaussian jitter.
std::vector<deepssm::CorrespondenceSet> random_population(std::size_t n, std::size_t m,
                                                          std::uint64_t seed,
                                                          double spread = 1.0);

// ---- gradient checking --------------------------------------------------------

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

/// Central finite differences against tape gradients. `scalar_forward` must
/// rebuild the scalar loss from the current leaf values on every call (a tape
/// is passed only for the analytic pass). When `max_per_tensor` > 0, only a
/// deterministic evenly-spaced subset of each leaf's elements is probed.
GradCheck check_gradients(const std::vector<deepssm::nn::Tensor>& leaves,
                          const std::function<deepssm::nn::Tensor(deepssm::nn::Tape*)>&
                              scalar_forward,
                          double eps = 1e-5, std::size_t max_per_tensor = 0);

// ---- numeric oracles ------------------------------------------------------------

/// Six-loop direct convolution, stride 1, zero padding k/2; x is [N,Cin,D,H,W],
/// w is [Cout,Cin,k,k,k], b is [Cout].
deepssm::nn::Tensor naive_conv3d(const deepssm::nn::Tensor& x,
                                 const deepssm::nn::Tensor& w,
                                 const deepssm::nn::Tensor& b);

deepssm::nn::Tensor naive_max_pool3d(const deepssm::nn::Tensor& x, std::size_t factor);

/// Direct dense eigendecomposition of the 1/N covariance (no Gram shortcut).
struct DirectPca {
  Eigen::VectorXd mean;
  Eigen::VectorXd values;   // all D, descending
  Eigen::MatrixXd vectors;  // D × D, matching columns
  double total_variance = 0.0;
};
DirectPca direct_pca(const std::vector<deepssm::CorrespondenceSet>& population);

/// sqrt(dᵀ S⁻¹ d) with the dense S = U Λ Uᵀ + σ² I assembled explicitly and
/// solved by LDLT — the Mahalanobis oracle for whiten().
double mahalanobis_ldlt(const deepssm::SeverityModel& model,
                        const Eigen::VectorXd& flat_shape);

/// Independent full-sort percentile with the same inclusive convention.
double percentile_full_sort(std::vector<double> values, double q);

/// All-pairs AUC: P(score_pos > score_neg) + 0.5·P(tie).
double auc_all_pairs(const std::vector<double>& scores, const std::vector<int>& labels);

/// Brute-force distance to a parametric surface via a dense (θ, φ) grid.
double dense_surface_distance(const deepssm::SurfaceSpec& surface,
                              const deepssm::Point3& point, int n_theta, int n_phi);

// ---- CLI harness ------------------------------------------------------------------

/// Path of the deepssm binary from $DEEPSSM_BIN; throws when unset.
std::string cli_binary();

/// Runs a shell command with stdout/stderr appended to `log` (empty = discard);
/// returns the process exit code (or -1 if it did not exit normally).
int run_cli(const std::string& command, const std::filesystem::path& log = {});

std::filesystem::path fresh_temp_dir(const std::string& tag);

bool same_bytes(const std::filesystem::path& a, const std::filesystem::path& b);

/// Byte-compares every regular file under `a` against the same relative path
/// under `b` (both directions), skipping filenames in `exclude`. On mismatch
/// returns false and names the offending file in `diff`.
bool same_tree(const std::filesystem::path& a, const std::filesystem::path& b,
               const std::vector<std::string>& exclude, std::string* diff);

}  // namespace testsupport
