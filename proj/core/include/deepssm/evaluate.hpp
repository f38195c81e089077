#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "deepssm/correspondence.hpp"
#include "deepssm/networks.hpp"
#include "deepssm/volume.hpp"

namespace deepssm {

/// Correspondence accuracy summary. The coordinate convention follows the
/// evaluation formulas: a sample's RMSE is (RMSE_x + RMSE_y + RMSE_z)/3 with
/// RMSE_x = sqrt(||C_x − Ĉ_x||² / M); the per-point field is
/// RMSE_i = sqrt((Δx_i² + Δy_i² + Δz_i²)/3) aggregated across samples.
struct RmseReport {
  double average_rmse = 0.0;            // mean of per_sample
  std::vector<double> per_sample;       // one value per sample
  std::vector<double> per_point_mean;   // M values
  std::vector<double> per_point_std;    // M values, population convention (1/N)
};

/// Single-pair RMSE; symmetric in its arguments. Throws on point-count mismatch.
double rmse(const CorrespondenceSet& predicted, const CorrespondenceSet& truth);

/// Full report over aligned populations (same order, same point counts).
RmseReport evaluate_rmse(const std::vector<CorrespondenceSet>& predicted,
                         const std::vector<CorrespondenceSet>& truth);

/// CSV rows "sample,rmse" (one per sample, prediction ids) plus a final
/// "average" row.
void save_rmse_csv(const RmseReport& report, const std::vector<std::string>& sample_ids,
                   const std::filesystem::path& path);

struct TriangleMesh {
  std::vector<Point3> vertices;
  std::vector<std::array<std::size_t, 3>> faces;
  /// Throws on empty mesh, out-of-range indices, or zero-area triangles.
  void validate() const;
};

/// Exact unsigned distance from a point to a triangle (closest-feature cases:
/// face interior, edges, vertices).
double point_to_triangle_distance(const Point3& p, const Point3& a, const Point3& b,
                                  const Point3& c);

/// Per-point distance to the nearest triangle of the mesh.
std::vector<double> point_to_surface(const CorrespondenceSet& points,
                                     const TriangleMesh& mesh);

/// Analytic-surface variant: `unsigned_distance` returns the distance from a
/// world point to the surface (synthetic families provide this exactly).
std::vector<double> point_to_surface(
    const CorrespondenceSet& points,
    const std::function<double(const Point3&)>& unsigned_distance);

/// One-sided surface distance statistics: predicted particles against the
/// ground-truth surface, per sample.
struct SurfaceDistanceReport {
  std::vector<double> sample_mean;
  std::vector<double> sample_max;
};

SurfaceDistanceReport surface_distance_report(
    const std::vector<CorrespondenceSet>& samples, const TriangleMesh& mesh);
SurfaceDistanceReport surface_distance_report(
    const std::vector<CorrespondenceSet>& samples,
    const std::function<double(const Point3&)>& unsigned_distance);

/// Median wall-clock seconds for one single-threaded inference, measured over
/// `repetitions` runs after one unmeasured warm-up call. Excludes I/O.
double time_inference(BaseDeepSSM& model, const Volume& volume,
                      std::size_t repetitions);
double time_inference(TlDeepSSM& model, const Volume& volume,
                      std::size_t repetitions);

}  // namespace deepssm
