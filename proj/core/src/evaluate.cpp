#include "deepssm/evaluate.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>

#include "deepssm/ops.hpp"

namespace deepssm {

namespace {

void check_aligned(const std::vector<CorrespondenceSet>& predicted,
                   const std::vector<CorrespondenceSet>& truth) {
  if (predicted.empty())
    throw std::invalid_argument("evaluate: empty prediction set");
  if (predicted.size() != truth.size())
    throw std::invalid_argument("evaluate: " + std::to_string(predicted.size()) +
                                " predictions vs " + std::to_string(truth.size()) +
                                " ground-truth samples");
  for (std::size_t i = 0; i < predicted.size(); ++i)
    if (predicted[i].size() != truth[i].size())
      throw std::invalid_argument("evaluate: sample " + std::to_string(i) +
                                  " point counts differ (" +
                                  std::to_string(predicted[i].size()) + " vs " +
                                  std::to_string(truth[i].size()) + ")");
}

double vec_dot(const Point3& u, const Point3& v) {
  return u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
}

Point3 vec_sub(const Point3& u, const Point3& v) {
  return {u[0] - v[0], u[1] - v[1], u[2] - v[2]};
}

Point3 vec_cross(const Point3& u, const Point3& v) {
  return {u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2],
          u[0] * v[1] - u[1] * v[0]};
}

double vec_norm(const Point3& u) { return std::sqrt(vec_dot(u, u)); }

}  // namespace

double rmse(const CorrespondenceSet& predicted, const CorrespondenceSet& truth) {
  const std::size_t m = predicted.size();
  if (m == 0) throw std::invalid_argument("rmse: empty correspondence set");
  if (truth.size() != m)
    throw std::invalid_argument("rmse: point counts differ (" + std::to_string(m) +
                                " vs " + std::to_string(truth.size()) + ")");
  double sq[3] = {0.0, 0.0, 0.0};
  for (std::size_t j = 0; j < m; ++j)
    for (int k = 0; k < 3; ++k) {
      const double d = predicted.points[j][k] - truth.points[j][k];
      sq[k] += d * d;
    }
  double total = 0.0;
  for (double s : sq) total += std::sqrt(s / static_cast<double>(m));
  return total / 3.0;
}

RmseReport evaluate_rmse(const std::vector<CorrespondenceSet>& predicted,
                         const std::vector<CorrespondenceSet>& truth) {
  check_aligned(predicted, truth);
  const std::size_t n = predicted.size();
  const std::size_t m = predicted.front().size();
  for (const auto& p : predicted)
    if (p.size() != m)
      throw std::invalid_argument("evaluate: inconsistent point counts");

  RmseReport report;
  report.per_sample.reserve(n);
  // point_rmse[s][j] = RMSE_i of point j in sample s
  std::vector<std::vector<double>> point_rmse(n, std::vector<double>(m));
  for (std::size_t s = 0; s < n; ++s) {
    report.per_sample.push_back(rmse(predicted[s], truth[s]));
    for (std::size_t j = 0; j < m; ++j) {
      const Point3 d = vec_sub(predicted[s].points[j], truth[s].points[j]);
      point_rmse[s][j] = std::sqrt(vec_dot(d, d) / 3.0);
    }
  }
  double total = 0.0;
  for (double v : report.per_sample) total += v;
  report.average_rmse = total / static_cast<double>(n);

  report.per_point_mean.assign(m, 0.0);
  report.per_point_std.assign(m, 0.0);
  for (std::size_t j = 0; j < m; ++j) {
    double mean = 0.0;
    for (std::size_t s = 0; s < n; ++s) mean += point_rmse[s][j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      const double d = point_rmse[s][j] - mean;
      var += d * d;
    }
    report.per_point_mean[j] = mean;
    report.per_point_std[j] = std::sqrt(var / static_cast<double>(n));
  }
  return report;
}

void save_rmse_csv(const RmseReport& report, const std::vector<std::string>& sample_ids,
                   const std::filesystem::path& path) {
  if (sample_ids.size() != report.per_sample.size())
    throw std::invalid_argument("save_rmse_csv: id/sample count mismatch");
  std::FILE* f = std::fopen(path.string().c_str(), "wb");
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  std::fputs("sample,rmse\n", f);
  for (std::size_t i = 0; i < sample_ids.size(); ++i)
    std::fprintf(f, "%s,%.17g\n", sample_ids[i].c_str(), report.per_sample[i]);
  std::fprintf(f, "average,%.17g\n", report.average_rmse);
  if (std::fclose(f) != 0)
    throw std::runtime_error("failed writing " + path.string());
}

void TriangleMesh::validate() const {
  if (vertices.empty() || faces.empty())
    throw std::invalid_argument("mesh: empty vertex or face list");
  for (const auto& face : faces) {
    for (std::size_t idx : face)
      if (idx >= vertices.size())
        throw std::invalid_argument("mesh: face index out of range");
    const Point3 ab = vec_sub(vertices[face[1]], vertices[face[0]]);
    const Point3 ac = vec_sub(vertices[face[2]], vertices[face[0]]);
    if (vec_norm(vec_cross(ab, ac)) <= 0.0)
      throw std::invalid_argument("mesh: degenerate (zero-area) triangle");
  }
}

double point_to_triangle_distance(const Point3& p, const Point3& a, const Point3& b,
                                  const Point3& c) {
  // Closest point on a triangle via Voronoi-region classification
  // (Ericson, "Real-Time Collision Detection", §5.1.5).
  const Point3 ab = vec_sub(b, a);
  const Point3 ac = vec_sub(c, a);
  const Point3 ap = vec_sub(p, a);

  const double d1 = vec_dot(ab, ap);
  const double d2 = vec_dot(ac, ap);
  if (d1 <= 0.0 && d2 <= 0.0) return vec_norm(ap);  // vertex a

  const Point3 bp = vec_sub(p, b);
  const double d3 = vec_dot(ab, bp);
  const double d4 = vec_dot(ac, bp);
  if (d3 >= 0.0 && d4 <= d3) return vec_norm(bp);  // vertex b

  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) {  // edge ab
    const double v = d1 / (d1 - d3);
    const Point3 q = {a[0] + v * ab[0], a[1] + v * ab[1], a[2] + v * ab[2]};
    return vec_norm(vec_sub(p, q));
  }

  const Point3 cp = vec_sub(p, c);
  const double d5 = vec_dot(ab, cp);
  const double d6 = vec_dot(ac, cp);
  if (d6 >= 0.0 && d5 <= d6) return vec_norm(cp);  // vertex c

  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) {  // edge ac
    const double w = d2 / (d2 - d6);
    const Point3 q = {a[0] + w * ac[0], a[1] + w * ac[1], a[2] + w * ac[2]};
    return vec_norm(vec_sub(p, q));
  }

  const double va = d3 * d6 - d5 * d4;
  if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0) {  // edge bc
    const double w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
    const Point3 bc = vec_sub(c, b);
    const Point3 q = {b[0] + w * bc[0], b[1] + w * bc[1], b[2] + w * bc[2]};
    return vec_norm(vec_sub(p, q));
  }

  // interior: project onto the triangle plane
  const double denom = 1.0 / (va + vb + vc);
  const double v = vb * denom;
  const double w = vc * denom;
  const Point3 q = {a[0] + v * ab[0] + w * ac[0], a[1] + v * ab[1] + w * ac[1],
                    a[2] + v * ab[2] + w * ac[2]};
  return vec_norm(vec_sub(p, q));
}

std::vector<double> point_to_surface(const CorrespondenceSet& points,
                                     const TriangleMesh& mesh) {
  mesh.validate();
  std::vector<double> distances;
  distances.reserve(points.size());
  for (const Point3& p : points.points) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& face : mesh.faces)
      best = std::min(best, point_to_triangle_distance(p, mesh.vertices[face[0]],
                                                       mesh.vertices[face[1]],
                                                       mesh.vertices[face[2]]));
    distances.push_back(best);
  }
  return distances;
}

std::vector<double> point_to_surface(
    const CorrespondenceSet& points,
    const std::function<double(const Point3&)>& unsigned_distance) {
  if (!unsigned_distance)
    throw std::invalid_argument("point_to_surface: null distance function");
  std::vector<double> distances;
  distances.reserve(points.size());
  for (const Point3& p : points.points) {
    const double d = unsigned_distance(p);
    if (!std::isfinite(d) || d < 0.0)
      throw std::runtime_error("point_to_surface: surface distance returned " +
                               std::to_string(d));
    distances.push_back(d);
  }
  return distances;
}

namespace {

template <typename DistanceFn>
SurfaceDistanceReport build_surface_report(const std::vector<CorrespondenceSet>& samples,
                                           DistanceFn&& per_sample) {
  if (samples.empty())
    throw std::invalid_argument("surface report: empty sample list");
  SurfaceDistanceReport report;
  for (const auto& sample : samples) {
    const std::vector<double> d = per_sample(sample);
    if (d.empty()) throw std::invalid_argument("surface report: empty point set");
    double total = 0.0, maxv = 0.0;
    for (double v : d) {
      total += v;
      maxv = std::max(maxv, v);
    }
    report.sample_mean.push_back(total / static_cast<double>(d.size()));
    report.sample_max.push_back(maxv);
  }
  return report;
}

template <typename Model>
double median_inference_seconds(Model& model, const Volume& volume,
                                std::size_t repetitions) {
  if (repetitions == 0)
    throw std::invalid_argument("time_inference: repetitions must be ≥ 1");
  const std::size_t saved_threads = nn::compute_threads();
  nn::set_compute_threads(1);
  model.infer(volume);  // warm-up, unmeasured
  std::vector<double> seconds;
  seconds.reserve(repetitions);
  for (std::size_t i = 0; i < repetitions; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    model.infer(volume);
    const auto t1 = std::chrono::steady_clock::now();
    seconds.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  nn::set_compute_threads(saved_threads);
  std::sort(seconds.begin(), seconds.end());
  const std::size_t mid = repetitions / 2;
  if (repetitions % 2 == 1) return seconds[mid];
  return 0.5 * (seconds[mid - 1] + seconds[mid]);
}

}  // namespace

SurfaceDistanceReport surface_distance_report(
    const std::vector<CorrespondenceSet>& samples, const TriangleMesh& mesh) {
  mesh.validate();
  return build_surface_report(
      samples, [&mesh](const CorrespondenceSet& s) { return point_to_surface(s, mesh); });
}

SurfaceDistanceReport surface_distance_report(
    const std::vector<CorrespondenceSet>& samples,
    const std::function<double(const Point3&)>& unsigned_distance) {
  return build_surface_report(samples, [&unsigned_distance](const CorrespondenceSet& s) {
    return point_to_surface(s, unsigned_distance);
  });
}

double time_inference(BaseDeepSSM& model, const Volume& volume,
                      std::size_t repetitions) {
  return median_inference_seconds(model, volume, repetitions);
}

double time_inference(TlDeepSSM& model, const Volume& volume, std::size_t repetitions) {
  return median_inference_seconds(model, volume, repetitions);
}

}  // namespace deepssm
