#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace deepssm {

using Point3 = std::array<double, 3>;

/// Ordered list of M surface points (millimeters) for one shape sample. The
/// point at index j corresponds to the same anatomical location on every
/// sample in a population.
struct CorrespondenceSet {
  std::string sample_id;
  std::vector<Point3> points;

  std::size_t size() const { return points.size(); }

  /// Flattened coordinates (x0, y0, z0, x1, y1, z1, ...), length 3M.
  std::vector<double> flatten() const;
  static CorrespondenceSet from_flat(std::span<const double> values,
                                     std::string sample_id = {});

  /// Throws std::invalid_argument if any coordinate is NaN/Inf.
  void check_finite() const;
};

/// Throws std::invalid_argument unless every set has the same nonzero size.
void check_consistent_sizes(const std::vector<CorrespondenceSet>& population);

/// Plain-text particle format: one point per line, three whitespace-separated
/// decimal coordinates. The reader tolerates trailing whitespace and a blank
/// final line; the writer emits %.17g so values round-trip bit-exactly.
CorrespondenceSet read_particles(const std::filesystem::path& path);
void write_particles(const CorrespondenceSet& set,
                     const std::filesystem::path& path);

/// Same format with one extra scalar column — the heatmap export used for
/// per-point RMSE and Mahalanobis fields.
void write_particles_with_scalar(const CorrespondenceSet& set,
                                 std::span<const double> scalars,
                                 const std::filesystem::path& path);

}  // namespace deepssm
