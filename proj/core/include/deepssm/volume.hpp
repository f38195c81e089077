#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <vector>

#include "deepssm/correspondence.hpp"

namespace deepssm {

/// Regular 3D grid geometry. `extents` counts voxels as (D, H, W) along the
/// world z, y, x axes respectively; `spacing` and `origin` are world-space
/// (x, y, z) vectors, with `origin` at the center of voxel (0,0,0). The world
/// position of voxel (ix, iy, iz) is origin + (ix·sx, iy·sy, iz·sz).
struct GridSpec {
  std::array<std::size_t, 3> extents{};  // {D, H, W}
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::array<double, 3> origin{0.0, 0.0, 0.0};

  std::size_t dim_z() const { return extents[0]; }
  std::size_t dim_y() const { return extents[1]; }
  std::size_t dim_x() const { return extents[2]; }
  std::size_t voxel_count() const { return extents[0] * extents[1] * extents[2]; }
  void validate() const;  // throws on zero extents or non-positive spacing

  bool operator==(const GridSpec&) const = default;
};

/// Scalar volume over a GridSpec; data is row-major with x fastest:
/// flat(ix,iy,iz) = (iz·H + iy)·W + ix.
struct Volume {
  GridSpec grid;
  std::vector<double> data;

  Volume() = default;
  explicit Volume(GridSpec g);

  double& at(std::size_t ix, std::size_t iy, std::size_t iz);
  double at(std::size_t ix, std::size_t iy, std::size_t iz) const;
  Point3 voxel_center(std::size_t ix, std::size_t iy, std::size_t iz) const;

  /// Trilinear interpolation at a world position. Each of the 8 surrounding
  /// voxels that falls outside the grid contributes `background` instead, so
  /// sampling exactly on an existing voxel center reproduces its value
  /// bit-exactly and a one-voxel shift fills the vacated boundary with
  /// background.
  double sample_trilinear(const Point3& world, double background) const;
};

/// Pull-based trilinear resampling of `src` onto `target_grid`.
Volume resample(const Volume& src, const GridSpec& target_grid, double background);

/// Halve (or 1/factor) the extents and multiply spacing by `factor`; output
/// voxel centers sit at the centers of the factor³ input blocks.
Volume downsample(const Volume& src, std::size_t factor);

/// Raw little-endian float64 voxels at `path`, JSON sidecar at `path` +
/// ".json" holding extents/spacing/origin.
void write_volume(const Volume& volume, const std::filesystem::path& path);
Volume read_volume(const std::filesystem::path& path);

}  // namespace deepssm
