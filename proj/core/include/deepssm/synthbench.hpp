#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "deepssm/correspondence.hpp"
#include "deepssm/volume.hpp"

namespace deepssm {

enum class FamilyKind { ellipsoid_linear, ellipsoid_bump, twisted };
enum class SampleLabel { control, pathological };

/// Full generative record of one sample's analytic surface. All families are
/// star-shaped about `center`, so the surface is a radial function ρ(v) of
/// direction and the rendered occupancy boundary is exact along rays.
struct SurfaceSpec {
  FamilyKind kind = FamilyKind::ellipsoid_linear;
  Point3 center{0.0, 0.0, 0.0};
  std::array<double, 3> radii{1.0, 1.0, 1.0};
  double bump_amplitude = 0.0;             // 0 = control
  Point3 bump_direction{1.0, 0.0, 0.0};    // unit vector
  double bump_width = 0.9;                 // angular support half-width (rad)
  double twist_rate = 0.0;                 // xy-rotation in rad at z = ±c
};

struct SyntheticFamily {
  FamilyKind kind = FamilyKind::ellipsoid_linear;
  std::size_t particles = 128;  // M ≥ 12
  GridSpec grid{{32, 32, 32}, {1.0, 1.0, 1.0}, {-15.5, -15.5, -15.5}};
  double noise = 0.0;  // additive Gaussian intensity noise (std dev)
  std::uint64_t seed = 0;
  Point3 center{0.0, 0.0, 0.0};
  std::array<double, 3> radii_min{7.5, 8.5, 9.5};
  std::array<double, 3> radii_max{10.5, 11.5, 12.5};
  // ellipsoid_bump only:
  double bump_amplitude_min = 0.10;
  double bump_amplitude_max = 0.20;
  double bump_width = 0.9;
  Point3 bump_direction{1.0, 0.0, 0.0};
  double pathological_fraction = 0.5;
  // twisted only:
  double twist_min = 0.25;
  double twist_max = 0.75;

  /// Throws on M < 12, bad ranges, or a shape that can exceed the grid's
  /// field of view.
  void validate() const;
};

struct GroundTruthSample {
  Volume volume;
  CorrespondenceSet correspondences;
  SurfaceSpec surface;  // doubles as the generative-parameter record
  SampleLabel label = SampleLabel::control;
};

/// Deterministic population: sample i draws its parameters from
/// mix_seed(family.seed, i), so any subset regenerates identically.
/// Correspondences are the fixed spherical parameter samples mapped through
/// each sample's surface — index j refers to the same parameter on every
/// sample. Volumes are logistic-smoothed occupancies (width = one voxel)
/// plus optional Gaussian noise.
std::vector<GroundTruthSample> generate_population(const SyntheticFamily& family,
                                                   std::size_t n, int threads = 1);

/// The M fixed (θ, φ) parameter samples: a Fibonacci sphere, near-uniform
/// over directions.
std::vector<std::array<double, 2>> sphere_parameter_samples(std::size_t m);

/// Surface point for spherical parameters (θ around z, φ latitude):
/// direction u = (cosφ·cosθ, cosφ·sinθ, sinφ) mapped through the family's
/// shape function. (θ, φ) = (0, 0) lies at center + (a, 0, 0) for ellipsoids.
Point3 parametric_point(const SurfaceSpec& surface, double theta, double phi);

/// Radial extent of the surface along a unit direction from the center.
double surface_radius(const SurfaceSpec& surface, const Point3& unit_direction);

/// Unsigned Euclidean distance from a world point to the surface. Exact
/// Newton projection for plain ellipsoids; bumped/twisted surfaces use a
/// deterministic refined parametric search (resolution far below a voxel).
/// Throws std::runtime_error naming the point if the projection fails to
/// converge.
double analytic_surface_distance(const SurfaceSpec& surface, const Point3& point);

}  // namespace deepssm
