#include "deepssm/synthbench.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "deepssm/parallel.hpp"
#include "deepssm/rng.hpp"

namespace deepssm {
namespace {

double norm3(const Point3& p) {
  return std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
}

/// Compact-support radial scale of the bump: 1 inside is the unperturbed
/// ellipsoid, the quartic window keeps the perturbation and its first
/// derivative zero at the support boundary.
double bump_scale(const SurfaceSpec& s, const Point3& unit_direction) {
  if (s.bump_amplitude == 0.0) return 1.0;
  const double cos_alpha =
      std::clamp(unit_direction[0] * s.bump_direction[0] +
                     unit_direction[1] * s.bump_direction[1] +
                     unit_direction[2] * s.bump_direction[2],
                 -1.0, 1.0);
  const double alpha = std::acos(cos_alpha);
  if (alpha >= s.bump_width) return 1.0;
  const double t = alpha / s.bump_width;
  const double window = (1.0 - t * t) * (1.0 - t * t);
  return 1.0 + s.bump_amplitude * window;
}

/// Radial extent of the plain ellipsoid along a unit direction.
double ellipsoid_radius(const std::array<double, 3>& radii, const Point3& v) {
  const double q = (v[0] / radii[0]) * (v[0] / radii[0]) +
                   (v[1] / radii[1]) * (v[1] / radii[1]) +
                   (v[2] / radii[2]) * (v[2] / radii[2]);
  return 1.0 / std::sqrt(q);
}

/// Implicit ellipsoid value Σ qᵢ²/aᵢ² − 1 for a centered point.
double ellipsoid_implicit(const std::array<double, 3>& radii, const Point3& q) {
  return (q[0] / radii[0]) * (q[0] / radii[0]) +
         (q[1] / radii[1]) * (q[1] / radii[1]) +
         (q[2] / radii[2]) * (q[2] / radii[2]) - 1.0;
}

/// Rotates (x, y) by the twist angle at height z; the inverse rotation
/// recovers the untwisted ellipsoid point exactly.
Point3 twist(const SurfaceSpec& s, const Point3& q, double sign) {
  const double psi = sign * s.twist_rate * q[2] / s.radii[2];
  const double c = std::cos(psi);
  const double sn = std::sin(psi);
  return {c * q[0] - sn * q[1], sn * q[0] + c * q[1], q[2]};
}

/// Radial extent of the twisted surface: the twist preserves ‖·‖ and z, so
/// the crossing g(r) = implicit(untwist(r·v)) = 0 is bracketed by
/// [0, max radius] and isolated for moderate twist rates.
double twisted_radius(const SurfaceSpec& s, const Point3& v) {
  const double r_max =
      std::max({s.radii[0], s.radii[1], s.radii[2]}) * (1.0 + 1e-9);
  double lo = 0.0;
  double hi = r_max;
  for (int iter = 0; iter < 200; ++iter) {
    const double mid = 0.5 * (lo + hi);
    const Point3 p{mid * v[0], mid * v[1], mid * v[2]};
    if (ellipsoid_implicit(s.radii, twist(s, p, -1.0)) < 0.0) {
      lo = mid;
    } else {
      hi = mid;
    }
    if (hi - lo < 1e-12 * r_max) break;
  }
  return 0.5 * (lo + hi);
}

/// Exact distance to a plain ellipsoid: the closest point satisfies
/// qᵢ = aᵢ²pᵢ/(aᵢ²+t) with F(t) = Σ (aᵢpᵢ)²/(aᵢ²+t)² = 1, strictly
/// decreasing on t > −min aᵢ², solved by bisection-guarded Newton.
double ellipsoid_distance(const std::array<double, 3>& radii, const Point3& p,
                          const Point3& world);

double sampled_surface_distance(const SurfaceSpec& s, const Point3& p);

std::string point_text(const Point3& p) {
  return "(" + std::to_string(p[0]) + ", " + std::to_string(p[1]) + ", " +
         std::to_string(p[2]) + ")";
}

double ellipsoid_distance(const std::array<double, 3>& radii, const Point3& p,
                          const Point3& world) {
  const double a_min = std::min({radii[0], radii[1], radii[2]});
  const double a_max = std::max({radii[0], radii[1], radii[2]});
  if (norm3(p) < 1e-14 * a_min) return a_min;  // center: nearest pole

  const auto value = [&](double t) {
    double f = -1.0;
    for (int i = 0; i < 3; ++i) {
      const double num = radii[i] * p[i];
      const double den = radii[i] * radii[i] + t;
      f += (num / den) * (num / den);
    }
    return f;
  };

  // Bracket the root. F → −1 as t → ∞; near the lower domain edge F blows
  // up unless p has no component on a minimal axis (a measure-zero interior
  // configuration the monotone form cannot represent — fall back to the
  // dense search there).
  double lo = -a_min * a_min * (1.0 - 1e-12);
  if (value(lo) <= 0.0) {
    SurfaceSpec plain;
    plain.radii = radii;
    return sampled_surface_distance(plain, p);
  }
  double hi = std::max(a_max * norm3(p), a_max * a_max);
  for (int iter = 0; iter < 200 && value(hi) > 0.0; ++iter) hi *= 2.0;

  double t = 0.5 * (lo + hi);
  bool converged = false;
  for (int iter = 0; iter < 200; ++iter) {
    const double f = value(t);
    if (std::abs(f) < 1e-14) {
      converged = true;
      break;
    }
    if (f > 0.0) {
      lo = t;
    } else {
      hi = t;
    }
    double df = 0.0;
    for (int i = 0; i < 3; ++i) {
      const double num = radii[i] * p[i];
      const double den = radii[i] * radii[i] + t;
      df += -2.0 * (num * num) / (den * den * den);
    }
    double next = (df != 0.0) ? t - f / df : t;
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    if (std::abs(next - t) < 1e-15 * (1.0 + std::abs(t))) {
      t = next;
      converged = true;
      break;
    }
    t = next;
  }
  if (!converged && std::abs(value(t)) > 1e-9) {
    throw std::runtime_error(
        "analytic_surface_distance: ellipsoid projection did not converge at " +
        point_text(world));
  }

  double dist_sq = 0.0;
  for (int i = 0; i < 3; ++i) {
    const double q = radii[i] * radii[i] * p[i] / (radii[i] * radii[i] + t);
    dist_sq += (q - p[i]) * (q - p[i]);
  }
  return std::sqrt(dist_sq);
}

Point3 centered_parametric(const SurfaceSpec& s, double theta, double phi) {
  const double cphi = std::cos(phi);
  const Point3 u{cphi * std::cos(theta), cphi * std::sin(theta), std::sin(phi)};
  Point3 q{s.radii[0] * u[0], s.radii[1] * u[1], s.radii[2] * u[2]};
  if (s.kind == FamilyKind::ellipsoid_bump && s.bump_amplitude != 0.0) {
    // The bump scales radially from the center, so its support is judged by
    // the spatial direction of the ellipsoid point, not the parameter u.
    const double r = norm3(q);
    const Point3 e{q[0] / r, q[1] / r, q[2] / r};
    const double scale = bump_scale(s, e);
    q = {scale * q[0], scale * q[1], scale * q[2]};
  } else if (s.kind == FamilyKind::twisted && s.twist_rate != 0.0) {
    q = twist(s, q, 1.0);
  }
  return q;
}

/// Deterministic nearest-point search over the (θ, φ) parameter grid with
/// iterated window shrinking; used where no closed-form projection exists.
double sampled_surface_distance(const SurfaceSpec& s, const Point3& p) {
  constexpr double kPi = std::numbers::pi;
  const auto dist_sq = [&](double theta, double phi) {
    const Point3 q = centered_parametric(s, theta, phi);
    const double dx = q[0] - p[0];
    const double dy = q[1] - p[1];
    const double dz = q[2] - p[2];
    return dx * dx + dy * dy + dz * dz;
  };

  double best = dist_sq(0.0, 0.5 * kPi);
  double best_theta = 0.0;
  double best_phi = 0.5 * kPi;
  constexpr int kCoarseTheta = 96;
  constexpr int kCoarsePhi = 48;
  for (int i = 0; i < kCoarseTheta; ++i) {
    const double theta = 2.0 * kPi * (i + 0.5) / kCoarseTheta;
    for (int j = 0; j < kCoarsePhi; ++j) {
      const double phi = -0.5 * kPi + kPi * (j + 0.5) / kCoarsePhi;
      const double d = dist_sq(theta, phi);
      if (d < best) {
        best = d;
        best_theta = theta;
        best_phi = phi;
      }
    }
  }

  double window_theta = 2.0 * kPi / kCoarseTheta;
  double window_phi = kPi / kCoarsePhi;
  for (int round = 0; round < 48; ++round) {
    constexpr int kLocal = 3;  // 7×7 stencil per round
    double round_best = best;
    double round_theta = best_theta;
    double round_phi = best_phi;
    for (int i = -kLocal; i <= kLocal; ++i) {
      for (int j = -kLocal; j <= kLocal; ++j) {
        const double theta = best_theta + window_theta * i / kLocal;
        const double phi = std::clamp(best_phi + window_phi * j / kLocal,
                                      -0.5 * kPi, 0.5 * kPi);
        const double d = dist_sq(theta, phi);
        if (d < round_best) {
          round_best = d;
          round_theta = theta;
          round_phi = phi;
        }
      }
    }
    best = round_best;
    best_theta = round_theta;
    best_phi = round_phi;
    window_theta *= 0.5;
    window_phi *= 0.5;
    if (window_phi < 1e-12) break;
  }
  return std::sqrt(best);
}

void check_range(const char* what, double lo, double hi, bool positive) {
  if (!(lo <= hi) || (positive && !(lo > 0.0))) {
    throw std::invalid_argument(std::string("synthetic family: invalid ") +
                                what + " range [" + std::to_string(lo) + ", " +
                                std::to_string(hi) + "]");
  }
}

}  // namespace

void SyntheticFamily::validate() const {
  if (particles < 12) {
    throw std::invalid_argument(
        "synthetic family: at least 12 particles are required, got " +
        std::to_string(particles));
  }
  grid.validate();
  for (int i = 0; i < 3; ++i) {
    check_range("radius", radii_min[i], radii_max[i], /*positive=*/true);
  }
  if (noise < 0.0) {
    throw std::invalid_argument("synthetic family: noise level must be >= 0");
  }
  if (kind == FamilyKind::ellipsoid_bump) {
    check_range("bump amplitude", bump_amplitude_min, bump_amplitude_max,
                /*positive=*/false);
    if (bump_amplitude_min < 0.0) {
      throw std::invalid_argument(
          "synthetic family: bump amplitude must be >= 0");
    }
    if (!(bump_width > 0.0) || bump_width > std::numbers::pi) {
      throw std::invalid_argument(
          "synthetic family: bump width must lie in (0, pi]");
    }
    const double dir_norm = norm3(bump_direction);
    if (!(std::abs(dir_norm - 1.0) < 1e-6)) {
      throw std::invalid_argument(
          "synthetic family: bump direction must be a unit vector");
    }
    if (pathological_fraction < 0.0 || pathological_fraction > 1.0) {
      throw std::invalid_argument(
          "synthetic family: pathological fraction must lie in [0, 1]");
    }
  }
  if (kind == FamilyKind::twisted) {
    check_range("twist", twist_min, twist_max, /*positive=*/false);
  }

  // Field-of-view check: the largest possible shape must stay inside the
  // span of voxel centers on every axis.
  double reach = std::max({radii_max[0], radii_max[1], radii_max[2]});
  if (kind == FamilyKind::ellipsoid_bump) reach *= 1.0 + bump_amplitude_max;
  const double lo_x = grid.origin[0];
  const double lo_y = grid.origin[1];
  const double lo_z = grid.origin[2];
  const double hi_x = grid.origin[0] + grid.spacing[0] * (grid.dim_x() - 1);
  const double hi_y = grid.origin[1] + grid.spacing[1] * (grid.dim_y() - 1);
  const double hi_z = grid.origin[2] + grid.spacing[2] * (grid.dim_z() - 1);
  const bool fits = center[0] - reach >= lo_x && center[0] + reach <= hi_x &&
                    center[1] - reach >= lo_y && center[1] + reach <= hi_y &&
                    center[2] - reach >= lo_z && center[2] + reach <= hi_z;
  if (!fits) {
    throw std::invalid_argument(
        "synthetic family: shape (max reach " + std::to_string(reach) +
        ") exceeds the grid field of view");
  }
}

std::vector<std::array<double, 2>> sphere_parameter_samples(std::size_t m) {
  if (m == 0) {
    throw std::invalid_argument("sphere_parameter_samples: m must be >= 1");
  }
  // Fibonacci sphere: latitudes with equal-area spacing, longitudes stepped
  // by the golden angle.
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  std::vector<std::array<double, 2>> samples(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double z = 1.0 - 2.0 * (static_cast<double>(i) + 0.5) /
                               static_cast<double>(m);
    samples[i] = {golden * static_cast<double>(i), std::asin(z)};
  }
  return samples;
}

Point3 parametric_point(const SurfaceSpec& surface, double theta, double phi) {
  const Point3 q = centered_parametric(surface, theta, phi);
  return {surface.center[0] + q[0], surface.center[1] + q[1],
          surface.center[2] + q[2]};
}

double surface_radius(const SurfaceSpec& surface, const Point3& unit_direction) {
  const double n = norm3(unit_direction);
  if (!(std::abs(n - 1.0) < 1e-6)) {
    throw std::invalid_argument("surface_radius: direction must be a unit vector");
  }
  switch (surface.kind) {
    case FamilyKind::twisted:
      if (surface.twist_rate != 0.0) return twisted_radius(surface, unit_direction);
      return ellipsoid_radius(surface.radii, unit_direction);
    case FamilyKind::ellipsoid_bump:
      return ellipsoid_radius(surface.radii, unit_direction) *
             bump_scale(surface, unit_direction);
    case FamilyKind::ellipsoid_linear:
    default:
      return ellipsoid_radius(surface.radii, unit_direction);
  }
}

double analytic_surface_distance(const SurfaceSpec& surface, const Point3& point) {
  const Point3 p{point[0] - surface.center[0], point[1] - surface.center[1],
                 point[2] - surface.center[2]};
  const bool plain_ellipsoid =
      surface.kind == FamilyKind::ellipsoid_linear ||
      (surface.kind == FamilyKind::ellipsoid_bump && surface.bump_amplitude == 0.0) ||
      (surface.kind == FamilyKind::twisted && surface.twist_rate == 0.0);
  if (plain_ellipsoid) return ellipsoid_distance(surface.radii, p, point);
  return sampled_surface_distance(surface, p);
}

std::vector<GroundTruthSample> generate_population(const SyntheticFamily& family,
                                                   std::size_t n, int threads) {
  family.validate();
  if (n < 2) {
    throw std::invalid_argument(
        "generate_population: at least 2 samples are required");
  }
  if (threads < 1) {
    throw std::invalid_argument("generate_population: threads must be >= 1");
  }

  const auto params = sphere_parameter_samples(family.particles);
  std::size_t pathological_from = n;
  if (family.kind == FamilyKind::ellipsoid_bump) {
    const auto n_path = static_cast<std::size_t>(
        std::llround(family.pathological_fraction * static_cast<double>(n)));
    pathological_from = n - std::min(n_path, n);
  }

  std::vector<GroundTruthSample> samples(n);
  parallel_for(n, static_cast<std::size_t>(threads), [&](std::size_t i) {
    Rng rng(mix_seed(family.seed, i));

    SurfaceSpec spec;
    spec.kind = family.kind;
    spec.center = family.center;
    for (int axis = 0; axis < 3; ++axis) {
      spec.radii[axis] = rng.uniform(family.radii_min[axis], family.radii_max[axis]);
    }
    SampleLabel label = SampleLabel::control;
    if (family.kind == FamilyKind::ellipsoid_bump) {
      spec.bump_direction = family.bump_direction;
      spec.bump_width = family.bump_width;
      if (i >= pathological_from) {
        label = SampleLabel::pathological;
        spec.bump_amplitude =
            rng.uniform(family.bump_amplitude_min, family.bump_amplitude_max);
      }
    } else if (family.kind == FamilyKind::twisted) {
      spec.twist_rate = rng.uniform(family.twist_min, family.twist_max);
    }

    CorrespondenceSet corr;
    corr.sample_id = "sample_" + std::to_string(i);
    corr.points.resize(family.particles);
    for (std::size_t j = 0; j < family.particles; ++j) {
      corr.points[j] = parametric_point(spec, params[j][0], params[j][1]);
    }

    // Smoothed occupancy: logistic of the radial pseudo-distance with width
    // one voxel, so the 0.5 level set coincides with the surface.
    Volume vol;
    vol.grid = family.grid;
    vol.data.resize(family.grid.voxel_count());
    const double width = (family.grid.spacing[0] + family.grid.spacing[1] +
                          family.grid.spacing[2]) /
                         3.0;
    std::size_t flat = 0;
    for (std::size_t z = 0; z < family.grid.dim_z(); ++z) {
      for (std::size_t y = 0; y < family.grid.dim_y(); ++y) {
        for (std::size_t x = 0; x < family.grid.dim_x(); ++x, ++flat) {
          const Point3 w = vol.voxel_center(x, y, z);
          const Point3 d{w[0] - spec.center[0], w[1] - spec.center[1],
                         w[2] - spec.center[2]};
          const double r = norm3(d);
          double pseudo;
          if (r < 1e-12) {
            pseudo = -surface_radius(spec, Point3{1.0, 0.0, 0.0});
          } else {
            const Point3 v{d[0] / r, d[1] / r, d[2] / r};
            pseudo = r - surface_radius(spec, v);
          }
          vol.data[flat] = 1.0 / (1.0 + std::exp(pseudo / width));
        }
      }
    }
    if (family.noise > 0.0) {
      for (double& value : vol.data) value += family.noise * rng.normal();
    }

    samples[i] = GroundTruthSample{std::move(vol), std::move(corr), spec, label};
  });
  return samples;
}

}  // namespace deepssm
