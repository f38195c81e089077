// Unit tests for the synthetic ground-truth generator: the parameter sphere,
// the three shape families (membership oracles re-derived from their stated
// closed forms), rendered occupancies, analytic distances against a dense
// sampler, and generation determinism.
//
// Provenance tags: [DERIVED] oracle-computed, [PAPER] method-pinned,
// [TRIVIAL] immediate contract consequence.

#include <array>
#include <cmath>
#include <numbers>
#include <vector>

#include "doctest.h"

#include "deepssm/rng.hpp"
#include "deepssm/shape_model.hpp"
#include "deepssm/synthbench.hpp"
#include "support.hpp"

using deepssm::FamilyKind;
using deepssm::GridSpec;
using deepssm::Point3;
using deepssm::SampleLabel;
using deepssm::SurfaceSpec;
using deepssm::SyntheticFamily;
namespace ts = testsupport;

namespace {

double norm3(const Point3& p) {
  return std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
}

Point3 minus(const Point3& a, const Point3& b) {
  return {a[0] - b[0], a[1] - b[1], a[2] - b[2]};
}

/// Radial bump factor, re-derived from its definition: a quartic window of
/// the angle α between `dir` and the bump axis, support α < width.
double bump_factor(const SurfaceSpec& s, const Point3& dir) {
  double dot = dir[0] * s.bump_direction[0] + dir[1] * s.bump_direction[1] +
               dir[2] * s.bump_direction[2];
  double alpha = std::acos(std::clamp(dot, -1.0, 1.0));
  if (alpha >= s.bump_width) return 1.0;
  double t = 1.0 - (alpha / s.bump_width) * (alpha / s.bump_width);
  return 1.0 + s.bump_amplitude * t * t;
}

/// Ellipsoid membership via the implicit form Σ (p_i/a_i)² < 1.
bool inside_ellipsoid(const SurfaceSpec& s, const Point3& p) {
  double q = 0.0;
  for (int k = 0; k < 3; ++k) {
    double d = (p[k] - s.center[k]) / s.radii[k];
    q += d * d;
  }
  return q < 1.0;
}

/// A small family that fits comfortably inside a 16³ unit-spacing grid.
SyntheticFamily small_family(FamilyKind kind, std::uint64_t seed = 11) {
  SyntheticFamily family;
  family.kind = kind;
  family.particles = 16;
  family.grid = {{16, 16, 16}, {1.0, 1.0, 1.0}, {-7.5, -7.5, -7.5}};
  family.radii_min = {4.0, 4.5, 5.0};
  family.radii_max = {5.0, 5.5, 6.0};
  family.seed = seed;
  return family;
}

}  // namespace

// ---- parameter sphere ---------------------------------------------------------------

TEST_CASE("sphere parameter samples cover the sphere without duplicates") {
  auto params = deepssm::sphere_parameter_samples(64);
  REQUIRE(params.size() == 64);

  std::vector<Point3> dirs;
  for (auto [theta, phi] : params) {
    CHECK(phi >= -std::numbers::pi / 2);
    CHECK(phi <= std::numbers::pi / 2);
    dirs.push_back({std::cos(phi) * std::cos(theta), std::cos(phi) * std::sin(theta),
                    std::sin(phi)});
    CHECK(norm3(dirs.back()) == doctest::Approx(1.0).epsilon(1e-12));
  }
  // Latitudes sweep monotonically pole to pole (Fibonacci z = 1 − 2(i+½)/M).
  for (std::size_t i = 1; i < 64; ++i) CHECK(dirs[i][2] < dirs[i - 1][2]);

  // Near-uniform coverage: no two directions closer than half the ideal
  // spacing angle ≈ sqrt(4π/M). [DERIVED] Fibonacci-sphere packing bound
  double min_angle = std::numbers::pi;
  for (std::size_t i = 0; i < 64; ++i)
    for (std::size_t j = i + 1; j < 64; ++j) {
      double dot = dirs[i][0] * dirs[j][0] + dirs[i][1] * dirs[j][1] +
                   dirs[i][2] * dirs[j][2];
      min_angle = std::min(min_angle, std::acos(std::clamp(dot, -1.0, 1.0)));
    }
  double ideal = std::sqrt(4.0 * std::numbers::pi / 64.0);
  CHECK(min_angle > 0.5 * ideal);
}

// ---- parametric surfaces -------------------------------------------------------------

TEST_CASE("parametric points hit the documented poles") {
  SurfaceSpec s;
  s.kind = FamilyKind::ellipsoid_linear;
  s.center = {1.0, 2.0, 3.0};
  s.radii = {5.0, 6.0, 7.0};

  Point3 px = deepssm::parametric_point(s, 0.0, 0.0);
  CHECK(px[0] == doctest::Approx(6.0).epsilon(1e-12));  // center.x + a  [TRIVIAL]
  CHECK(px[1] == doctest::Approx(2.0));
  CHECK(px[2] == doctest::Approx(3.0));

  Point3 pz = deepssm::parametric_point(s, 0.0, std::numbers::pi / 2);
  CHECK(pz[2] == doctest::Approx(10.0).epsilon(1e-12));  // center.z + c
  CHECK(pz[0] == doctest::Approx(1.0).epsilon(1e-9).scale(1.0));
}

TEST_CASE("surface_radius matches the parametric map for every family") {
  // [DERIVED] star-shapedness: along the direction of any parametric point,
  // the radial extent equals that point's distance from the center.
  std::vector<SurfaceSpec> specs(3);
  specs[0].kind = FamilyKind::ellipsoid_linear;
  specs[1].kind = FamilyKind::ellipsoid_bump;
  specs[1].bump_amplitude = 0.18;
  specs[1].bump_width = 0.9;
  specs[2].kind = FamilyKind::twisted;
  specs[2].twist_rate = 0.6;
  for (auto& s : specs) {
    s.center = {0.5, -0.25, 1.0};
    s.radii = {4.0, 5.0, 6.0};
  }

  auto params = deepssm::sphere_parameter_samples(40);
  for (const auto& s : specs) {
    for (auto [theta, phi] : params) {
      Point3 p = deepssm::parametric_point(s, theta, phi);
      Point3 d = minus(p, s.center);
      double r = norm3(d);
      Point3 v = {d[0] / r, d[1] / r, d[2] / r};
      CHECK(deepssm::surface_radius(s, v) == doctest::Approx(r).epsilon(1e-9));
    }
  }
}

TEST_CASE("bump displaces only within its angular support") {
  SurfaceSpec control;
  control.kind = FamilyKind::ellipsoid_linear;
  control.radii = {4.0, 5.0, 6.0};
  SurfaceSpec bump = control;
  bump.kind = FamilyKind::ellipsoid_bump;
  bump.bump_amplitude = 0.2;
  bump.bump_width = 0.9;
  bump.bump_direction = {1.0, 0.0, 0.0};

  auto params = deepssm::sphere_parameter_samples(48);
  std::size_t displaced = 0, untouched = 0;
  for (auto [theta, phi] : params) {
    Point3 base = deepssm::parametric_point(control, theta, phi);
    Point3 bumped = deepssm::parametric_point(bump, theta, phi);
    double r = norm3(base);
    Point3 dir = {base[0] / r, base[1] / r, base[2] / r};
    double factor = bump_factor(bump, dir);  // [DERIVED] re-derived window
    for (int k = 0; k < 3; ++k)
      CHECK(bumped[k] == doctest::Approx(factor * base[k]).epsilon(1e-12).scale(1.0));
    if (factor > 1.0)
      ++displaced;
    else
      ++untouched;
  }
  CHECK(displaced > 0);   // the support contains samples
  CHECK(untouched > 0);   // and so does its complement

  // The bump apex (+x pole) is displaced by exactly amplitude·a.
  Point3 apex = deepssm::parametric_point(bump, 0.0, 0.0);
  CHECK(apex[0] == doctest::Approx(4.0 * 1.2).epsilon(1e-12));
}

TEST_CASE("twist rotates about z and untwisting recovers the ellipsoid") {
  SurfaceSpec plain;
  plain.kind = FamilyKind::ellipsoid_linear;
  plain.center = {1.0, 0.0, -2.0};
  plain.radii = {4.0, 5.0, 6.0};
  SurfaceSpec twisted = plain;
  twisted.kind = FamilyKind::twisted;
  twisted.twist_rate = 0.7;

  auto params = deepssm::sphere_parameter_samples(32);
  for (auto [theta, phi] : params) {
    Point3 q = deepssm::parametric_point(plain, theta, phi);
    Point3 p = deepssm::parametric_point(twisted, theta, phi);
    Point3 dq = minus(q, plain.center);
    Point3 dp = minus(p, plain.center);
    // Twist preserves z and the distance from the axis. [TRIVIAL]
    CHECK(dp[2] == doctest::Approx(dq[2]).epsilon(1e-12).scale(1.0));
    CHECK(std::hypot(dp[0], dp[1]) ==
          doctest::Approx(std::hypot(dq[0], dq[1])).epsilon(1e-12).scale(1.0));
    // [DERIVED] rotating back by ψ = τ·z/c recovers the ellipsoid point.
    double psi = twisted.twist_rate * dq[2] / twisted.radii[2];
    double x = std::cos(-psi) * dp[0] - std::sin(-psi) * dp[1];
    double y = std::sin(-psi) * dp[0] + std::cos(-psi) * dp[1];
    CHECK(x == doctest::Approx(dq[0]).epsilon(1e-9).scale(1.0));
    CHECK(y == doctest::Approx(dq[1]).epsilon(1e-9).scale(1.0));
  }
}

// ---- population generation -------------------------------------------------------------

TEST_CASE("generated correspondences lie on their analytic surfaces") {
  for (auto kind : {FamilyKind::ellipsoid_linear, FamilyKind::ellipsoid_bump,
                    FamilyKind::twisted}) {
    auto samples = deepssm::generate_population(small_family(kind), 4);
    REQUIRE(samples.size() == 4);
    for (const auto& sample : samples) {
      REQUIRE(sample.correspondences.size() == 16);
      for (const auto& p : sample.correspondences.points)
        CHECK(deepssm::analytic_surface_distance(sample.surface, p) < 1e-8);
    }
  }
}

TEST_CASE("ellipsoid_linear populations have exactly three shape modes") {
  auto family = small_family(FamilyKind::ellipsoid_linear, /*seed=*/21);
  auto samples = deepssm::generate_population(family, 10);
  std::vector<deepssm::CorrespondenceSet> shapes;
  for (auto& s : samples) shapes.push_back(s.correspondences);

  auto model = deepssm::fit_pca(shapes, 9);
  // [DERIVED] particles are affine in the three radii: rank ≤ 3.
  double top = model.eigenvalues(0);
  CHECK(top > 0.0);
  CHECK(model.eigenvalues(2) > 1e-12 * top);  // three genuine modes
  for (long k = 3; k < 9; ++k) CHECK(model.eigenvalues(k) < 1e-12 * top);
}

TEST_CASE("bump populations split labels control-first") {
  auto family = small_family(FamilyKind::ellipsoid_bump, /*seed=*/31);
  family.pathological_fraction = 0.5;
  auto samples = deepssm::generate_population(family, 6);
  for (std::size_t i = 0; i < 6; ++i) {
    if (i < 3) {
      CHECK(samples[i].label == SampleLabel::control);
      CHECK(samples[i].surface.bump_amplitude == 0.0);
    } else {
      CHECK(samples[i].label == SampleLabel::pathological);
      CHECK(samples[i].surface.bump_amplitude >= family.bump_amplitude_min);
      CHECK(samples[i].surface.bump_amplitude <= family.bump_amplitude_max);
    }
  }
}

TEST_CASE("twisted samples draw twist rates inside the configured range") {
  auto family = small_family(FamilyKind::twisted, /*seed=*/41);
  family.twist_min = 0.3;
  family.twist_max = 0.5;
  auto samples = deepssm::generate_population(family, 5);
  for (const auto& s : samples) {
    CHECK(s.surface.twist_rate >= 0.3);
    CHECK(s.surface.twist_rate <= 0.5);
    CHECK(s.label == SampleLabel::control);  // twist is not a pathology label
  }
}

TEST_CASE("occupancy agrees with the implicit membership oracle") {
  auto family = small_family(FamilyKind::ellipsoid_linear, /*seed=*/51);
  auto samples = deepssm::generate_population(family, 2);
  const auto& sample = samples[0];
  const auto& g = sample.volume.grid;

  // [DERIVED] logistic of (r − ρ) crosses 0.5 exactly on the surface, so
  // value > 0.5 ⇔ the voxel center satisfies Σ (p_i/a_i)² < 1.
  for (std::size_t iz = 0; iz < g.dim_z(); ++iz)
    for (std::size_t iy = 0; iy < g.dim_y(); ++iy)
      for (std::size_t ix = 0; ix < g.dim_x(); ++ix) {
        Point3 w = sample.volume.voxel_center(ix, iy, iz);
        bool inside = inside_ellipsoid(sample.surface, w);
        double value = sample.volume.at(ix, iy, iz);
        CHECK(value > 0.0);
        CHECK(value < 1.0);
        CHECK((value > 0.5) == inside);
      }
}

TEST_CASE("occupancy integral matches the radial-logistic volume expansion") {
  SyntheticFamily family;  // default 32³ grid, mid-size radii
  family.kind = FamilyKind::ellipsoid_linear;
  family.particles = 16;
  family.seed = 61;
  auto samples = deepssm::generate_population(family, 2);
  const auto& sample = samples[1];

  double sum = 0.0;
  for (double v : sample.volume.data) sum += v;
  const auto& sp = sample.volume.grid.spacing;
  double integral = sum * sp[0] * sp[1] * sp[2];

  // [DERIVED] For occupancy σ(−(r − R(v))/w) along each ray from the center,
  // substituting u = (r − R)/w in ∫ σ · r² dr gives the enclosed integral
  //   V + (π²/3) w² ∮ R(v) dΩ
  // exactly (the u⁰ and u² moments of σ(−u) − H(−u) vanish by oddness, and
  // 2 ∫₀^∞ u σ(−u) du = π²/6). Both terms are computable for an ellipsoid:
  // R(v) = (Σ (vᵢ/rᵢ)²)^{−1/2}, and ∮ R dΩ by midpoint quadrature.
  const auto& r = sample.surface.radii;
  const double exact = 4.0 / 3.0 * std::numbers::pi * r[0] * r[1] * r[2];
  const double w = (sp[0] + sp[1] + sp[2]) / 3.0;
  double ray_integral = 0.0;
  const int nt = 256, np = 128;
  for (int i = 0; i < nt; ++i) {
    const double theta = 2.0 * std::numbers::pi * (i + 0.5) / nt;
    for (int j = 0; j < np; ++j) {
      const double phi = -0.5 * std::numbers::pi + std::numbers::pi * (j + 0.5) / np;
      const double vx = std::cos(phi) * std::cos(theta) / r[0];
      const double vy = std::cos(phi) * std::sin(theta) / r[1];
      const double vz = std::sin(phi) / r[2];
      ray_integral += std::cos(phi) / std::sqrt(vx * vx + vy * vy + vz * vz);
    }
  }
  ray_integral *= (2.0 * std::numbers::pi / nt) * (std::numbers::pi / np);
  const double predicted =
      exact + std::numbers::pi * std::numbers::pi / 3.0 * w * w * ray_integral;
  // 0.5% absorbs grid discretization and the logistic tail clipped at the
  // field-of-view boundary.
  CHECK(std::abs(integral - predicted) / exact < 0.005);
}

TEST_CASE("generation is deterministic and thread-count invariant") {
  auto family = small_family(FamilyKind::ellipsoid_bump, /*seed=*/71);
  auto a = deepssm::generate_population(family, 5, /*threads=*/1);
  auto b = deepssm::generate_population(family, 5, /*threads=*/3);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].volume.data == b[i].volume.data);  // bit-exact
    CHECK(a[i].correspondences.points == b[i].correspondences.points);
    CHECK(a[i].label == b[i].label);
    CHECK(a[i].surface.radii == b[i].surface.radii);
  }

  auto c = deepssm::generate_population(small_family(FamilyKind::ellipsoid_bump, 72), 5);
  CHECK(c[0].surface.radii != a[0].surface.radii);  // seed matters

  auto noisy_family = family;
  noisy_family.noise = 0.05;
  auto noisy = deepssm::generate_population(noisy_family, 5);
  CHECK(noisy[0].volume.data != a[0].volume.data);
  auto noisy2 = deepssm::generate_population(noisy_family, 5);
  CHECK(noisy[0].volume.data == noisy2[0].volume.data);  // still deterministic
}

TEST_CASE("family validation rejects malformed configurations") {
  auto ok = small_family(FamilyKind::ellipsoid_linear);
  CHECK_NOTHROW(ok.validate());

  auto few = ok;
  few.particles = 8;  // M ≥ 12 required
  CHECK_THROWS_AS(few.validate(), std::invalid_argument);

  auto inverted = ok;
  inverted.radii_min[1] = inverted.radii_max[1] + 1.0;
  CHECK_THROWS_AS(inverted.validate(), std::invalid_argument);

  auto too_big = ok;
  too_big.radii_max = {40.0, 40.0, 40.0};  // exceeds the grid field of view
  CHECK_THROWS_AS(too_big.validate(), std::invalid_argument);

  auto bad_fraction = small_family(FamilyKind::ellipsoid_bump);
  bad_fraction.pathological_fraction = 1.5;
  CHECK_THROWS_AS(bad_fraction.validate(), std::invalid_argument);

  auto bad_noise = ok;
  bad_noise.noise = -0.1;
  CHECK_THROWS_AS(bad_noise.validate(), std::invalid_argument);

  CHECK_THROWS_AS(static_cast<void>(deepssm::generate_population(ok, 1)),
                  std::invalid_argument);
  CHECK_THROWS_AS(static_cast<void>(deepssm::generate_population(ok, 4, 0)),
                  std::invalid_argument);
}

// ---- analytic distances -----------------------------------------------------------------

TEST_CASE("analytic distance to a sphere is the radial formula") {
  SurfaceSpec sphere;
  sphere.kind = FamilyKind::ellipsoid_linear;
  sphere.center = {1.0, -1.0, 2.0};
  sphere.radii = {6.0, 6.0, 6.0};

  deepssm::Rng rng(81);
  for (int i = 0; i < 30; ++i) {
    Point3 p = {sphere.center[0] + 8 * rng.normal(),
                sphere.center[1] + 8 * rng.normal(),
                sphere.center[2] + 8 * rng.normal()};
    double expect = std::abs(norm3(minus(p, sphere.center)) - 6.0);  // [DERIVED]
    CHECK(deepssm::analytic_surface_distance(sphere, p) ==
          doctest::Approx(expect).epsilon(1e-9).scale(1.0));
  }
  // The center is exactly one radius away.
  CHECK(deepssm::analytic_surface_distance(sphere, sphere.center) ==
        doctest::Approx(6.0).epsilon(1e-9));
}

TEST_CASE("ellipsoid distance agrees with a dense parametric oracle") {
  SurfaceSpec s;
  s.kind = FamilyKind::ellipsoid_linear;
  s.center = {0.5, 0.0, -1.0};
  s.radii = {4.0, 5.5, 7.0};

  // The center's nearest surface point is a semi-minor axis tip. [DERIVED]
  CHECK(deepssm::analytic_surface_distance(s, s.center) ==
        doctest::Approx(4.0).epsilon(1e-9));

  deepssm::Rng rng(91);
  for (int i = 0; i < 10; ++i) {
    Point3 p = {s.center[0] + 6 * rng.normal(), s.center[1] + 6 * rng.normal(),
                s.center[2] + 6 * rng.normal()};
    double exact = deepssm::analytic_surface_distance(s, p);
    double dense = ts::dense_surface_distance(s, p, 600, 300);  // [DERIVED]
    CHECK(exact <= dense + 1e-9);  // the dense grid only overestimates
    CHECK(dense - exact < 0.05);
  }

  // Points on the surface have zero distance.
  for (auto [theta, phi] : deepssm::sphere_parameter_samples(20)) {
    Point3 p = deepssm::parametric_point(s, theta, phi);
    CHECK(deepssm::analytic_surface_distance(s, p) < 1e-8);
  }
}

TEST_CASE("bumped and twisted distances stay close to the dense oracle") {
  std::vector<SurfaceSpec> specs(2);
  specs[0].kind = FamilyKind::ellipsoid_bump;
  specs[0].bump_amplitude = 0.2;
  specs[0].bump_width = 0.9;
  specs[1].kind = FamilyKind::twisted;
  specs[1].twist_rate = 0.7;
  for (auto& s : specs) s.radii = {4.0, 5.0, 6.0};

  deepssm::Rng rng(101);
  for (const auto& s : specs) {
    for (auto [theta, phi] : deepssm::sphere_parameter_samples(16))
      CHECK(deepssm::analytic_surface_distance(
                s, deepssm::parametric_point(s, theta, phi)) < 1e-6);
    for (int i = 0; i < 5; ++i) {
      Point3 p = {5 * rng.normal(), 5 * rng.normal(), 5 * rng.normal()};
      double refined = deepssm::analytic_surface_distance(s, p);
      double dense = ts::dense_surface_distance(s, p, 600, 300);
      CHECK(std::abs(refined - dense) < 0.05);
    }
  }
}
