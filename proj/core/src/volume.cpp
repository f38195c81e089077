#include "deepssm/volume.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace deepssm {

void GridSpec::validate() const {
  for (std::size_t e : extents)
    if (e < 1) throw std::invalid_argument("grid: extents must be ≥ 1");
  for (double s : spacing)
    if (!(s > 0.0)) throw std::invalid_argument("grid: spacing must be positive");
  for (double o : origin)
    if (!std::isfinite(o)) throw std::invalid_argument("grid: origin must be finite");
}

Volume::Volume(GridSpec g) : grid(g) {
  grid.validate();
  data.assign(grid.voxel_count(), 0.0);
}

double& Volume::at(std::size_t ix, std::size_t iy, std::size_t iz) {
  return data[(iz * grid.dim_y() + iy) * grid.dim_x() + ix];
}

double Volume::at(std::size_t ix, std::size_t iy, std::size_t iz) const {
  return data[(iz * grid.dim_y() + iy) * grid.dim_x() + ix];
}

Point3 Volume::voxel_center(std::size_t ix, std::size_t iy, std::size_t iz) const {
  return {grid.origin[0] + static_cast<double>(ix) * grid.spacing[0],
          grid.origin[1] + static_cast<double>(iy) * grid.spacing[1],
          grid.origin[2] + static_cast<double>(iz) * grid.spacing[2]};
}

double Volume::sample_trilinear(const Point3& world, double background) const {
  const double ux = (world[0] - grid.origin[0]) / grid.spacing[0];
  const double uy = (world[1] - grid.origin[1]) / grid.spacing[1];
  const double uz = (world[2] - grid.origin[2]) / grid.spacing[2];
  const double fx = std::floor(ux), fy = std::floor(uy), fz = std::floor(uz);
  const auto ix = static_cast<long long>(fx);
  const auto iy = static_cast<long long>(fy);
  const auto iz = static_cast<long long>(fz);
  const double tx = ux - fx, ty = uy - fy, tz = uz - fz;

  const auto nx = static_cast<long long>(grid.dim_x());
  const auto ny = static_cast<long long>(grid.dim_y());
  const auto nz = static_cast<long long>(grid.dim_z());
  auto fetch = [&](long long cx, long long cy, long long cz) {
    if (cx < 0 || cy < 0 || cz < 0 || cx >= nx || cy >= ny || cz >= nz)
      return background;
    return data[static_cast<std::size_t>((cz * ny + cy) * nx + cx)];
  };

  double value = 0.0;
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        const double w = (dx ? tx : 1.0 - tx) * (dy ? ty : 1.0 - ty) *
                         (dz ? tz : 1.0 - tz);
        if (w == 0.0) continue;  // keeps on-grid samples bit-exact
        value += w * fetch(ix + dx, iy + dy, iz + dz);
      }
  return value;
}

Volume resample(const Volume& src, const GridSpec& target_grid, double background) {
  Volume out(target_grid);
  std::size_t flat = 0;
  for (std::size_t iz = 0; iz < target_grid.dim_z(); ++iz)
    for (std::size_t iy = 0; iy < target_grid.dim_y(); ++iy)
      for (std::size_t ix = 0; ix < target_grid.dim_x(); ++ix, ++flat)
        out.data[flat] = src.sample_trilinear(out.voxel_center(ix, iy, iz), background);
  return out;
}

Volume downsample(const Volume& src, std::size_t factor) {
  if (factor < 1) throw std::invalid_argument("downsample: factor must be ≥ 1");
  if (factor == 1) return src;
  GridSpec g = src.grid;
  for (auto& e : g.extents) {
    e /= factor;
    if (e < 1) throw std::invalid_argument("downsample: extents too small for factor " +
                                           std::to_string(factor));
  }
  const double shift = static_cast<double>(factor - 1) / 2.0;
  for (int a = 0; a < 3; ++a) {
    g.origin[a] += shift * src.grid.spacing[a];
    g.spacing[a] *= static_cast<double>(factor);
  }
  return resample(src, g, 0.0);
}

namespace {

void write_f64_le(std::ostream& os, const double* values, std::size_t count) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(values),
             static_cast<std::streamsize>(count * sizeof(double)));
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      std::uint64_t bits;
      std::memcpy(&bits, &values[i], 8);
      unsigned char buf[8];
      for (int b = 0; b < 8; ++b) buf[b] = static_cast<unsigned char>(bits >> (8 * b));
      os.write(reinterpret_cast<const char*>(buf), 8);
    }
  }
}

void read_f64_le(std::istream& is, double* values, std::size_t count) {
  if constexpr (std::endian::native == std::endian::little) {
    is.read(reinterpret_cast<char*>(values),
            static_cast<std::streamsize>(count * sizeof(double)));
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      unsigned char buf[8];
      is.read(reinterpret_cast<char*>(buf), 8);
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(buf[b]) << (8 * b);
      std::memcpy(&values[i], &bits, 8);
    }
  }
}

std::filesystem::path sidecar_path(const std::filesystem::path& path) {
  return std::filesystem::path(path.string() + ".json");
}

}  // namespace

void write_volume(const Volume& volume, const std::filesystem::path& path) {
  volume.grid.validate();
  if (volume.data.size() != volume.grid.voxel_count())
    throw std::invalid_argument("volume: data length does not match extents");

  nlohmann::json header;
  header["extents"] = volume.grid.extents;
  header["spacing"] = volume.grid.spacing;
  header["origin"] = volume.grid.origin;
  header["dtype"] = "float64-le";
  {
    std::ofstream os(sidecar_path(path), std::ios::trunc);
    if (!os) throw std::runtime_error("volume: cannot write " + sidecar_path(path).string());
    os << header.dump(2) << '\n';
    if (!os) throw std::runtime_error("volume: write failed for " + sidecar_path(path).string());
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("volume: cannot write " + path.string());
  write_f64_le(os, volume.data.data(), volume.data.size());
  os.flush();
  if (!os) throw std::runtime_error("volume: write failed for " + path.string());
}

Volume read_volume(const std::filesystem::path& path) {
  std::ifstream hs(sidecar_path(path));
  if (!hs)
    throw std::runtime_error("volume: missing sidecar " + sidecar_path(path).string());
  nlohmann::json header;
  try {
    hs >> header;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("volume: malformed sidecar " + sidecar_path(path).string() +
                             ": " + e.what());
  }
  GridSpec g;
  g.extents = header.at("extents").get<std::array<std::size_t, 3>>();
  g.spacing = header.at("spacing").get<std::array<double, 3>>();
  g.origin = header.at("origin").get<std::array<double, 3>>();
  g.validate();
  if (header.value("dtype", "float64-le") != "float64-le")
    throw std::runtime_error("volume: unsupported dtype in " + sidecar_path(path).string());

  Volume volume(g);
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("volume: cannot open " + path.string());
  read_f64_le(is, volume.data.data(), volume.data.size());
  if (!is)
    throw std::runtime_error("volume: " + path.string() + " shorter than " +
                             std::to_string(volume.data.size()) + " float64 values");
  return volume;
}

}  // namespace deepssm
