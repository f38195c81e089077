#include "deepssm/correspondence.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace deepssm {

std::vector<double> CorrespondenceSet::flatten() const {
  std::vector<double> out;
  out.reserve(points.size() * 3);
  for (const Point3& p : points) {
    out.push_back(p[0]);
    out.push_back(p[1]);
    out.push_back(p[2]);
  }
  return out;
}

CorrespondenceSet CorrespondenceSet::from_flat(std::span<const double> values,
                                               std::string sample_id) {
  if (values.size() % 3 != 0) {
    throw std::invalid_argument("correspondences: flat length " +
                                std::to_string(values.size()) +
                                " is not a multiple of 3");
  }
  CorrespondenceSet set;
  set.sample_id = std::move(sample_id);
  set.points.resize(values.size() / 3);
  for (std::size_t i = 0; i < set.points.size(); ++i)
    set.points[i] = {values[3 * i], values[3 * i + 1], values[3 * i + 2]};
  return set;
}

void CorrespondenceSet::check_finite() const {
  for (std::size_t i = 0; i < points.size(); ++i)
    for (double v : points[i])
      if (!std::isfinite(v))
        throw std::invalid_argument("correspondences: non-finite coordinate at point " +
                                    std::to_string(i) +
                                    (sample_id.empty() ? "" : " of sample " + sample_id));
}

void check_consistent_sizes(const std::vector<CorrespondenceSet>& population) {
  if (population.empty())
    throw std::invalid_argument("correspondences: empty population");
  const std::size_t m = population.front().size();
  if (m == 0) throw std::invalid_argument("correspondences: empty point set");
  for (const auto& set : population) {
    if (set.size() != m) {
      throw std::invalid_argument(
          "correspondences: sample " + set.sample_id + " has " +
          std::to_string(set.size()) + " points, expected " + std::to_string(m));
    }
  }
}

CorrespondenceSet read_particles(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("particles: cannot open " + path.string());
  CorrespondenceSet set;
  set.sample_id = path.stem().string();
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    std::istringstream ls(line);
    Point3 p{};
    if (!(ls >> p[0])) {
      // Blank (or whitespace-only) lines are tolerated; anything else is not.
      std::string token;
      std::istringstream probe(line);
      if (probe >> token)
        throw std::runtime_error("particles: " + path.string() + ":" +
                                 std::to_string(line_no) + ": expected a coordinate, got '" +
                                 token + "'");
      continue;
    }
    if (!(ls >> p[1] >> p[2]))
      throw std::runtime_error("particles: " + path.string() + ":" +
                               std::to_string(line_no) + ": expected three coordinates");
    std::string extra;
    if (ls >> extra)
      throw std::runtime_error("particles: " + path.string() + ":" +
                               std::to_string(line_no) + ": unexpected trailing token '" +
                               extra + "'");
    set.points.push_back(p);
  }
  if (set.points.empty())
    throw std::runtime_error("particles: " + path.string() + " contains no points");
  return set;
}

namespace {
void format_value(std::string& out, double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  out += buf;
}
}  // namespace

void write_particles(const CorrespondenceSet& set, const std::filesystem::path& path) {
  std::string text;
  text.reserve(set.points.size() * 72);
  for (const Point3& p : set.points) {
    format_value(text, p[0]);
    text += ' ';
    format_value(text, p[1]);
    text += ' ';
    format_value(text, p[2]);
    text += '\n';
  }
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("particles: cannot write " + path.string());
  os << text;
  os.flush();
  if (!os) throw std::runtime_error("particles: write failed for " + path.string());
}

void write_particles_with_scalar(const CorrespondenceSet& set,
                                 std::span<const double> scalars,
                                 const std::filesystem::path& path) {
  if (scalars.size() != set.points.size())
    throw std::invalid_argument("particles: scalar column length " +
                                std::to_string(scalars.size()) + " does not match " +
                                std::to_string(set.points.size()) + " points");
  std::string text;
  text.reserve(set.points.size() * 96);
  for (std::size_t i = 0; i < set.points.size(); ++i) {
    const Point3& p = set.points[i];
    format_value(text, p[0]);
    text += ' ';
    format_value(text, p[1]);
    text += ' ';
    format_value(text, p[2]);
    text += ' ';
    format_value(text, scalars[i]);
    text += '\n';
  }
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("particles: cannot write " + path.string());
  os << text;
  os.flush();
  if (!os) throw std::runtime_error("particles: write failed for " + path.string());
}

}  // namespace deepssm
