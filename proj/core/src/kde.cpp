#include "deepssm/kde.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace deepssm {

namespace {

double squared_distance(const ScoreVector& a, const ScoreVector& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

void validate_scores(const std::vector<ScoreVector>& scores) {
  if (scores.size() < 2)
    throw std::invalid_argument("kde: need at least 2 score vectors, got " +
                                std::to_string(scores.size()));
  const std::size_t l = scores.front().size();
  if (l == 0) throw std::invalid_argument("kde: empty score vectors");
  for (const auto& z : scores)
    if (z.size() != l)
      throw std::invalid_argument("kde: inconsistent score lengths");
}

}  // namespace

KdeModel fit_kde(const std::vector<ScoreVector>& scores) {
  validate_scores(scores);
  double sum_nn = 0.0;
  for (std::size_t n = 0; n < scores.size(); ++n) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t m = 0; m < scores.size(); ++m) {
      if (m == n) continue;
      best = std::min(best, squared_distance(scores[n], scores[m]));
    }
    sum_nn += std::sqrt(best);
  }
  const double sigma = sum_nn / static_cast<double>(scores.size());
  if (sigma <= 0.0)
    throw std::invalid_argument(
        "kde: bandwidth is 0 — every score vector has an exact duplicate");
  KdeModel model;
  model.training_scores = scores;
  model.bandwidth = sigma;
  return model;
}

KdeModel kde_with_bandwidth(const std::vector<ScoreVector>& scores, double sigma) {
  validate_scores(scores);
  if (sigma < 0.0) throw std::invalid_argument("kde: bandwidth must be ≥ 0");
  KdeModel model;
  model.training_scores = scores;
  model.bandwidth = sigma;
  return model;
}

double kde_density(const KdeModel& model, std::span<const double> z) {
  const std::size_t l = model.training_scores.front().size();
  if (z.size() != l)
    throw std::invalid_argument("kde: query length " + std::to_string(z.size()) +
                                " does not match score length " + std::to_string(l));
  if (model.bandwidth <= 0.0)
    throw std::invalid_argument("kde: density undefined for bandwidth 0");
  const double s2 = model.bandwidth * model.bandwidth;
  const double log_norm =
      -0.5 * static_cast<double>(l) * std::log(2.0 * std::numbers::pi * s2);
  double sum = 0.0;
  for (const ScoreVector& zn : model.training_scores) {
    double d2 = 0.0;
    for (std::size_t i = 0; i < l; ++i) {
      const double d = z[i] - zn[i];
      d2 += d * d;
    }
    sum += std::exp(log_norm - d2 / (2.0 * s2));
  }
  return sum / static_cast<double>(model.training_scores.size());
}

KdeDraw kde_sample(const KdeModel& model, Rng& rng) {
  const std::size_t n = rng.uniform_index(model.training_scores.size());
  KdeDraw draw;
  draw.parent = n;
  draw.score = model.training_scores[n];
  for (double& v : draw.score) v += model.bandwidth * rng.normal();
  return draw;
}

}  // namespace deepssm
