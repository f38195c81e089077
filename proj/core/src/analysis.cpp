#include "deepssm/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "deepssm/optimizer.hpp"
#include "deepssm/rng.hpp"

namespace deepssm {

using nn::Tensor;

namespace {

CorrespondenceSet group_mean(const std::vector<CorrespondenceSet>& group,
                             const char* which) {
  if (group.empty())
    throw std::invalid_argument(std::string("group difference: group ") + which +
                                " is empty");
  check_consistent_sizes(group);
  CorrespondenceSet mean;
  mean.sample_id = std::string("mean_") + which;
  mean.points.assign(group.front().size(), Point3{0.0, 0.0, 0.0});
  for (const auto& sample : group)
    for (std::size_t j = 0; j < mean.points.size(); ++j)
      for (int c = 0; c < 3; ++c) mean.points[j][c] += sample.points[j][c];
  for (auto& p : mean.points)
    for (int c = 0; c < 3; ++c) p[c] /= static_cast<double>(group.size());
  return mean;
}

std::vector<double> mean_descriptor(const std::vector<std::vector<double>>& group,
                                    const char* which) {
  if (group.empty())
    throw std::invalid_argument(std::string("trim: descriptor group ") + which +
                                " is empty");
  const std::size_t d = group.front().size();
  std::vector<double> mean(d, 0.0);
  for (const auto& v : group) {
    if (v.size() != d)
      throw std::invalid_argument("trim: inconsistent descriptor dimensions");
    for (std::size_t i = 0; i < d; ++i) mean[i] += v[i];
  }
  for (double& v : mean) v /= static_cast<double>(group.size());
  return mean;
}

/// 1-based ranks with ties assigned their average rank.
std::vector<double> average_ranks(const std::vector<double>& values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&values](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t s = i; s <= j; ++s) ranks[order[s]] = rank;
    i = j + 1;
  }
  return ranks;
}

double pearson_correlation(const std::vector<double>& x, const std::vector<double>& y) {
  const auto n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (!(sxx > 0.0) || !(syy > 0.0))
    throw std::invalid_argument("metrics: zero-variance input — correlation undefined");
  return sxy / std::sqrt(sxx * syy);
}

Tensor rows_tensor(const std::vector<std::vector<double>>& rows) {
  const std::size_t n = rows.size(), d = rows.front().size();
  Tensor t({n, d});
  double* out = t.data();
  for (const auto& r : rows) {
    std::copy(r.begin(), r.end(), out);
    out += d;
  }
  return t;
}

}  // namespace

GroupDifference group_difference(const std::vector<CorrespondenceSet>& group_a,
                                 const std::vector<CorrespondenceSet>& group_b) {
  GroupDifference diff;
  diff.anchor = group_mean(group_a, "a");
  const CorrespondenceSet mean_b = group_mean(group_b, "b");
  if (mean_b.size() != diff.anchor.size())
    throw std::invalid_argument("group difference: groups have different point counts");

  const std::size_t m = diff.anchor.size();
  diff.displacement.resize(m);
  diff.magnitude.resize(m);
  double max_mag = 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    for (int c = 0; c < 3; ++c)
      diff.displacement[j][c] = diff.anchor.points[j][c] - mean_b.points[j][c];
    const Point3& d = diff.displacement[j];
    diff.magnitude[j] = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
    max_mag = std::max(max_mag, diff.magnitude[j]);
  }
  if (max_mag > 0.0)
    for (double& v : diff.magnitude) v /= max_mag;
  return diff;
}

std::vector<CorrespondenceSet> latent_swim(TlDeepSSM& model,
                                           const std::vector<CorrespondenceSet>& group_a,
                                           const std::vector<CorrespondenceSet>& group_b,
                                           std::size_t steps) {
  if (steps < 2) throw std::invalid_argument("latent swim: need ≥ 2 steps");
  auto mean_latent = [&model](const std::vector<CorrespondenceSet>& group,
                              const char* which) {
    if (group.empty())
      throw std::invalid_argument(std::string("latent swim: group ") + which +
                                  " is empty");
    std::vector<std::vector<double>> rows;
    rows.reserve(group.size());
    for (const auto& s : group) {
      if (s.size() != model.num_points())
        throw std::invalid_argument(
            "latent swim: correspondence count does not match the model");
      rows.push_back(s.flatten());
    }
    Tensor latents = model.encode(nullptr, rows_tensor(rows), /*training=*/false);
    const std::size_t l = model.bottleneck();
    std::vector<double> mean(l, 0.0);
    const double* in = latents.data();
    for (std::size_t i = 0; i < group.size(); ++i)
      for (std::size_t c = 0; c < l; ++c) mean[c] += *in++;
    for (double& v : mean) v /= static_cast<double>(group.size());
    return mean;
  };

  const std::vector<double> mu_a = mean_latent(group_a, "a");
  const std::vector<double> mu_b = mean_latent(group_b, "b");

  std::vector<CorrespondenceSet> sequence;
  sequence.reserve(steps);
  for (std::size_t i = 0; i < steps; ++i) {
    const double lambda = static_cast<double>(i) / static_cast<double>(steps - 1);
    Tensor z({1, mu_a.size()});
    for (std::size_t c = 0; c < mu_a.size(); ++c)
      z.data()[c] = (1.0 - lambda) * mu_a[c] + lambda * mu_b[c];
    Tensor decoded = model.decode(nullptr, z, /*training=*/false);
    CorrespondenceSet shape = CorrespondenceSet::from_flat(
        {decoded.data(), decoded.size()}, "swim_" + std::to_string(i));
    shape.check_finite();
    sequence.push_back(std::move(shape));
  }
  return sequence;
}

std::vector<std::size_t> trim_features(
    const std::vector<std::vector<double>>& descriptors_a,
    const std::vector<std::vector<double>>& descriptors_b, std::size_t k) {
  const std::vector<double> mean_a = mean_descriptor(descriptors_a, "a");
  const std::vector<double> mean_b = mean_descriptor(descriptors_b, "b");
  if (mean_a.size() != mean_b.size())
    throw std::invalid_argument("trim: groups have different descriptor dimensions");
  if (k == 0) throw std::invalid_argument("trim: k must be ≥ 1");
  if (k > mean_a.size()) k = mean_a.size();  // every entry is among the k largest

  std::vector<double> diff(mean_a.size());
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = std::abs(mean_a[i] - mean_b[i]);

  std::vector<std::size_t> order(diff.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&diff](std::size_t a, std::size_t b) {
    return diff[a] > diff[b];  // stable: equal magnitudes keep ascending index order
  });
  order.resize(k);
  return order;
}

double MlpClassifier::predict(const std::vector<double>& descriptor) {
  if (descriptor.size() != input_dim_)
    throw std::invalid_argument("classifier: descriptor has dimension " +
                                std::to_string(descriptor.size()) + ", trained on " +
                                std::to_string(input_dim_));
  Tensor x({1, selected_.size()});
  for (std::size_t i = 0; i < selected_.size(); ++i)
    x.data()[i] = (descriptor[selected_[i]] - feature_mean_[i]) / feature_std_[i];
  const double logit = net_.forward(nullptr, x, /*training=*/false).item();
  return logit >= 0.0 ? 1.0 / (1.0 + std::exp(-logit))
                      : std::exp(logit) / (1.0 + std::exp(logit));
}

std::vector<double> MlpClassifier::predict_all(
    const std::vector<std::vector<double>>& descriptors) {
  std::vector<double> probs;
  probs.reserve(descriptors.size());
  for (const auto& d : descriptors) probs.push_back(predict(d));
  return probs;
}

MlpClassifier fit_classifier(const std::vector<std::vector<double>>& descriptors,
                             const std::vector<int>& labels,
                             const ClassifierConfig& config) {
  if (descriptors.empty()) throw std::invalid_argument("classifier: no training data");
  if (descriptors.size() != labels.size())
    throw std::invalid_argument("classifier: descriptor/label count mismatch");
  if (config.selected_features == 0 || config.hidden == 0 || config.epochs == 0 ||
      !(config.learning_rate > 0.0))
    throw std::invalid_argument("classifier: invalid config");

  std::vector<int> distinct(labels);
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  if (distinct.size() < 2)
    throw std::invalid_argument("classifier: single-class training set");
  if (distinct.size() > 2)
    throw std::invalid_argument("classifier: binary labels required, got " +
                                std::to_string(distinct.size()) + " classes");

  MlpClassifier model;
  model.classes_ = {distinct[0], distinct[1]};
  model.input_dim_ = descriptors.front().size();

  std::vector<std::vector<double>> negatives, positives;
  for (std::size_t i = 0; i < labels.size(); ++i)
    (labels[i] == distinct[0] ? negatives : positives).push_back(descriptors[i]);

  const std::size_t k = std::min(config.selected_features, model.input_dim_);
  model.selected_ = trim_features(negatives, positives, k);

  // Standardize the selected columns over the whole training set.
  const std::size_t n = descriptors.size();
  model.feature_mean_.assign(k, 0.0);
  model.feature_std_.assign(k, 0.0);
  for (const auto& d : descriptors) {
    if (d.size() != model.input_dim_)
      throw std::invalid_argument("classifier: inconsistent descriptor dimensions");
    for (std::size_t i = 0; i < k; ++i) model.feature_mean_[i] += d[model.selected_[i]];
  }
  for (double& v : model.feature_mean_) v /= static_cast<double>(n);
  for (const auto& d : descriptors)
    for (std::size_t i = 0; i < k; ++i) {
      const double diff = d[model.selected_[i]] - model.feature_mean_[i];
      model.feature_std_[i] += diff * diff;
    }
  for (double& v : model.feature_std_) {
    v = std::sqrt(v / static_cast<double>(n));
    if (v < 1e-12) v = 1.0;  // constant feature: center only
  }

  Rng rng(config.seed);
  model.net_.emplace<nn::Linear>(k, config.hidden, rng);
  model.net_.emplace<nn::LeakyRelu>(0.01);
  model.net_.emplace<nn::Linear>(config.hidden, config.hidden, rng);
  model.net_.emplace<nn::LeakyRelu>(0.01);
  model.net_.emplace<nn::Linear>(config.hidden, 1, rng);

  Tensor x({n, k});
  Tensor y({n, 1});
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t i = 0; i < k; ++i)
      x.data()[s * k + i] = (descriptors[s][model.selected_[i]] -
                             model.feature_mean_[i]) / model.feature_std_[i];
    y.data()[s] = labels[s] == distinct[1] ? 1.0 : 0.0;
  }

  nn::AdamConfig adam_cfg;
  adam_cfg.learning_rate = config.learning_rate;
  adam_cfg.weight_decay = 0.0;
  nn::Adam opt(model.net_.parameters(), adam_cfg);
  opt.set_learning_rate(config.learning_rate);
  for (std::size_t e = 0; e < config.epochs; ++e) {
    nn::Tape tape;
    Tensor logits = model.net_.forward(&tape, x, /*training=*/true);
    Tensor loss = nn::bce_with_logits(&tape, logits, y);
    if (!std::isfinite(loss.item()))
      throw std::runtime_error("classifier: non-finite loss at epoch " +
                               std::to_string(e + 1));
    opt.zero_grad();
    tape.backward(loss);
    opt.step();
  }
  return model;
}

Metrics compute_metrics(const std::vector<double>& scores,
                        const std::vector<double>& targets) {
  if (scores.size() != targets.size())
    throw std::invalid_argument("metrics: score/target length mismatch");
  if (scores.size() < 2) throw std::invalid_argument("metrics: need ≥ 2 values");

  Metrics m;
  m.pearson = pearson_correlation(scores, targets);
  m.spearman = pearson_correlation(average_ranks(scores), average_ranks(targets));

  bool binary = true;
  std::size_t positives = 0;
  for (double t : targets) {
    if (t == 1.0)
      ++positives;
    else if (t != 0.0)
      binary = false;
  }
  const std::size_t negatives = targets.size() - positives;
  if (binary && positives > 0 && negatives > 0) {
    const std::vector<double> ranks = average_ranks(scores);
    double positive_rank_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
      if (targets[i] == 1.0) positive_rank_sum += ranks[i];
      if ((scores[i] >= 0.5) == (targets[i] == 1.0)) ++correct;
    }
    const double np = static_cast<double>(positives);
    m.auc = (positive_rank_sum - np * (np + 1.0) / 2.0) /
            (np * static_cast<double>(negatives));
    m.accuracy = static_cast<double>(correct) / static_cast<double>(targets.size());
  } else {
    m.auc = std::numeric_limits<double>::quiet_NaN();
    m.accuracy = std::numeric_limits<double>::quiet_NaN();
  }
  return m;
}

}  // namespace deepssm
