#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "deepssm/correspondence.hpp"
#include "deepssm/networks.hpp"

namespace deepssm {

/// Mean-shape displacement between two groups, anchored on group A's mean:
/// the heatmap field is |μ_a − μ_b| per point, normalized by its maximum.
struct GroupDifference {
  CorrespondenceSet anchor;          // μ_a
  std::vector<Point3> displacement;  // μ_a − μ_b, per point
  std::vector<double> magnitude;     // |displacement| / max (zeros when equal)
};

GroupDifference group_difference(const std::vector<CorrespondenceSet>& group_a,
                                 const std::vector<CorrespondenceSet>& group_b);

/// Decode points along the latent line between the two group-mean latents:
/// C_λ = h((1−λ)·μ_a + λ·μ_b) at λ = 0, 1/(steps−1), …, 1. steps ≥ 2.
std::vector<CorrespondenceSet> latent_swim(TlDeepSSM& model,
                                           const std::vector<CorrespondenceSet>& group_a,
                                           const std::vector<CorrespondenceSet>& group_b,
                                           std::size_t steps);

/// Indices of the k largest |mean(a) − mean(b)| descriptor entries, sorted by
/// descending magnitude; ties broken toward the lower index.
std::vector<std::size_t> trim_features(
    const std::vector<std::vector<double>>& descriptors_a,
    const std::vector<std::vector<double>>& descriptors_b, std::size_t k = 10);

struct ClassifierConfig {
  std::size_t selected_features = 10;  // trimmed via trim_features
  std::size_t hidden = 16;             // two hidden layers of this width
  std::size_t epochs = 300;            // full-batch Adam steps
  double learning_rate = 1e-2;
  std::uint64_t seed = 0;
};

/// Shape-descriptor classifier: feature trimming + per-feature
/// standardization + a small MLP with a single logit output.
class MlpClassifier {
 public:
  /// P(label == positive_label) for one descriptor.
  double predict(const std::vector<double>& descriptor);
  std::vector<double> predict_all(const std::vector<std::vector<double>>& descriptors);

  const std::vector<std::size_t>& selected() const { return selected_; }
  const std::array<int, 2>& classes() const { return classes_; }  // {neg, pos}

 private:
  friend MlpClassifier fit_classifier(const std::vector<std::vector<double>>&,
                                      const std::vector<int>&,
                                      const ClassifierConfig&);
  MlpClassifier() = default;
  std::size_t input_dim_ = 0;
  std::vector<std::size_t> selected_;
  std::vector<double> feature_mean_, feature_std_;
  nn::Sequential net_;
  std::array<int, 2> classes_{0, 1};
};

/// Train on full descriptors with two distinct integer labels (the smaller
/// becomes the negative class). Throws on a single-class set.
MlpClassifier fit_classifier(const std::vector<std::vector<double>>& descriptors,
                             const std::vector<int>& labels,
                             const ClassifierConfig& config);

/// Scores-vs-targets summary. AUC and accuracy@0.5 require binary {0,1}
/// targets and are NaN otherwise; correlations require both inputs to vary.
struct Metrics {
  double auc = 0.0;
  double pearson = 0.0;
  double spearman = 0.0;
  double accuracy = 0.0;
};

Metrics compute_metrics(const std::vector<double>& scores,
                        const std::vector<double>& targets);

}  // namespace deepssm
