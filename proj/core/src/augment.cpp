#include "deepssm/augment.hpp"

#include <stdexcept>

#include "deepssm/parallel.hpp"
#include "deepssm/tps.hpp"

namespace deepssm {

AugmentResult augment_population(const std::vector<Volume>& images,
                                 const std::vector<CorrespondenceSet>& correspondences,
                                 const ShapeModel& model, std::size_t count,
                                 std::uint64_t seed, double tps_lambda,
                                 std::size_t threads) {
  if (count < 1) throw std::invalid_argument("augment: count must be ≥ 1");
  if (images.size() != correspondences.size())
    throw std::invalid_argument("augment: " + std::to_string(images.size()) +
                                " images vs " + std::to_string(correspondences.size()) +
                                " correspondence sets");
  check_consistent_sizes(correspondences);
  if (correspondences.front().size() * 3 != model.dim())
    throw std::invalid_argument("augment: population does not match the shape model");

  std::vector<ScoreVector> scores;
  scores.reserve(correspondences.size());
  for (const auto& c : correspondences) scores.push_back(project(model, c));
  const KdeModel kde = fit_kde(scores);

  AugmentResult result;
  result.bandwidth = kde.bandwidth;
  result.samples.resize(count);
  parallel_for(count, threads, [&](std::size_t i) {
    try {
      Rng rng(mix_seed(seed, i));
      KdeDraw draw = kde_sample(kde, rng);
      AugmentedSample& sample = result.samples[i];
      sample.parent_id = draw.parent;
      sample.scores = std::move(draw.score);
      sample.correspondences = reconstruct(model, sample.scores);
      sample.correspondences.sample_id = "aug_" + std::to_string(i);

      const CorrespondenceSet& parent_corr = correspondences[sample.parent_id];
      const Volume& parent_image = images[sample.parent_id];
      const double lambda = tps_lambda >= 0.0
                                ? tps_lambda
                                : tps_default_regularization(sample.correspondences);
      // Backward warping: fit C_s → C_n so each output voxel pulls its
      // intensity from the parent image without holes.
      const TpsWarp warp = fit_tps(sample.correspondences, parent_corr, lambda);

      Volume out(parent_image.grid);
      std::size_t flat = 0;
      for (std::size_t iz = 0; iz < out.grid.dim_z(); ++iz)
        for (std::size_t iy = 0; iy < out.grid.dim_y(); ++iy)
          for (std::size_t ix = 0; ix < out.grid.dim_x(); ++ix, ++flat) {
            const Point3 pulled = warp.apply(out.voxel_center(ix, iy, iz));
            out.data[flat] = parent_image.sample_trilinear(pulled, 0.0);
          }
      sample.volume = std::move(out);
    } catch (const std::exception& e) {
      throw std::runtime_error("augment: draw " + std::to_string(i) + ": " + e.what());
    }
  });
  return result;
}

}  // namespace deepssm
