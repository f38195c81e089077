// Microbenchmarks for the pipeline's hot paths: 3D convolution, end-to-end
// single-volume inference, and TPS volume warping.

#include <cstdint>
#include <vector>

#include <benchmark/benchmark.h>

#include "deepssm/augment.hpp"
#include "deepssm/layers.hpp"
#include "deepssm/networks.hpp"
#include "deepssm/ops.hpp"
#include "deepssm/rng.hpp"
#include "deepssm/shape_model.hpp"
#include "deepssm/synthbench.hpp"
#include "deepssm/tps.hpp"
#include "deepssm/volume.hpp"

namespace {

using namespace deepssm;

std::vector<GroundTruthSample> make_population(std::size_t n, std::size_t particles) {
  SyntheticFamily family;
  family.particles = particles;
  family.seed = 7;
  return generate_population(family, n);
}

void BM_Conv3dForward(benchmark::State& state) {
  nn::set_compute_threads(1);
  Rng rng(11);
  nn::Conv3d conv(12, 24, 3, rng);
  const std::size_t d = static_cast<std::size_t>(state.range(0));
  nn::Tensor x({1, 12, d, d, d});
  Rng data_rng(13);
  for (double& v : x.values()) v = data_rng.normal();
  for (auto _ : state) {
    nn::Tensor y = conv.forward(nullptr, x, false);
    benchmark::DoNotOptimize(y.data());
  }
}
BENCHMARK(BM_Conv3dForward)->Arg(8)->Arg(16)->Unit(benchmark::kMillisecond);

void BM_BaseInference(benchmark::State& state) {
  nn::set_compute_threads(1);
  const auto population = make_population(12, 32);
  std::vector<CorrespondenceSet> shapes;
  for (const auto& s : population) shapes.push_back(s.correspondences);
  const ShapeModel model = fit_pca(shapes, 8);
  BaseDeepSSM net(model, population[0].volume.grid.extents, 3);
  for (auto _ : state) {
    InferenceResult result = net.infer(population[0].volume);
    benchmark::DoNotOptimize(result.descriptor.data());
  }
}
BENCHMARK(BM_BaseInference)->Unit(benchmark::kMillisecond);

void BM_TpsWarpVolume(benchmark::State& state) {
  const auto population = make_population(2, 64);
  const CorrespondenceSet& source = population[0].correspondences;
  const CorrespondenceSet& target = population[1].correspondences;
  const Volume& image = population[0].volume;
  const TpsWarp warp = fit_tps(source, target, tps_default_regularization(source));
  for (auto _ : state) {
    Volume out;
    out.grid = image.grid;
    out.data.resize(image.grid.voxel_count());
    std::size_t flat = 0;
    for (std::size_t z = 0; z < out.grid.dim_z(); ++z) {
      for (std::size_t y = 0; y < out.grid.dim_y(); ++y) {
        for (std::size_t x = 0; x < out.grid.dim_x(); ++x, ++flat) {
          out.data[flat] =
              image.sample_trilinear(warp.apply(out.voxel_center(x, y, z)), 0.0);
        }
      }
    }
    benchmark::DoNotOptimize(out.data.data());
  }
}
BENCHMARK(BM_TpsWarpVolume)->Unit(benchmark::kMillisecond);

void BM_TpsFit(benchmark::State& state) {
  const auto population = make_population(2, static_cast<std::size_t>(state.range(0)));
  const CorrespondenceSet& source = population[0].correspondences;
  const CorrespondenceSet& target = population[1].correspondences;
  const double lambda = tps_default_regularization(source);
  for (auto _ : state) {
    TpsWarp warp = fit_tps(source, target, lambda);
    benchmark::DoNotOptimize(warp.kernel_weights.data());
  }
}
BENCHMARK(BM_TpsFit)->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
