#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "deepssm/layers.hpp"
#include "deepssm/shape_model.hpp"
#include "deepssm/volume.hpp"

namespace deepssm {

// ---- focal loss -------------------------------------------------------------

/// f(e) = e² / (1 + exp(a·(c − e))): squared error gated off below the
/// threshold c with sharpness a.
struct FocalParams {
  double a = 0.0;
  double c = 0.0;
  void validate() const;  // a > 0, c > 0
};

double focal_kernel(double e, const FocalParams& params);

/// Default sharpness: 10 when the loss is applied per 3D particle, 1 when it
/// is applied to a whole latent vector. Any other context is an error.
double focal_a_default(const std::string& context);

/// Linear-interpolation percentile (inclusive convention): q in [0,1] maps to
/// position q·(n−1) between the sorted order statistics.
double percentile(std::vector<double> values, double q);

/// c = 90th percentile of S(i,j) = ||C_iʲ − μʲ|| over all samples i and
/// particles j. Throws if the result is not positive (degenerate population).
double focal_c_heuristic(const std::vector<CorrespondenceSet>& population,
                         const CorrespondenceSet& mean_shape);

/// Latent-space analog: 90th percentile of ||S_i − mean(S)|| over whole
/// descriptor vectors.
double focal_c_latent(const std::vector<std::vector<double>>& descriptors);

// ---- losses (batched, tape-aware) -------------------------------------------

/// Mean over the batch of the squared L2 distance between flattened
/// correspondence vectors: pred, target are [N, 3M].
nn::Tensor loss_corr(nn::Tape* tape, const nn::Tensor& pred, const nn::Tensor& target);

/// Same form over PCA score vectors [N, L].
nn::Tensor loss_pca(nn::Tape* tape, const nn::Tensor& pred, const nn::Tensor& target);

/// Focal loss per 3D particle, averaged over particles and batch; [N, 3M].
nn::Tensor loss_focal_particles(nn::Tape* tape, const nn::Tensor& pred,
                                const nn::Tensor& target, const FocalParams& params);

/// Focal loss on whole row vectors (latent descriptors), averaged over batch.
nn::Tensor loss_focal_vector(nn::Tape* tape, const nn::Tensor& pred,
                             const nn::Tensor& target, const FocalParams& params);

// ---- architectures -----------------------------------------------------------

/// The Appendix-A image encoder: five 3×3×3 conv blocks (conv → batch norm →
/// PReLU) with channels [12, 24, 48, 96, 192] and 2× max pooling after conv
/// 1, 3 and 5, then fully connected 384 → 96 → `out_dim` (PReLU on the first
/// two, linear output).
nn::Sequential make_image_encoder(const std::array<std::size_t, 3>& input_dhw,
                                  std::size_t out_dim, Rng& rng);

/// Correspondence autoencoder: two fully connected layers per side with a
/// leaky-ReLU between them; encoder 3M → hidden → bottleneck, decoder
/// bottleneck → hidden → 3M, both with linear outputs.
nn::Sequential make_correspondence_encoder(std::size_t dim, std::size_t hidden,
                                           std::size_t bottleneck, Rng& rng);
nn::Sequential make_correspondence_decoder(std::size_t dim, std::size_t hidden,
                                           std::size_t bottleneck, Rng& rng);

struct InferenceResult {
  CorrespondenceSet correspondences;
  std::vector<double> descriptor;  // PCA scores (Base) or latent vector (TL)
};

/// Standardize one volume to zero mean / unit variance (the per-volume input
/// normalization applied before the encoder) and return it as [1,1,D,H,W].
nn::Tensor standardized_input(const Volume& volume);

/// Just the standardized voxel values (helper shared with batch assembly).
std::vector<double> standardized_voxels(const Volume& volume);

/// CNN regressor to PCA scores with the frozen PCA-reconstruction layer:
/// Ĉ = r_φ(f_θ(I)), where r_φ's weight is the PCA basis and bias the mean.
class BaseDeepSSM {
 public:
  BaseDeepSSM(const ShapeModel& shape_model, const std::array<std::size_t, 3>& input_dhw,
              std::uint64_t seed);

  nn::Tensor predict_scores(nn::Tape* tape, const nn::Tensor& volumes, bool training);
  nn::Tensor reconstruct_correspondences(nn::Tape* tape, const nn::Tensor& scores);

  InferenceResult infer(const Volume& volume);

  nn::Sequential& encoder() { return encoder_; }
  nn::FixedLinear& fixed_layer() { return *fixed_; }
  std::vector<nn::Tensor> trainable_parameters() { return encoder_.parameters(); }

  std::size_t num_modes() const { return num_modes_; }
  std::array<std::size_t, 3> input_dhw() const { return input_dhw_; }

  void save(const std::filesystem::path& path,
            const std::map<std::string, double>& extra_meta = {}) const;
  static BaseDeepSSM load(const std::filesystem::path& path);

 private:
  BaseDeepSSM() = default;
  nn::Sequential encoder_;
  nn::Sequential reconstruction_;  // single FixedLinear, kept in a stack for IO
  nn::FixedLinear* fixed_ = nullptr;
  std::size_t num_modes_ = 0;
  std::array<std::size_t, 3> input_dhw_{};
};

/// Two-branch model: correspondence autoencoder (g_φ, h_η) plus the image
/// "T-flank" f_θ regressing into the shared latent space.
class TlDeepSSM {
 public:
  TlDeepSSM(std::size_t num_points, const std::array<std::size_t, 3>& input_dhw,
            std::size_t bottleneck, std::size_t hidden, std::uint64_t seed);

  nn::Tensor encode(nn::Tape* tape, const nn::Tensor& correspondences, bool training);
  nn::Tensor decode(nn::Tape* tape, const nn::Tensor& latents, bool training);
  nn::Tensor flank(nn::Tape* tape, const nn::Tensor& volumes, bool training);

  InferenceResult infer(const Volume& volume);

  nn::Sequential& ae_encoder() { return ae_encoder_; }
  nn::Sequential& ae_decoder() { return ae_decoder_; }
  nn::Sequential& t_flank() { return t_flank_; }
  std::vector<nn::Tensor> autoencoder_parameters() const;
  std::vector<nn::Tensor> flank_parameters() { return t_flank_.parameters(); }
  std::vector<nn::Tensor> all_parameters() const;

  std::size_t bottleneck() const { return bottleneck_; }
  std::size_t num_points() const { return num_points_; }
  std::array<std::size_t, 3> input_dhw() const { return input_dhw_; }

  void save(const std::filesystem::path& path,
            const std::map<std::string, double>& extra_meta = {}) const;
  static TlDeepSSM load(const std::filesystem::path& path);

 private:
  TlDeepSSM() = default;
  nn::Sequential ae_encoder_, ae_decoder_, t_flank_;
  std::size_t num_points_ = 0, bottleneck_ = 0, hidden_ = 0;
  std::array<std::size_t, 3> input_dhw_{};
};

/// λ1·L_auto + λ2·L_tf for one batch (Eqs. 4–6); when `focal` is set, its
/// first element gates the per-particle autoencoder term and the second the
/// whole-vector latent term.
struct TlLossTerms {
  nn::Tensor total;
  double auto_term = 0.0;  // forward values, for history logging
  double tf_term = 0.0;
};
TlLossTerms loss_tl(nn::Tape* tape, TlDeepSSM& model, const nn::Tensor& correspondences,
                    const nn::Tensor& volumes, double lambda1, double lambda2,
                    const std::pair<FocalParams, FocalParams>* focal, bool training);

}  // namespace deepssm
