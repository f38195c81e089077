#include "deepssm/networks.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "deepssm/checkpoint.hpp"

namespace deepssm {

using nn::Sequential;
using nn::Tape;
using nn::Tensor;

// ---- focal loss -------------------------------------------------------------

void FocalParams::validate() const {
  if (!(a > 0.0) || !(c > 0.0))
    throw std::invalid_argument("focal: a and c must be positive (a=" +
                                std::to_string(a) + ", c=" + std::to_string(c) + ")");
}

double focal_kernel(double e, const FocalParams& params) {
  params.validate();
  // e²·sigmoid(a·(e−c)), written with a sign split so exp cannot overflow.
  const double u = params.a * (e - params.c);
  const double s = u >= 0.0 ? 1.0 / (1.0 + std::exp(-u))
                            : std::exp(u) / (1.0 + std::exp(u));
  return e * e * s;
}

double focal_a_default(const std::string& context) {
  if (context == "particle") return 10.0;
  if (context == "latent") return 1.0;
  throw std::invalid_argument("focal: unknown context '" + context +
                              "' (expected 'particle' or 'latent')");
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("percentile: empty input");
  if (q < 0.0 || q > 1.0)
    throw std::invalid_argument("percentile: q must be in [0,1]");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  if (lo + 1 >= values.size()) return values.back();
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[lo + 1] - values[lo]);
}

double focal_c_heuristic(const std::vector<CorrespondenceSet>& population,
                         const CorrespondenceSet& mean_shape) {
  check_consistent_sizes(population);
  const std::size_t m = mean_shape.size();
  if (population.front().size() != m)
    throw std::invalid_argument("focal: mean shape has " + std::to_string(m) +
                                " points, population has " +
                                std::to_string(population.front().size()));
  std::vector<double> deviations;
  deviations.reserve(population.size() * m);
  for (const auto& sample : population)
    for (std::size_t j = 0; j < m; ++j) {
      const double dx = sample.points[j][0] - mean_shape.points[j][0];
      const double dy = sample.points[j][1] - mean_shape.points[j][1];
      const double dz = sample.points[j][2] - mean_shape.points[j][2];
      deviations.push_back(std::sqrt(dx * dx + dy * dy + dz * dz));
    }
  const double c = percentile(std::move(deviations), 0.9);
  if (!(c > 0.0))
    throw std::invalid_argument(
        "focal: 90th-percentile deviation is 0 — population is (nearly) identical "
        "to the mean shape, threshold c undefined");
  return c;
}

double focal_c_latent(const std::vector<std::vector<double>>& descriptors) {
  if (descriptors.empty()) throw std::invalid_argument("focal: empty descriptor set");
  const std::size_t l = descriptors.front().size();
  std::vector<double> mean(l, 0.0);
  for (const auto& d : descriptors) {
    if (d.size() != l)
      throw std::invalid_argument("focal: inconsistent descriptor lengths");
    for (std::size_t i = 0; i < l; ++i) mean[i] += d[i];
  }
  for (double& v : mean) v /= static_cast<double>(descriptors.size());
  std::vector<double> norms;
  norms.reserve(descriptors.size());
  for (const auto& d : descriptors) {
    double s = 0.0;
    for (std::size_t i = 0; i < l; ++i) {
      const double diff = d[i] - mean[i];
      s += diff * diff;
    }
    norms.push_back(std::sqrt(s));
  }
  const double c = percentile(std::move(norms), 0.9);
  if (!(c > 0.0))
    throw std::invalid_argument("focal: latent descriptors are all identical, "
                                "threshold c undefined");
  return c;
}

// ---- losses ------------------------------------------------------------------

Tensor loss_corr(Tape* tape, const Tensor& pred, const Tensor& target) {
  return nn::sse_rows_mean(tape, pred, target);
}

Tensor loss_pca(Tape* tape, const Tensor& pred, const Tensor& target) {
  return nn::sse_rows_mean(tape, pred, target);
}

Tensor loss_focal_particles(Tape* tape, const Tensor& pred, const Tensor& target,
                            const FocalParams& params) {
  params.validate();
  return nn::focal_rows_mean(tape, pred, target, params.a, params.c, 3);
}

Tensor loss_focal_vector(Tape* tape, const Tensor& pred, const Tensor& target,
                         const FocalParams& params) {
  params.validate();
  if (pred.rank() != 2) throw std::invalid_argument("focal: expects [N,K] rows");
  return nn::focal_rows_mean(tape, pred, target, params.a, params.c, pred.dim(1));
}

// ---- architectures -----------------------------------------------------------

namespace {

std::array<std::size_t, 3> halve(const std::array<std::size_t, 3>& d) {
  return {d[0] / 2, d[1] / 2, d[2] / 2};
}

Tensor scaled(Tape* tape, const Tensor& t, double factor) {
  if (factor == 1.0) return t;
  // alpha·t + 0·t: reuses the two-term op; the zero branch contributes nothing.
  return nn::add_scaled(tape, t, factor, t, 0.0);
}

}  // namespace

Sequential make_image_encoder(const std::array<std::size_t, 3>& input_dhw,
                              std::size_t out_dim, Rng& rng) {
  for (std::size_t e : input_dhw)
    if (e < 8)
      throw std::invalid_argument(
          "encoder: each input extent must be ≥ 8 (three 2× poolings), got " +
          std::to_string(e));
  if (out_dim == 0) throw std::invalid_argument("encoder: output size must be ≥ 1");

  const std::size_t channels[5] = {12, 24, 48, 96, 192};
  std::array<std::size_t, 3> dhw = input_dhw;

  Sequential seq;
  std::size_t in_ch = 1;
  for (int i = 0; i < 5; ++i) {
    seq.emplace<nn::Conv3d>(in_ch, channels[i], 3, rng);
    seq.emplace<nn::BatchNorm>(channels[i]);
    seq.emplace<nn::PRelu>(channels[i]);
    if (i == 0 || i == 2 || i == 4) {
      seq.emplace<nn::MaxPool3d>(2);
      dhw = halve(dhw);
    }
    in_ch = channels[i];
  }
  seq.emplace<nn::Flatten>();
  const std::size_t flat = 192 * dhw[0] * dhw[1] * dhw[2];
  seq.emplace<nn::Linear>(flat, 384, rng);
  seq.emplace<nn::PRelu>(384);
  seq.emplace<nn::Linear>(384, 96, rng);
  seq.emplace<nn::PRelu>(96);
  seq.emplace<nn::Linear>(96, out_dim, rng);
  return seq;
}

Sequential make_correspondence_encoder(std::size_t dim, std::size_t hidden,
                                       std::size_t bottleneck, Rng& rng) {
  if (dim == 0 || hidden == 0 || bottleneck == 0)
    throw std::invalid_argument("autoencoder: sizes must be ≥ 1");
  Sequential seq;
  seq.emplace<nn::Linear>(dim, hidden, rng);
  seq.emplace<nn::LeakyRelu>(0.01);
  seq.emplace<nn::Linear>(hidden, bottleneck, rng);
  return seq;
}

Sequential make_correspondence_decoder(std::size_t dim, std::size_t hidden,
                                       std::size_t bottleneck, Rng& rng) {
  if (dim == 0 || hidden == 0 || bottleneck == 0)
    throw std::invalid_argument("autoencoder: sizes must be ≥ 1");
  Sequential seq;
  seq.emplace<nn::Linear>(bottleneck, hidden, rng);
  seq.emplace<nn::LeakyRelu>(0.01);
  seq.emplace<nn::Linear>(hidden, dim, rng);
  return seq;
}

std::vector<double> standardized_voxels(const Volume& volume) {
  const std::size_t n = volume.data.size();
  if (n == 0) throw std::invalid_argument("standardize: empty volume");
  double mean = 0.0;
  for (double v : volume.data) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : volume.data) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);
  double sd = std::sqrt(var);
  if (sd < 1e-12) sd = 1.0;  // constant volume: center only
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = (volume.data[i] - mean) / sd;
  return out;
}

Tensor standardized_input(const Volume& volume) {
  const GridSpec& g = volume.grid;
  return Tensor({1, 1, g.dim_z(), g.dim_y(), g.dim_x()}, standardized_voxels(volume));
}

// ---- BaseDeepSSM --------------------------------------------------------------

BaseDeepSSM::BaseDeepSSM(const ShapeModel& shape_model,
                         const std::array<std::size_t, 3>& input_dhw,
                         std::uint64_t seed)
    : num_modes_(shape_model.num_modes()), input_dhw_(input_dhw) {
  Rng rng(seed);
  encoder_ = make_image_encoder(input_dhw, num_modes_, rng);

  const std::size_t d = shape_model.dim(), l = num_modes_;
  Tensor weight({d, l});
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < l; ++j)
      weight[i * l + j] = shape_model.basis(static_cast<Eigen::Index>(i),
                                            static_cast<Eigen::Index>(j));
  Tensor bias({d}, std::vector<double>(shape_model.mean.data(),
                                       shape_model.mean.data() + d));
  fixed_ = &reconstruction_.emplace<nn::FixedLinear>(std::move(weight), std::move(bias));
}

Tensor BaseDeepSSM::predict_scores(Tape* tape, const Tensor& volumes, bool training) {
  return encoder_.forward(tape, volumes, training);
}

Tensor BaseDeepSSM::reconstruct_correspondences(Tape* tape, const Tensor& scores) {
  return reconstruction_.forward(tape, scores, /*training=*/false);
}

InferenceResult BaseDeepSSM::infer(const Volume& volume) {
  const auto& g = volume.grid;
  if (std::array<std::size_t, 3>{g.dim_z(), g.dim_y(), g.dim_x()} != input_dhw_)
    throw std::invalid_argument(
        "infer: volume extents do not match the trained input grid");
  const Tensor x = standardized_input(volume);
  Tensor z = encoder_.forward(nullptr, x, /*training=*/false);
  Tensor c = reconstruction_.forward(nullptr, z, /*training=*/false);
  InferenceResult result;
  result.descriptor.assign(z.data(), z.data() + z.size());
  result.correspondences = CorrespondenceSet::from_flat({c.data(), c.size()});
  return result;
}

void BaseDeepSSM::save(const std::filesystem::path& path,
                       const std::map<std::string, double>& extra_meta) const {
  nn::Checkpoint ckpt;
  ckpt.meta_str["variant"] = "base";
  ckpt.meta_num["num_modes"] = static_cast<double>(num_modes_);
  ckpt.meta_num["input_d"] = static_cast<double>(input_dhw_[0]);
  ckpt.meta_num["input_h"] = static_cast<double>(input_dhw_[1]);
  ckpt.meta_num["input_w"] = static_cast<double>(input_dhw_[2]);
  for (const auto& [k, v] : extra_meta) ckpt.meta_num[k] = v;
  auto& enc = ckpt.add_section("encoder");
  enc.specs = encoder_.specs();
  enc.tensors = encoder_.state();
  auto& rec = ckpt.add_section("reconstruction");
  rec.specs = reconstruction_.specs();
  rec.tensors = reconstruction_.state();
  ckpt.save(path);
}

BaseDeepSSM BaseDeepSSM::load(const std::filesystem::path& path) {
  nn::Checkpoint ckpt = nn::Checkpoint::load(path);
  if (ckpt.meta_string("variant") != "base")
    throw std::runtime_error("checkpoint: " + path.string() + " is not a Base model");
  const auto* enc = ckpt.find_section("encoder");
  const auto* rec = ckpt.find_section("reconstruction");
  if (!enc || !rec)
    throw std::runtime_error("checkpoint: missing sections in " + path.string());

  BaseDeepSSM model;
  model.encoder_ = Sequential::from_specs(enc->specs);
  nn::restore_tensors(*enc, model.encoder_.state());
  model.reconstruction_ = Sequential::from_specs(rec->specs);
  nn::restore_tensors(*rec, model.reconstruction_.state());
  model.fixed_ = dynamic_cast<nn::FixedLinear*>(&model.reconstruction_.at(0));
  if (!model.fixed_)
    throw std::runtime_error("checkpoint: reconstruction layer is not fixed_linear");
  model.num_modes_ = static_cast<std::size_t>(ckpt.meta("num_modes"));
  model.input_dhw_ = {static_cast<std::size_t>(ckpt.meta("input_d")),
                      static_cast<std::size_t>(ckpt.meta("input_h")),
                      static_cast<std::size_t>(ckpt.meta("input_w"))};
  return model;
}

// ---- TlDeepSSM -----------------------------------------------------------------

TlDeepSSM::TlDeepSSM(std::size_t num_points, const std::array<std::size_t, 3>& input_dhw,
                     std::size_t bottleneck, std::size_t hidden, std::uint64_t seed)
    : num_points_(num_points), bottleneck_(bottleneck), hidden_(hidden),
      input_dhw_(input_dhw) {
  if (num_points_ == 0) throw std::invalid_argument("tl: need ≥ 1 correspondence point");
  Rng rng(seed);
  ae_encoder_ = make_correspondence_encoder(3 * num_points_, hidden_, bottleneck_, rng);
  ae_decoder_ = make_correspondence_decoder(3 * num_points_, hidden_, bottleneck_, rng);
  t_flank_ = make_image_encoder(input_dhw_, bottleneck_, rng);
}

Tensor TlDeepSSM::encode(Tape* tape, const Tensor& correspondences, bool training) {
  return ae_encoder_.forward(tape, correspondences, training);
}

Tensor TlDeepSSM::decode(Tape* tape, const Tensor& latents, bool training) {
  return ae_decoder_.forward(tape, latents, training);
}

Tensor TlDeepSSM::flank(Tape* tape, const Tensor& volumes, bool training) {
  return t_flank_.forward(tape, volumes, training);
}

InferenceResult TlDeepSSM::infer(const Volume& volume) {
  const auto& g = volume.grid;
  if (std::array<std::size_t, 3>{g.dim_z(), g.dim_y(), g.dim_x()} != input_dhw_)
    throw std::invalid_argument(
        "infer: volume extents do not match the trained input grid");
  const Tensor x = standardized_input(volume);
  Tensor latent = t_flank_.forward(nullptr, x, /*training=*/false);
  Tensor c = ae_decoder_.forward(nullptr, latent, /*training=*/false);
  InferenceResult result;
  result.descriptor.assign(latent.data(), latent.data() + latent.size());
  result.correspondences = CorrespondenceSet::from_flat({c.data(), c.size()});
  return result;
}

std::vector<Tensor> TlDeepSSM::autoencoder_parameters() const {
  std::vector<Tensor> params = ae_encoder_.parameters();
  for (Tensor& t : ae_decoder_.parameters()) params.push_back(t);
  return params;
}

std::vector<Tensor> TlDeepSSM::all_parameters() const {
  std::vector<Tensor> params = autoencoder_parameters();
  for (Tensor& t : t_flank_.parameters()) params.push_back(t);
  return params;
}

void TlDeepSSM::save(const std::filesystem::path& path,
                     const std::map<std::string, double>& extra_meta) const {
  nn::Checkpoint ckpt;
  ckpt.meta_str["variant"] = "tl";
  ckpt.meta_num["num_points"] = static_cast<double>(num_points_);
  ckpt.meta_num["bottleneck"] = static_cast<double>(bottleneck_);
  ckpt.meta_num["hidden"] = static_cast<double>(hidden_);
  ckpt.meta_num["input_d"] = static_cast<double>(input_dhw_[0]);
  ckpt.meta_num["input_h"] = static_cast<double>(input_dhw_[1]);
  ckpt.meta_num["input_w"] = static_cast<double>(input_dhw_[2]);
  for (const auto& [k, v] : extra_meta) ckpt.meta_num[k] = v;

  auto add = [&ckpt](const std::string& name, const Sequential& seq) {
    auto& sec = ckpt.add_section(name);
    sec.specs = seq.specs();
    sec.tensors = seq.state();
  };
  add("ae_encoder", ae_encoder_);
  add("ae_decoder", ae_decoder_);
  add("t_flank", t_flank_);
  ckpt.save(path);
}

TlDeepSSM TlDeepSSM::load(const std::filesystem::path& path) {
  nn::Checkpoint ckpt = nn::Checkpoint::load(path);
  if (ckpt.meta_string("variant") != "tl")
    throw std::runtime_error("checkpoint: " + path.string() + " is not a TL model");
  auto restore = [&ckpt, &path](const std::string& name) {
    const auto* sec = ckpt.find_section(name);
    if (!sec)
      throw std::runtime_error("checkpoint: missing section '" + name + "' in " +
                               path.string());
    Sequential seq = Sequential::from_specs(sec->specs);
    nn::restore_tensors(*sec, seq.state());
    return seq;
  };
  TlDeepSSM model;
  model.ae_encoder_ = restore("ae_encoder");
  model.ae_decoder_ = restore("ae_decoder");
  model.t_flank_ = restore("t_flank");
  model.num_points_ = static_cast<std::size_t>(ckpt.meta("num_points"));
  model.bottleneck_ = static_cast<std::size_t>(ckpt.meta("bottleneck"));
  model.hidden_ = static_cast<std::size_t>(ckpt.meta("hidden"));
  model.input_dhw_ = {static_cast<std::size_t>(ckpt.meta("input_d")),
                      static_cast<std::size_t>(ckpt.meta("input_h")),
                      static_cast<std::size_t>(ckpt.meta("input_w"))};
  return model;
}

TlLossTerms loss_tl(Tape* tape, TlDeepSSM& model, const Tensor& correspondences,
                    const Tensor& volumes, double lambda1, double lambda2,
                    const std::pair<FocalParams, FocalParams>* focal, bool training) {
  if (lambda1 == 0.0 && lambda2 == 0.0)
    throw std::invalid_argument("tl loss: both λ1 and λ2 are zero");

  Tensor auto_term, tf_term;
  if (lambda1 != 0.0) {
    Tensor latent = model.encode(tape, correspondences, training);
    Tensor recon = model.decode(tape, latent, training);
    auto_term = focal
                    ? loss_focal_particles(tape, recon, correspondences, focal->first)
                    : loss_corr(tape, recon, correspondences);
  }
  if (lambda2 != 0.0) {
    // With λ1 = 0 (phase 2) the autoencoder is frozen: its latent is computed
    // off-tape and acts as a fixed regression target for the T-flank.
    Tape* ae_tape = (lambda1 != 0.0) ? tape : nullptr;
    Tensor latent_c = model.encode(ae_tape, correspondences, training);
    Tensor latent_i = model.flank(tape, volumes, training);
    tf_term = focal ? loss_focal_vector(tape, latent_i, latent_c, focal->second)
                    : nn::sse_rows_mean(tape, latent_i, latent_c);
  }

  TlLossTerms terms;
  terms.auto_term = auto_term.defined() ? auto_term.item() : 0.0;
  terms.tf_term = tf_term.defined() ? tf_term.item() : 0.0;
  if (auto_term.defined() && tf_term.defined())
    terms.total = nn::add_scaled(tape, auto_term, lambda1, tf_term, lambda2);
  else if (auto_term.defined())
    terms.total = scaled(tape, auto_term, lambda1);
  else
    terms.total = scaled(tape, tf_term, lambda2);
  return terms;
}

}  // namespace deepssm
