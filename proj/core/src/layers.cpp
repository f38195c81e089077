#include "deepssm/layers.hpp"

#include <stdexcept>

#include "deepssm/init.hpp"

namespace deepssm::nn {

namespace {
void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}
}  // namespace

void LayerSpec::validate() const {
  if (kind == "conv3d") {
    require(in_channels > 0 && out_channels > 0, "conv3d spec: channels must be > 0");
    require(kernel > 0 && kernel % 2 == 1,
            "conv3d spec: kernel extent must be odd and positive, got " +
                std::to_string(kernel));
  } else if (kind == "fully_connected" || kind == "fixed_linear") {
    require(in_features > 0 && out_features > 0,
            kind + " spec: feature sizes must be > 0");
  } else if (kind == "prelu" || kind == "batch_norm") {
    require(channels > 0, kind + " spec: channel count must be > 0");
  } else if (kind == "max_pool3d") {
    require(factor == 2, "max_pool3d spec: pooling factor is fixed at 2, got " +
                             std::to_string(factor));
  } else if (kind == "leaky_relu" || kind == "flatten") {
    // no parameters to check
  } else {
    throw std::invalid_argument("unknown layer kind '" + kind + "'");
  }
}

// ---- Conv3d ----------------------------------------------------------------

Conv3d::Conv3d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
               Rng& rng)
    : in_(in_channels), out_(out_channels), kernel_(kernel) {
  spec().validate();
  weight_ = xavier_init({out_, in_, kernel_, kernel_, kernel_}, rng);
  bias_ = Tensor::zeros({out_}, /*requires_grad=*/true);
}

Conv3d::Conv3d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel)
    : in_(in_channels), out_(out_channels), kernel_(kernel) {
  spec().validate();
  weight_ = Tensor::zeros({out_, in_, kernel_, kernel_, kernel_}, true);
  bias_ = Tensor::zeros({out_}, true);
}

Tensor Conv3d::forward(Tape* tape, const Tensor& x, bool) {
  return conv3d(tape, x, weight_, bias_);
}

std::vector<NamedTensor> Conv3d::state() {
  return {{"weight", weight_}, {"bias", bias_}};
}

LayerSpec Conv3d::spec() const {
  LayerSpec s;
  s.kind = "conv3d";
  s.in_channels = in_;
  s.out_channels = out_;
  s.kernel = kernel_;
  return s;
}

// ---- Linear ----------------------------------------------------------------

Linear::Linear(std::size_t in_features, std::size_t out_features, Rng& rng)
    : in_(in_features), out_(out_features) {
  spec().validate();
  weight_ = xavier_init({out_, in_}, rng);
  bias_ = Tensor::zeros({out_}, true);
}

Linear::Linear(std::size_t in_features, std::size_t out_features)
    : in_(in_features), out_(out_features) {
  spec().validate();
  weight_ = Tensor::zeros({out_, in_}, true);
  bias_ = Tensor::zeros({out_}, true);
}

Tensor Linear::forward(Tape* tape, const Tensor& x, bool) {
  return linear(tape, x, weight_, bias_);
}

std::vector<NamedTensor> Linear::state() {
  return {{"weight", weight_}, {"bias", bias_}};
}

LayerSpec Linear::spec() const {
  LayerSpec s;
  s.kind = "fully_connected";
  s.in_features = in_;
  s.out_features = out_;
  return s;
}

// ---- FixedLinear -----------------------------------------------------------

FixedLinear::FixedLinear(Tensor weight, Tensor bias)
    : weight_(std::move(weight)), bias_(std::move(bias)) {
  require(weight_.rank() == 2 && bias_.rank() == 1 &&
              bias_.dim(0) == weight_.dim(0),
          "fixed_linear: weight must be [out,in] with matching bias");
  weight_.set_requires_grad(false);
  bias_.set_requires_grad(false);
}

FixedLinear::FixedLinear(std::size_t in_features, std::size_t out_features)
    : FixedLinear(Tensor::zeros({out_features, in_features}),
                  Tensor::zeros({out_features})) {}

Tensor FixedLinear::forward(Tape* tape, const Tensor& x, bool) {
  return linear(tape, x, weight_, bias_);
}

std::vector<NamedTensor> FixedLinear::state() {
  return {{"weight", weight_}, {"bias", bias_}};
}

LayerSpec FixedLinear::spec() const {
  LayerSpec s;
  s.kind = "fixed_linear";
  s.in_features = weight_.dim(1);
  s.out_features = weight_.dim(0);
  return s;
}

// ---- PRelu -----------------------------------------------------------------

PRelu::PRelu(std::size_t channels, double initial_slope) : channels_(channels) {
  spec().validate();
  slope_ = Tensor::full({channels_}, initial_slope, /*requires_grad=*/true);
}

Tensor PRelu::forward(Tape* tape, const Tensor& x, bool) {
  return prelu(tape, x, slope_);
}

LayerSpec PRelu::spec() const {
  LayerSpec s;
  s.kind = "prelu";
  s.channels = channels_;
  return s;
}

// ---- BatchNorm -------------------------------------------------------------

BatchNorm::BatchNorm(std::size_t channels) : channels_(channels) {
  spec().validate();
  gamma_ = Tensor::full({channels_}, 1.0, true);
  beta_ = Tensor::zeros({channels_}, true);
  running_mean_ = Tensor::zeros({channels_});
  running_var_ = Tensor::full({channels_}, 1.0);
}

Tensor BatchNorm::forward(Tape* tape, const Tensor& x, bool training) {
  return batch_norm(tape, x, gamma_, beta_, running_mean_, running_var_, training);
}

std::vector<NamedTensor> BatchNorm::state() {
  return {{"gamma", gamma_},
          {"beta", beta_},
          {"running_mean", running_mean_},
          {"running_var", running_var_}};
}

LayerSpec BatchNorm::spec() const {
  LayerSpec s;
  s.kind = "batch_norm";
  s.channels = channels_;
  return s;
}

// ---- MaxPool3d / LeakyRelu / Flatten ----------------------------------------

MaxPool3d::MaxPool3d(std::size_t factor) : factor_(factor) { spec().validate(); }

Tensor MaxPool3d::forward(Tape* tape, const Tensor& x, bool) {
  return max_pool3d(tape, x, factor_);
}

LayerSpec MaxPool3d::spec() const {
  LayerSpec s;
  s.kind = "max_pool3d";
  s.factor = factor_;
  return s;
}

LeakyRelu::LeakyRelu(double negative_slope) : slope_(negative_slope) {}

Tensor LeakyRelu::forward(Tape* tape, const Tensor& x, bool) {
  return leaky_relu(tape, x, slope_);
}

LayerSpec LeakyRelu::spec() const {
  LayerSpec s;
  s.kind = "leaky_relu";
  s.negative_slope = slope_;
  return s;
}

Tensor Flatten::forward(Tape* tape, const Tensor& x, bool) {
  return flatten(tape, x);
}

LayerSpec Flatten::spec() const {
  LayerSpec s;
  s.kind = "flatten";
  return s;
}

// ---- factory / Sequential ---------------------------------------------------

std::unique_ptr<Layer> make_layer(const LayerSpec& spec) {
  spec.validate();
  if (spec.kind == "conv3d")
    return std::make_unique<Conv3d>(spec.in_channels, spec.out_channels, spec.kernel);
  if (spec.kind == "fully_connected")
    return std::make_unique<Linear>(spec.in_features, spec.out_features);
  if (spec.kind == "fixed_linear")
    return std::make_unique<FixedLinear>(spec.in_features, spec.out_features);
  if (spec.kind == "prelu") return std::make_unique<PRelu>(spec.channels);
  if (spec.kind == "batch_norm") return std::make_unique<BatchNorm>(spec.channels);
  if (spec.kind == "max_pool3d") return std::make_unique<MaxPool3d>(spec.factor);
  if (spec.kind == "leaky_relu")
    return std::make_unique<LeakyRelu>(spec.negative_slope);
  if (spec.kind == "flatten") return std::make_unique<Flatten>();
  throw std::invalid_argument("unknown layer kind '" + spec.kind + "'");
}

void Sequential::add(std::unique_ptr<Layer> layer) {
  layers_.push_back(std::move(layer));
}

Tensor Sequential::forward(Tape* tape, const Tensor& x, bool training) {
  Tensor cur = x;
  for (auto& layer : layers_) cur = layer->forward(tape, cur, training);
  return cur;
}

std::vector<Tensor> Sequential::parameters() const {
  std::vector<Tensor> out;
  for (auto& layer : layers_)
    for (Tensor& t : layer->parameters()) out.push_back(t);
  return out;
}

std::vector<NamedTensor> Sequential::state() const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < layers_.size(); ++i)
    for (NamedTensor& nt : layers_[i]->state())
      out.push_back({std::to_string(i) + "." + nt.name, nt.tensor});
  return out;
}

std::vector<LayerSpec> Sequential::specs() const {
  std::vector<LayerSpec> out;
  out.reserve(layers_.size());
  for (auto& layer : layers_) out.push_back(layer->spec());
  return out;
}

Sequential Sequential::from_specs(const std::vector<LayerSpec>& specs) {
  Sequential seq;
  for (const LayerSpec& s : specs) seq.add(make_layer(s));
  return seq;
}

}  // namespace deepssm::nn
