#pragma once

#include <memory>
#include <string>
#include <vector>

#include "deepssm/ops.hpp"
#include "deepssm/rng.hpp"
#include "deepssm/tape.hpp"
#include "deepssm/tensor.hpp"

namespace deepssm::nn {

/// Serializable layer description: what a checkpoint manifest stores and what
/// make_layer() rebuilds from. Only the fields for the given kind are used.
struct LayerSpec {
  std::string kind;  // conv3d | fully_connected | fixed_linear | prelu |
                     // batch_norm | max_pool3d | leaky_relu | flatten
  std::size_t in_channels = 0;   // conv3d
  std::size_t out_channels = 0;  // conv3d
  std::size_t kernel = 0;        // conv3d
  std::size_t in_features = 0;   // fully_connected, fixed_linear
  std::size_t out_features = 0;  // fully_connected, fixed_linear
  std::size_t channels = 0;      // prelu, batch_norm
  std::size_t factor = 0;        // max_pool3d
  double negative_slope = 0.0;   // leaky_relu

  /// Throws std::invalid_argument on contradictions (even kernels, pool ≠ 2, …).
  void validate() const;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor forward(Tape* tape, const Tensor& x, bool training) = 0;
  /// Tensors the optimizer updates, in a stable order.
  virtual std::vector<Tensor> parameters() { return {}; }
  /// All persistent tensors (parameters plus e.g. batch-norm running stats).
  virtual std::vector<NamedTensor> state() { return {}; }
  virtual LayerSpec spec() const = 0;
};

class Conv3d : public Layer {
 public:
  Conv3d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
         Rng& rng);
  Conv3d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel);
  Tensor forward(Tape* tape, const Tensor& x, bool training) override;
  std::vector<Tensor> parameters() override { return {weight_, bias_}; }
  std::vector<NamedTensor> state() override;
  LayerSpec spec() const override;

 private:
  std::size_t in_ = 0, out_ = 0, kernel_ = 0;
  Tensor weight_, bias_;
};

class Linear : public Layer {
 public:
  Linear(std::size_t in_features, std::size_t out_features, Rng& rng);
  Linear(std::size_t in_features, std::size_t out_features);
  Tensor forward(Tape* tape, const Tensor& x, bool training) override;
  std::vector<Tensor> parameters() override { return {weight_, bias_}; }
  std::vector<NamedTensor> state() override;
  LayerSpec spec() const override;

 private:
  std::size_t in_ = 0, out_ = 0;
  Tensor weight_, bias_;
};

/// Linear layer with frozen parameters — the PCA-reconstruction output layer:
/// weight columns are the PCA basis, bias is the mean shape. Never trained.
class FixedLinear : public Layer {
 public:
  FixedLinear(Tensor weight, Tensor bias);
  FixedLinear(std::size_t in_features, std::size_t out_features);
  Tensor forward(Tape* tape, const Tensor& x, bool training) override;
  std::vector<NamedTensor> state() override;
  LayerSpec spec() const override;
  const Tensor& weight() const { return weight_; }
  const Tensor& bias() const { return bias_; }

 private:
  Tensor weight_, bias_;
};

class PRelu : public Layer {
 public:
  explicit PRelu(std::size_t channels, double initial_slope = 0.25);
  Tensor forward(Tape* tape, const Tensor& x, bool training) override;
  std::vector<Tensor> parameters() override { return {slope_}; }
  std::vector<NamedTensor> state() override { return {{"slope", slope_}}; }
  LayerSpec spec() const override;

 private:
  std::size_t channels_ = 0;
  Tensor slope_;
};

class BatchNorm : public Layer {
 public:
  explicit BatchNorm(std::size_t channels);
  Tensor forward(Tape* tape, const Tensor& x, bool training) override;
  std::vector<Tensor> parameters() override { return {gamma_, beta_}; }
  std::vector<NamedTensor> state() override;
  LayerSpec spec() const override;

 private:
  std::size_t channels_ = 0;
  Tensor gamma_, beta_, running_mean_, running_var_;
};

class MaxPool3d : public Layer {
 public:
  explicit MaxPool3d(std::size_t factor = 2);
  Tensor forward(Tape* tape, const Tensor& x, bool training) override;
  LayerSpec spec() const override;

 private:
  std::size_t factor_ = 2;
};

class LeakyRelu : public Layer {
 public:
  explicit LeakyRelu(double negative_slope = 0.01);
  Tensor forward(Tape* tape, const Tensor& x, bool training) override;
  LayerSpec spec() const override;

 private:
  double slope_ = 0.01;
};

class Flatten : public Layer {
 public:
  Tensor forward(Tape* tape, const Tensor& x, bool training) override;
  LayerSpec spec() const override;
};

/// Rebuild a zero-initialized layer from its spec (checkpoint loading fills
/// in the stored values afterwards).
std::unique_ptr<Layer> make_layer(const LayerSpec& spec);

/// Ordered layer stack. Forward threads one tensor through every layer;
/// state() names tensors "<index>.<local name>" for checkpoints.
class Sequential {
 public:
  Sequential() = default;
  Sequential(Sequential&&) = default;
  Sequential& operator=(Sequential&&) = default;

  void add(std::unique_ptr<Layer> layer);
  template <typename T, typename... Args>
  T& emplace(Args&&... args) {
    auto layer = std::make_unique<T>(std::forward<Args>(args)...);
    T& ref = *layer;
    add(std::move(layer));
    return ref;
  }

  Tensor forward(Tape* tape, const Tensor& x, bool training);
  std::vector<Tensor> parameters() const;
  std::vector<NamedTensor> state() const;
  std::vector<LayerSpec> specs() const;
  std::size_t size() const { return layers_.size(); }
  Layer& at(std::size_t i) { return *layers_.at(i); }
  const Layer& at(std::size_t i) const { return *layers_.at(i); }

  static Sequential from_specs(const std::vector<LayerSpec>& specs);

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
};

}  // namespace deepssm::nn
