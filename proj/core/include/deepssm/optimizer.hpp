#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "deepssm/layers.hpp"
#include "deepssm/tensor.hpp"

namespace deepssm::nn {

struct AdamConfig {
  double learning_rate = 1e-3;
  double weight_decay = 5e-5;  // applied as an L2 term added to the gradient
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Learning-rate schedule over training steps (we step it once per epoch).
/// cosine_annealing: lr(t) = 0.5·lr0·(1 + cos(π·t/total)), evaluated at
/// t = 0..total−1 during training so the rate stays positive.
struct LrSchedule {
  enum class Kind { constant, cosine_annealing };
  Kind kind = Kind::constant;
  std::size_t total_steps = 0;  // required for cosine_annealing

  double rate_at(std::size_t step, double initial_rate) const;
};

/// Adam over a fixed parameter list. Moment buffers are ordinary tensors so
/// checkpoints can persist them and a resumed run continues bit-exactly.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig config);

  /// One update using the current learning rate. Throws std::runtime_error on
  /// any non-finite gradient, leaving parameters and moments untouched.
  void step();

  void zero_grad();
  void set_learning_rate(double lr) { lr_ = lr; }
  double learning_rate() const { return lr_; }
  const AdamConfig& config() const { return config_; }
  std::size_t step_count() const { return step_count_; }
  void set_step_count(std::size_t t) { step_count_ = t; }

  /// Moment buffers, named "m.<i>" / "v.<i>" in parameter order.
  std::vector<NamedTensor> state();

 private:
  std::vector<Tensor> params_;
  std::vector<Tensor> m_, v_;
  AdamConfig config_;
  double lr_ = 0.0;
  std::size_t step_count_ = 0;
};

}  // namespace deepssm::nn
