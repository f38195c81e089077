#pragma once

#include <functional>
#include <unordered_set>
#include <vector>

#include "deepssm/tensor.hpp"

namespace deepssm::nn {

/// Reverse-mode autodiff tape. Ops append a backward closure for every
/// differentiable forward call; backward(loss) seeds d(loss)/d(loss) = 1 and
/// replays the closures in reverse order. Ops also report which tensors they
/// produced so that backward passes can skip gradient work for inputs that
/// neither require gradients themselves nor were produced by an earlier op
/// (e.g. the raw image batch feeding the first conv layer).
class Tape {
 public:
  void record(std::function<void()> backward_step);

  /// Remember that `t` is the output of a recorded op, i.e. a gradient must
  /// flow through it back to whatever produced it.
  void mark_produced(const Tensor& t);

  /// True if the backward pass must write a gradient into `t`.
  bool needs_grad(const Tensor& t) const;

  /// Runs all recorded closures in reverse. `loss` must be a scalar.
  void backward(Tensor& loss);

  void clear();
  std::size_t num_steps() const { return steps_.size(); }

 private:
  std::vector<std::function<void()>> steps_;
  std::unordered_set<const void*> produced_;
};

}  // namespace deepssm::nn
