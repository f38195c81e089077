#include "deepssm/tape.hpp"

#include <stdexcept>

namespace deepssm::nn {

void Tape::record(std::function<void()> backward_step) {
  steps_.push_back(std::move(backward_step));
}

void Tape::mark_produced(const Tensor& t) { produced_.insert(t.storage_id()); }

bool Tape::needs_grad(const Tensor& t) const {
  return t.requires_grad() || produced_.count(t.storage_id()) != 0;
}

void Tape::backward(Tensor& loss) {
  if (loss.size() != 1) {
    throw std::logic_error("tape: backward() needs a scalar loss, got shape " +
                           shape_str(loss.shape()));
  }
  if (!produced_.count(loss.storage_id())) {
    throw std::logic_error("tape: backward() on a tensor this tape did not produce");
  }
  loss.grad()[0] += 1.0;
  for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
}

void Tape::clear() {
  steps_.clear();
  produced_.clear();
}

}  // namespace deepssm::nn
