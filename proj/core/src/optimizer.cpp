#include "deepssm/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace deepssm::nn {

double LrSchedule::rate_at(std::size_t step, double initial_rate) const {
  switch (kind) {
    case Kind::constant:
      return initial_rate;
    case Kind::cosine_annealing: {
      if (total_steps == 0)
        throw std::logic_error("lr schedule: cosine annealing needs total_steps > 0");
      const double t = static_cast<double>(std::min(step, total_steps)) /
                       static_cast<double>(total_steps);
      return 0.5 * initial_rate * (1.0 + std::cos(std::numbers::pi * t));
    }
  }
  throw std::logic_error("lr schedule: unhandled kind");
}

Adam::Adam(std::vector<Tensor> params, AdamConfig config)
    : params_(std::move(params)), config_(config), lr_(config.learning_rate) {
  if (config_.learning_rate <= 0.0)
    throw std::invalid_argument("adam: learning rate must be positive");
  if (config_.weight_decay < 0.0)
    throw std::invalid_argument("adam: weight decay must be non-negative");
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const Tensor& p : params_) {
    m_.push_back(Tensor::zeros(p.shape()));
    v_.push_back(Tensor::zeros(p.shape()));
  }
}

void Adam::step() {
  // Validate every gradient before touching any state, so a poisoned batch
  // cannot leave the optimizer half-updated.
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].has_grad()) continue;
    for (double g : params_[i].grad()) {
      if (!std::isfinite(g)) {
        throw std::runtime_error(
            "adam: non-finite gradient in parameter " + std::to_string(i) +
            " of shape " + shape_str(params_[i].shape()) + "; step aborted");
      }
    }
  }

  ++step_count_;
  const double t = static_cast<double>(step_count_);
  const double bc1 = 1.0 - std::pow(config_.beta1, t);
  const double bc2 = 1.0 - std::pow(config_.beta2, t);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    const bool have_grad = p.has_grad();
    auto g = have_grad ? p.grad() : std::span<double>{};
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double grad = (have_grad ? g[j] : 0.0) + config_.weight_decay * p[j];
      m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * grad;
      v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * grad * grad;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] -= lr_ * mhat / (std::sqrt(vhat) + config_.eps);
    }
  }
}

void Adam::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

std::vector<NamedTensor> Adam::state() {
  std::vector<NamedTensor> out;
  out.reserve(2 * params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i)
    out.push_back({"m." + std::to_string(i), m_[i]});
  for (std::size_t i = 0; i < params_.size(); ++i)
    out.push_back({"v." + std::to_string(i), v_[i]});
  return out;
}

}  // namespace deepssm::nn
