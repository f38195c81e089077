#include "deepssm/init.hpp"

#include <cmath>
#include <stdexcept>

namespace deepssm::nn {

void xavier_fans(const Shape& shape, std::size_t& fan_in, std::size_t& fan_out) {
  if (shape.empty()) throw std::invalid_argument("xavier_init: empty shape");
  if (shape.size() == 1) {
    fan_in = fan_out = shape[0];
    return;
  }
  // [out, in, *receptive field]: both fans scale with the receptive field.
  std::size_t receptive = 1;
  for (std::size_t i = 2; i < shape.size(); ++i) receptive *= shape[i];
  fan_out = shape[0] * receptive;
  fan_in = shape[1] * receptive;
}

Tensor xavier_init(const Shape& shape, Rng& rng, bool requires_grad) {
  std::size_t fan_in = 0, fan_out = 0;
  xavier_fans(shape, fan_in, fan_out);
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t(shape, requires_grad);
  for (double& v : t.values()) v = rng.uniform(-bound, bound);
  return t;
}

Tensor xavier_init(const Shape& shape, std::uint64_t seed, bool requires_grad) {
  Rng rng(seed);
  return xavier_init(shape, rng, requires_grad);
}

}  // namespace deepssm::nn
