#pragma once

#include <cstdint>

#include "deepssm/rng.hpp"
#include "deepssm/tensor.hpp"

namespace deepssm::nn {

/// Xavier (Glorot) uniform initialization: U(−b, b), b = sqrt(6/(fan_in+fan_out)).
/// Fans are derived from the shape: [out,in] for matrices, [Cout,Cin,k,k,k]
/// for convolution kernels (fan = channels × receptive field), and for vectors
/// fan_in = fan_out = length.
Tensor xavier_init(const Shape& shape, Rng& rng, bool requires_grad = true);

/// Convenience overload drawing from a fresh generator seeded with `seed`.
Tensor xavier_init(const Shape& shape, std::uint64_t seed, bool requires_grad = true);

void xavier_fans(const Shape& shape, std::size_t& fan_in, std::size_t& fan_out);

}  // namespace deepssm::nn
