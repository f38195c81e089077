#pragma once

#include <cstddef>

#include "deepssm/tape.hpp"
#include "deepssm/tensor.hpp"

namespace deepssm::nn {

/// Thread count used inside batched ops (convolution forward). Results are
/// identical for any value because samples write disjoint output ranges.
void set_compute_threads(std::size_t n);
std::size_t compute_threads();

// All ops: forward immediately, and if `tape` is non-null, record the
// backward closure and mark the output as produced. Inputs that neither
// require gradients nor were produced by an earlier recorded op are skipped
// in the backward pass.

/// y = x·Wᵀ + b with x:[N,in], W:[out,in], b:[out] → y:[N,out]
Tensor linear(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& b);

/// 3D cross-correlation, stride 1, zero padding k/2 (shape preserving).
/// x:[N,Cin,D,H,W], w:[Cout,Cin,k,k,k], b:[Cout] → y:[N,Cout,D,H,W]
Tensor conv3d(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& b);

/// Isotropic max pooling, kernel = stride = factor. Gradient routes only to
/// the argmax position of each window.
Tensor max_pool3d(Tape* tape, const Tensor& x, std::size_t factor);

/// Batch normalization over all axes except the channel axis (dim 1).
/// Train mode uses batch statistics (biased variance) and updates running
/// stats in place with momentum 0.1 convention new = (1−m)·old + m·batch;
/// eval mode normalizes by the running stats. Train mode requires batch ≥ 2.
Tensor batch_norm(Tape* tape, const Tensor& x, const Tensor& gamma,
                  const Tensor& beta, Tensor& running_mean, Tensor& running_var,
                  bool training, double momentum = 0.1, double eps = 1e-5);

/// Parametric ReLU with one learnable slope per channel (dim 1).
Tensor prelu(Tape* tape, const Tensor& x, const Tensor& slope);

/// Leaky ReLU with a fixed negative slope.
Tensor leaky_relu(Tape* tape, const Tensor& x, double negative_slope);

/// Collapse all axes after the first: [N, ...] → [N, rest].
Tensor flatten(Tape* tape, const Tensor& x);

/// Element-wise alpha·a + beta·b over same-shape tensors.
Tensor add_scaled(Tape* tape, const Tensor& a, double alpha, const Tensor& b,
                  double beta);

/// Element-wise product (used by gradient-check fixtures).
Tensor mul(Tape* tape, const Tensor& a, const Tensor& b);

/// Scalar sum of all entries.
Tensor sum(Tape* tape, const Tensor& x);

/// (1/N)·Σ_rows ||pred_row − target_row||² — the Eq. 2 / Eq. 3 / TL-term
/// shape: mean over the leading axis of the squared L2 row difference.
/// Differentiable in both arguments (the TL latent term trains both sides).
Tensor sse_rows_mean(Tape* tape, const Tensor& pred, const Tensor& target);

/// Focal loss, averaged over rows and groups: rows are samples, each row is
/// split into K/group_size contiguous groups, e = group L2 error, and each
/// group contributes e²·sigmoid(a·(e − c)). group_size = 3 applies the loss
/// per 3D particle; group_size = K applies it to the whole row vector.
Tensor focal_rows_mean(Tape* tape, const Tensor& pred, const Tensor& target,
                       double a, double c, std::size_t group_size);

/// Mean binary cross-entropy with logits (numerically stable form).
Tensor bce_with_logits(Tape* tape, const Tensor& logits, const Tensor& targets);

}  // namespace deepssm::nn
