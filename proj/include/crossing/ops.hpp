#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "crossing/tensor.hpp"

namespace crossing {

enum class Mode { train, eval };

/// Running statistics owned by one batch_norm site.
struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  static BatchNormState make(std::size_t channels);
};

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

// Differentiable primitives. Every function validates its shape algebra and
// throws ShapeError naming the kind and the offending extents. When a tape
// is active and any input requires a gradient, the call is recorded.
namespace ops {

// (m,k)x(k,n) -> (m,n), or batched (b,m,k)x(b,k,n) -> (b,m,n).
Tensor matmul(const Tensor& a, const Tensor& b);
// Swaps the last two axes of a rank-3 tensor.
Tensor transpose_last2(const Tensor& x);
// x (..., in), weight (in, out), bias (out) -> (..., out).
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
// x (N,H,W,Cin), weight (kh,kw,Cin,Cout), bias (Cout) -> (N,Ho,Wo,Cout), zero padding.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dParams params);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);

// Normalizes over every axis but the last (channels). Train mode uses batch
// statistics and updates the running estimates; eval mode is affine.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                  Mode mode);

// (H,W) -> (H/2,W/2) or (...,H,W,C) -> (...,H/2,W/2,C). Extents must be even.
Tensor maxpool2x2_stride2(const Tensor& x);

Tensor softmax(const Tensor& x, std::size_t axis);
Tensor softmax(const Tensor& x);  // last axis

Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis);

Tensor reshape(const Tensor& x, Shape shape);
Tensor sum(const Tensor& x);
// Removes `axis` by summation.
Tensor sum_axis(const Tensor& x, std::size_t axis);
// (N,H,W,C) -> (N,C).
Tensor global_avg_pool(const Tensor& x);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);

// Gathers the k*k footprint around every location: (N,H,W,C) -> (N*H*W, k*k, C).
// Rows follow raster order over the window; positions outside the image are zero.
Tensor unfold_footprint(const Tensor& x, std::size_t k);
// (L,m,G) -> (L,m,G*group); output channel c reads input channel c / group.
Tensor expand_groups(const Tensor& x, std::size_t group);

// Mean cross-entropy of softmax(logits) against 0-based labels; logits (N,K).
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

}  // namespace ops

}  // namespace crossing
