#pragma once

#include <functional>
#include <span>

#include "crossing/tensor.hpp"

namespace crossing {

/// Central-difference gradient of a scalar function of x:
/// (f(x + h e_k) - f(x - h e_k)) / 2h for every element k.
/// Evaluates f on a private copy of x; x itself is never modified.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double h = 1e-5);

/// Same estimate for a tensor that f reads through shared state (a model
/// parameter). The tensor is perturbed in place and restored bit-exactly.
Tensor finite_diff_grad_inplace(const std::function<double()>& f, Tensor& x, double h = 1e-5);

/// ||a - b|| / max(||a||, ||b||), or 0 when both norms are below `floor`.
double relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-12);

}  // namespace crossing
