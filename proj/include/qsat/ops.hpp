// SPDX-License-Identifier: Apache-2.0
//
// Differentiable built-in operations. Broadcasting is limited to per-channel
// (axis-1) vectors against N x C x H x W tensors.
#pragma once

#include <cstddef>

#include "qsat/tensor.hpp"

namespace qsat {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
// a / s where s holds exactly one element; gradient flows into both.
Tensor div_by(const Tensor& a, const Tensor& s);
Tensor sqrt(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);

// Reductions to a one-element tensor.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// (1/len) * sum(t_i^2). Uncentered: this is the VAR[.] convention used for
// weights throughout. Throws DomainError on an empty tensor.
Tensor mean_square(const Tensor& a);
// Non-differentiable convenience returning the value.
double mean_square_value(std::span<const double> values);

// [m x k] . [k x n]
Tensor matmul(const Tensor& a, const Tensor& b);
// x [N x in] against weight [out x in]: x . weight^T, no bias.
Tensor linear(const Tensor& x, const Tensor& weight);

// Cross-correlation of x [N x C x H x W] with w [C' x C x k x k], no bias.
Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride = 1,
              std::size_t pad = 0);
std::size_t conv_output_extent(std::size_t in, std::size_t kernel,
                               std::size_t stride, std::size_t pad);

// Non-overlapping k x k windows (stride k). avg_pool2d divides by k^2.
Tensor avg_pool2d(const Tensor& x, std::size_t k);
Tensor max_pool2d(const Tensor& x, std::size_t k);
// [N x C x H x W] -> [N x C*H*W]
Tensor flatten(const Tensor& x);

// Per-channel broadcast: v has C elements, x is N x C x H x W (or N x C).
Tensor mul_channel(const Tensor& x, const Tensor& v);
Tensor add_channel(const Tensor& x, const Tensor& v);

}  // namespace qsat
