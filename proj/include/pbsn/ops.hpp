#pragma once

#include <cstddef>

#include "pbsn/tensor.hpp"

// Differentiable primitives shared by the encoder, heads and losses.
//
// Spatial ops accept either a single sample [C,H,W] or a batch [N,C,H,W] and
// return the matching rank.

namespace pbsn::ops {

/// Lower bound on a channel vector's L2 norm below which normalisation
/// returns the zero vector.
inline constexpr double kNormEpsilon = 1e-12;

/// Cross-correlation. `bias` may be an undefined Tensor.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride,
              std::size_t pad);

Tensor relu(const Tensor& t);

/// Mean over H,W: [N,C,H,W] -> [N,C], [C,H,W] -> [C].
Tensor avgpool_spatial(const Tensor& t);

/// x [n] or [N,n]; weight [m,n]; bias [m] or undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor matmul(const Tensor& a, const Tensor& b);

/// Softmax over the last axis.
Tensor softmax(const Tensor& t);
Tensor log_softmax(const Tensor& t);

/// Divides every channel vector f[:,h,w] by its L2 norm; positions whose
/// norm is <= kNormEpsilon map to zero. [C,H,W] or [N,C,H,W].
Tensor l2_normalize_channels(const Tensor& t);

Tensor reshape(const Tensor& t, Shape shape);
/// Swaps the first two axes.
Tensor permute01(const Tensor& t);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& t, double factor);
/// t[..., i] * v[i]
Tensor mul_last_axis(const Tensor& t, const Tensor& v);

Tensor sum(const Tensor& t);
Tensor mean(const Tensor& t);
/// Drops the last axis by averaging over it.
Tensor mean_last_axis(const Tensor& t);


}  // namespace pbsn::ops
